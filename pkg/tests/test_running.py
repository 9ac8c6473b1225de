"""Moving-average statistics for inference."""

import numpy as np
import pytest

from normkit.normalizers import (
    NormKind,
    NormParams,
    RunningStats,
    build_partition,
    merge_shard_caches,
    norm_forward,
    update_running,
)
from normkit.tensor import Tensor4


def train_cache(x, kind):
    part = build_partition(kind, x.shape)
    _, cache = norm_forward(Tensor4(x), part, NormParams.init(x.shape[1]))
    return cache


class TestUpdateRunning:
    def test_momentum_one_replaces(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((4, 3, 2, 2))
        cache = train_cache(x, NormKind("bn"))
        running = update_running(RunningStats.fresh(3, momentum=1.0), cache)
        np.testing.assert_array_equal(running.means, cache.mu)
        np.testing.assert_array_equal(running.vars, cache.var)

    def test_single_step_formula(self):
        # fresh (0,1), m=0.1, batch stats (2,4) -> means 0.2, vars 1.3
        x = np.zeros((2, 1, 1, 2))
        x[...] = [[[[0.0, 4.0]]], [[[2.0, 2.0]]]]  # mu=2, var=(4+4+0+0)/4=2 -> adjust
        cache = train_cache(x, NormKind("bn"))
        # craft exact batch stats instead: mu=2, var=4
        cache.mu = np.array([2.0])
        cache.var = np.array([4.0])
        running = update_running(RunningStats.fresh(1, momentum=0.1), cache)
        np.testing.assert_allclose(running.means, [0.2], atol=1e-15)
        np.testing.assert_allclose(running.vars, [1.3], atol=1e-15)

    def test_stationary_stream_converges(self):
        # 500 steps at m=0.1: running mean within 3 standard errors of truth
        rng = np.random.default_rng(1)
        true_mu, true_sigma = 1.5, 2.0
        shape = (16, 2, 4, 4)
        kind = NormKind("bn")
        part = build_partition(kind, shape)
        params = NormParams.init(2)
        running = RunningStats.fresh(part.n_groups, momentum=0.1)
        for _ in range(500):
            x = Tensor4(rng.standard_normal(shape) * true_sigma + true_mu)
            _, cache = norm_forward(x, part, params)
            running = update_running(running, cache)
        # EMA of batch means: variance sigma^2/count * m/(2-m)
        count = shape[0] * shape[2] * shape[3]
        se = true_sigma / np.sqrt(count) * np.sqrt(0.1 / 1.9)
        assert np.abs(running.means - true_mu).max() <= 3 * se
        assert np.abs(running.vars - true_sigma ** 2).max() <= 0.15 * true_sigma ** 2

    def test_slot_mismatch_raises(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 4, 2, 2))
        cache = train_cache(x, NormKind("bgn", 4))
        with pytest.raises(ValueError, match="running-stat shape mismatch"):
            update_running(RunningStats.fresh(8), cache)

    def test_sample_local_kinds_rejected(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 4, 2, 2))
        cache = train_cache(x, NormKind("in"))
        with pytest.raises(ValueError, match="bn/bgn"):
            update_running(RunningStats.fresh(8), cache)

    def test_infer_cache_rejected(self):
        rng = np.random.default_rng(4)
        x = Tensor4(rng.standard_normal((2, 3, 2, 2)))
        part = build_partition(NormKind("bn"), x.shape)
        params = NormParams.init(3)
        running = RunningStats.fresh(3)
        _, cache = norm_forward(x, part, params, running=running, mode="infer")
        with pytest.raises(ValueError, match="train-mode"):
            update_running(running, cache)

    def test_update_is_functional(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((2, 3, 2, 2))
        cache = train_cache(x, NormKind("bn"))
        before = RunningStats.fresh(3)
        after = update_running(before, cache)
        assert (before.means == 0).all() and (before.vars == 1).all()
        assert after is not before

    def test_momentum_validation(self):
        with pytest.raises(ValueError, match="momentum"):
            RunningStats.fresh(3, momentum=0.0)


class TestMergeShardCaches:
    def test_unweighted_mean_of_shard_statistics(self):
        rng = np.random.default_rng(6)
        kind = NormKind("bgn", 2)
        a = train_cache(rng.standard_normal((2, 4, 2, 2)), kind)
        b = train_cache(rng.standard_normal((2, 4, 2, 2)) + 5.0, kind)
        merged = merge_shard_caches([a, b])
        np.testing.assert_allclose(merged.mu, (a.mu + b.mu) / 2, atol=1e-15)
        np.testing.assert_allclose(merged.var, (a.var + b.var) / 2, atol=1e-15)

    def test_single_shard_passthrough(self):
        rng = np.random.default_rng(7)
        a = train_cache(rng.standard_normal((2, 4, 2, 2)), NormKind("bn"))
        assert merge_shard_caches([a]) is a
