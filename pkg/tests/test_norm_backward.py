"""Backward normalization: analytic gradients, invariances, planted defects."""

import numpy as np
import pytest

from normkit.gradcheck import check_norm_layer
from normkit.normalizers import (
    NormKind,
    NormParams,
    build_partition,
    norm_backward,
    norm_forward,
)
from normkit.tensor import Tensor4

ALL_KINDS = [NormKind("bn"), NormKind("in"), NormKind("ln"), NormKind("gn", 2),
             NormKind("pn"), NormKind("bgn", 4)]


class TestBackwardBasics:
    @pytest.mark.parametrize("kind", ALL_KINDS, ids=str)
    def test_zero_upstream_gives_zero_gradients(self, kind):
        rng = np.random.default_rng(0)
        shape = (2, 4, 3, 3)
        x = Tensor4(rng.standard_normal(shape))
        part = build_partition(kind, shape)
        params = NormParams.init(4)
        _, cache = norm_forward(x, part, params)
        dx, dgamma, dbeta = norm_backward(Tensor4(np.zeros(shape)), cache, params)
        assert (dx.data == 0).all()
        assert (dgamma == 0).all()
        assert (dbeta == 0).all()

    @pytest.mark.parametrize("kind", ALL_KINDS, ids=str)
    def test_group_sums_of_dx_vanish(self, kind):
        # shifting a whole statistic group leaves xhat unchanged, so the
        # gradient must sum to zero over every group
        rng = np.random.default_rng(1)
        shape = (3, 4, 4, 4)
        x = Tensor4(rng.standard_normal(shape))
        part = build_partition(kind, shape)
        params = NormParams.init(4)
        params.gamma = np.full(4, 1.3)
        _, cache = norm_forward(x, part, params)
        dy = Tensor4(rng.standard_normal(shape))
        dx, _, _ = norm_backward(dy, cache, params)
        for grp in part.groups():
            assert abs(dx.flat()[grp].sum()) <= 1e-9

    def test_dgamma_dbeta_accumulate_per_channel(self):
        rng = np.random.default_rng(2)
        shape = (2, 3, 2, 2)
        x = Tensor4(rng.standard_normal(shape))
        part = build_partition(NormKind("bgn", 2), shape)
        params = NormParams.init(3)
        _, cache = norm_forward(x, part, params)
        dy = rng.standard_normal(shape)
        _, dgamma, dbeta = norm_backward(Tensor4(dy), cache, params)
        xhat = cache.xhat.reshape(shape)
        np.testing.assert_allclose(dbeta, dy.sum(axis=(0, 2, 3)), atol=1e-12)
        np.testing.assert_allclose(dgamma, (dy * xhat).sum(axis=(0, 2, 3)), atol=1e-12)

    def test_backward_requires_train_cache(self):
        x = Tensor4(np.random.default_rng(3).standard_normal((2, 3, 2, 2)))
        part = build_partition(NormKind("ln"), x.shape)
        params = NormParams.init(3)
        _, cache = norm_forward(x, part, params, mode="infer")
        with pytest.raises(ValueError, match="train-mode"):
            norm_backward(Tensor4(np.zeros(x.shape)), cache, params)

    def test_shape_mismatch(self):
        x = Tensor4(np.zeros((2, 3, 2, 2)))
        part = build_partition(NormKind("ln"), x.shape)
        params = NormParams.init(3)
        _, cache = norm_forward(x, part, params)
        with pytest.raises(ValueError, match="does not match"):
            norm_backward(Tensor4(np.zeros((2, 3, 2, 3))), cache, params)

    def test_unknown_mutation_rejected(self):
        x = Tensor4(np.zeros((1, 2, 2, 2)))
        part = build_partition(NormKind("bn"), x.shape)
        params = NormParams.init(2)
        _, cache = norm_forward(x, part, params)
        with pytest.raises(ValueError, match="mutation"):
            norm_backward(Tensor4(np.zeros(x.shape)), cache, params, mutation="nope")


class TestGradcheckAllKinds:
    @pytest.mark.parametrize("kind", ALL_KINDS, ids=str)
    def test_spec_shape(self, kind):
        report = check_norm_layer(kind, (3, 4, 5, 5), seed=5)
        assert report.passed, report.summary()

    @pytest.mark.parametrize("kind", [NormKind("gn", 3), NormKind("bgn", 5)])
    def test_remainder_groups(self, kind):
        report = check_norm_layer(kind, (2, 7, 3, 3), seed=6)
        assert report.passed, report.summary()

    @pytest.mark.parametrize("kind", ALL_KINDS, ids=str)
    def test_fast_and_generic_paths_agree(self, kind):
        rng = np.random.default_rng(7)
        shape = (3, 8, 4, 4)
        x = Tensor4(rng.standard_normal(shape))
        params = NormParams.init(8)
        params.gamma = rng.uniform(0.5, 1.5, 8)
        part = build_partition(kind, shape)
        dy = Tensor4(rng.standard_normal(shape))
        _, cache_f = norm_forward(x, part, params)
        _, cache_g = norm_forward(x, part.generic_clone(), params)
        dx_f, dg_f, db_f = norm_backward(dy, cache_f, params)
        dx_g, dg_g, db_g = norm_backward(dy, cache_g, params)
        np.testing.assert_allclose(dx_f.data, dx_g.data, atol=1e-12)
        np.testing.assert_allclose(dg_f, dg_g, atol=1e-12)
        np.testing.assert_allclose(db_f, db_g, atol=1e-12)


class TestPlantedMutations:
    @pytest.mark.parametrize("mutation", ["drop-dmu", "drop-dvar", "wrong-size"])
    @pytest.mark.parametrize("kind", ALL_KINDS, ids=str)
    def test_every_mutation_is_caught_on_every_kind(self, kind, mutation):
        report = check_norm_layer(kind, (3, 4, 5, 5), seed=8, mutation=mutation)
        assert not report.passed, (
            f"{mutation} on {kind} slipped through: {report.summary()}")

    @pytest.mark.parametrize("kind", ALL_KINDS, ids=str)
    def test_unmutated_backward_passes_same_setup(self, kind):
        report = check_norm_layer(kind, (3, 4, 5, 5), seed=8, mutation=None)
        assert report.passed, report.summary()
