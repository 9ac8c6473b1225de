"""The finite-difference oracle itself."""

import numpy as np
import pytest

from normkit.gradcheck import (
    GradReport,
    check_norm_layer,
    finite_diff,
    max_rel_err,
)
from normkit.model import ConvNet, ConvNetSpec
from normkit.normalizers import NormKind
from normkit.ops import softmax_cross_entropy
from normkit.tensor import Tensor4


class TestFiniteDiff:
    def test_linear_functional_gives_all_ones(self):
        x = Tensor4(np.random.default_rng(0).standard_normal((2, 2, 3, 3)))
        grad = finite_diff(lambda t: float(t.data.sum()), x, 1e-5)
        np.testing.assert_allclose(grad.data, 1.0, atol=1e-9)

    def test_quadratic_gives_x(self):
        x = Tensor4(np.random.default_rng(1).standard_normal((1, 3, 2, 4)))
        grad = finite_diff(lambda t: float(0.5 * (t.data ** 2).sum()), x, 1e-5)
        np.testing.assert_allclose(grad.data, x.data, atol=1e-9)

    def test_rejects_bad_step(self):
        x = Tensor4(np.zeros((1, 1, 1, 1)))
        with pytest.raises(ValueError, match="step"):
            finite_diff(lambda t: 0.0, x, 0.0)

    def test_non_finite_function_raises(self):
        x = Tensor4(np.ones((1, 1, 1, 2)))
        with pytest.raises(ValueError, match="non-finite"):
            finite_diff(lambda t: float("nan"), x, 1e-5)

    def test_cnn_loss_input_gradient(self):
        # whole-network dx against the checker on a 2-layer CNN with bgn
        rng = np.random.default_rng(2)
        spec = ConvNetSpec(stages=((4, 1), (8, 1)), norm=NormKind("bgn", 4),
                           num_classes=3, input_shape=(4, 6, 6))
        model = ConvNet(spec, dtype=np.float64, seed=0)
        x = Tensor4(rng.standard_normal((2, 4, 6, 6)))
        labels = np.array([0, 2])

        logits, cache = model.forward(x, mode="train")
        loss, dlogits = softmax_cross_entropy(logits, labels)
        # analytic dx: push dlogits back through the whole stack
        from normkit import ops
        from normkit.normalizers import norm_backward

        dpooled, _, _ = ops.linear_backward(cache.linear, dlogits)
        da = ops.gap_backward(cache.gap, dpooled)
        for i in reversed(range(len(model.blocks))):
            da = ops.relu_backward(cache.relus[i], da)
            da, _, _ = norm_backward(da, cache.norms[i], model.blocks[i].params)
            da, _, _ = ops.conv2d_backward(cache.convs[i], da)

        def loss_fn(t):
            lg, _ = model.forward(t, mode="train")
            val, _ = softmax_cross_entropy(lg, labels)
            return val

        numeric = finite_diff(loss_fn, x, 1e-5)
        assert max_rel_err(da.data, numeric.data)[0] <= 1e-4


class TestMaxRelErr:
    def test_exact_match(self):
        a = np.array([1.0, -2.0, 0.0])
        assert max_rel_err(a, a) == (0.0, 0.0)

    def test_denominator_floor(self):
        rel, _ = max_rel_err(np.array([0.0]), np.array([1e-12]))
        assert rel == pytest.approx(1e-12 / 1e-8)


class TestCheckNormLayer:
    def test_bn_passes(self):
        assert check_norm_layer(NormKind("bn"), (3, 4, 5, 5)).passed

    def test_bgn_passes(self):
        assert check_norm_layer(NormKind("bgn", 8), (4, 8, 4, 4)).passed

    def test_corrupted_backward_fails(self):
        report = check_norm_layer(NormKind("bn"), (3, 4, 5, 5), mutation="drop-dvar")
        assert not report.passed

    def test_report_summary_format(self):
        report = check_norm_layer(NormKind("ln"), (2, 3, 4, 4))
        text = report.summary()
        assert text.startswith("PASS ln")
        assert "dx" in text and "dgamma" in text and "dbeta" in text

    def test_report_pass_flag_uses_tolerance(self):
        report = GradReport(op="x", step=1e-5, tol=1e-4)
        report.max_rel = {"dx": 5e-5}
        assert report.passed
        report.max_rel["dgamma"] = 2e-4
        assert not report.passed
