"""Finite-difference oracle for every differentiable kernel."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .normalizers import NormKind, NormParams, build_partition, norm_backward, norm_forward
from .tensor import Tensor4

MUTATIONS = ("drop-dmu", "drop-dvar", "wrong-size")

DEFAULT_STEP = 1e-5
DEFAULT_TOL = 1e-4


def finite_diff(f, x: Tensor4, step: float = DEFAULT_STEP) -> Tensor4:
    """Central differences of a scalar-valued function, one coordinate at a time.

    Double precision only; single-precision probes sit below the noise floor.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = x.data.astype(np.float64).copy()
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(Tensor4(base))
        flat[i] = orig - step
        fm = f(Tensor4(base))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"non-finite function value near coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * step)
    return Tensor4(grad)


def finite_diff_array(f, x: np.ndarray, step: float = DEFAULT_STEP) -> np.ndarray:
    """finite_diff for plain ndarrays (parameter vectors, weights)."""
    if step <= 0:
        raise ValueError("step must be positive")
    base = x.astype(np.float64).copy()
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(base)
        flat[i] = orig - step
        fm = f(base)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"non-finite function value near coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> tuple[float, float]:
    """(max relative, max absolute) error; the relative denominator is
    max(|a|, |b|, 1e-8) per coordinate."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    b = np.asarray(numeric, dtype=np.float64).reshape(-1)
    absdiff = np.abs(a - b)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float((absdiff / denom).max()), float(absdiff.max())


@dataclass
class GradReport:
    op: str
    step: float
    tol: float
    max_rel: dict = field(default_factory=dict)
    max_abs: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(v <= self.tol for v in self.max_rel.values())

    def record(self, name: str, analytic, numeric) -> None:
        rel, ab = max_rel_err(analytic, numeric)
        self.max_rel[name] = rel
        self.max_abs[name] = ab

    def summary(self) -> str:
        parts = ", ".join(f"{k}: rel={v:.2e}" for k, v in self.max_rel.items())
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.op} (step={self.step:g}, tol={self.tol:g}) {parts}"


def check_norm_layer(kind: NormKind, shape, eps: float = 1e-5,
                     tol: float = DEFAULT_TOL, step: float = DEFAULT_STEP,
                     seed: int = 0, mutation: str | None = None) -> GradReport:
    """Compare analytic normalizer gradients against finite differences.

    The scalar probe is a fixed random linear functional of the output, so
    the check costs O(size) forwards instead of a full Jacobian.
    """
    rng = np.random.default_rng(seed)
    n, c, h, w = shape
    x = Tensor4(rng.standard_normal(shape))
    params = NormParams.init(c)
    params.gamma = rng.uniform(0.5, 1.5, size=c)
    params.beta = rng.normal(0.0, 0.2, size=c)
    probe = rng.standard_normal(shape)
    part = build_partition(kind, shape)

    y, cache = norm_forward(x, part, params, mode="train", eps=eps)
    dx, dgamma, dbeta = norm_backward(Tensor4(probe), cache, params, mutation=mutation)

    def loss_of_x(xt: Tensor4) -> float:
        yy, _ = norm_forward(xt, part, params, mode="train", eps=eps)
        return float((yy.data * probe).sum())

    def loss_of_gamma(g: np.ndarray) -> float:
        p = NormParams(g, params.beta, params.dgamma, params.dbeta)
        yy, _ = norm_forward(x, part, p, mode="train", eps=eps)
        return float((yy.data * probe).sum())

    def loss_of_beta(b: np.ndarray) -> float:
        p = NormParams(params.gamma, b, params.dgamma, params.dbeta)
        yy, _ = norm_forward(x, part, p, mode="train", eps=eps)
        return float((yy.data * probe).sum())

    report = GradReport(op=str(part.kind), step=step, tol=tol)
    report.record("dx", dx.data, finite_diff(loss_of_x, x, step).data)
    report.record("dgamma", dgamma, finite_diff_array(loss_of_gamma, params.gamma, step))
    report.record("dbeta", dbeta, finite_diff_array(loss_of_beta, params.beta, step))
    return report
