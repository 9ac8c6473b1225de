"""Dense 4-D feature-map tensors with deterministic double-precision reductions."""

from __future__ import annotations

import numpy as np

_ALLOWED_DTYPES = (np.float32, np.float64)


class Tensor4:
    """A dense (N, C, H, W) tensor backed by one contiguous buffer.

    Element (n, c, h, w) sits at flat offset ((n*C + c)*H + h)*W + w, so
    flattening a single sample yields the merged dimension D = C*H*W with
    the channel as the slowest-varying axis.
    """

    __slots__ = ("data",)

    def __init__(self, data) -> None:
        arr = np.asarray(data)
        if arr.ndim != 4:
            raise ValueError(f"Tensor4 requires 4 dimensions, got {arr.ndim}")
        if arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def precision(self) -> str:
        return "single" if self.data.dtype == np.float32 else "double"

    @property
    def size(self) -> int:
        return self.data.size

    def flat(self) -> np.ndarray:
        """1-D view in storage order (no copy)."""
        return self.data.reshape(-1)

    def astype(self, dtype) -> "Tensor4":
        return Tensor4(self.data.astype(dtype))

    def copy(self) -> "Tensor4":
        return Tensor4(self.data.copy())

    def __repr__(self) -> str:
        n, c, h, w = self.shape
        return f"Tensor4(shape=({n},{c},{h},{w}), precision={self.precision})"

    @classmethod
    def zeros(cls, shape, dtype=np.float64) -> "Tensor4":
        return cls(np.zeros(shape, dtype=dtype))

    @classmethod
    def full(cls, shape, value, dtype=np.float64) -> "Tensor4":
        return cls(np.full(shape, value, dtype=dtype))


def ordered_sum(values: np.ndarray) -> float:
    """Sum in the given element order, accumulating in float64.

    np.bincount adds its weights one element at a time in input order, which
    pins the reduction order regardless of SIMD width or BLAS threading.
    """
    w = np.ascontiguousarray(values, dtype=np.float64).reshape(-1)
    if w.size == 0:
        return 0.0
    return float(np.bincount(np.zeros(w.size, dtype=np.intp), weights=w, minlength=1)[0])


def _gather(x: Tensor4, group) -> np.ndarray:
    idx = np.asarray(group, dtype=np.intp).reshape(-1)
    if idx.size == 0:
        raise ValueError("empty statistic group")
    return x.flat()[idx]


def reduce_mean(x: Tensor4, group) -> float:
    """Arithmetic mean of x over a group of flat indices.

    Accumulation is sequential in the order the indices are given, in double
    precision, independent of the storage precision.
    """
    vals = _gather(x, group)
    return ordered_sum(vals) / vals.size


def reduce_var(x: Tensor4, group, mean: float) -> float:
    """Biased variance (1/|group|) * sum((x_i - mean)^2) over a group.

    `mean` must be the value reduce_mean returns for the same group.
    """
    vals = _gather(x, group).astype(np.float64)
    d = vals - mean
    return ordered_sum(d * d) / vals.size
