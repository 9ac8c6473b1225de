"""Six feature-map normalizers expressed as one kernel over statistic partitions.

Every normalizer is "pick a partition of the (N, C, H, W) index set, compute a
(mean, variance) pair per group, normalize, then re-scale/re-shift per channel".
The kinds differ only in how the partition is built:

    bn   one group per channel, spanning batch and space
    in   one group per (sample, channel)
    ln   one group per sample
    gn   one group per (sample, channel block), block size C // G
    pn   one group per (sample, spatial position)
    bgn  the merged per-sample dimension D = C*H*W is cut into G contiguous
         blocks shared by the whole batch; statistics span batch and block

Group statistics are always accumulated in float64 in a fixed element order
(single-pass np.bincount over flat storage), so results are reproducible
bit-for-bit regardless of storage precision.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .tensor import Tensor4

KINDS = ("bn", "in", "ln", "gn", "pn", "bgn")
GROUPED_KINDS = ("gn", "bgn")
BATCH_COUPLED_KINDS = ("bn", "bgn")

# Published (batch size -> G) schedule for bgn, interpolated geometrically
# between the listed points.
_BGN_SCHEDULE = ((2, 1), (4, 2), (8, 16), (16, 64), (32, 128), (64, 256), (128, 512))
_GN_DEFAULT_GROUPS = 32


class NonFiniteError(ValueError):
    """Raised when a normalizer sees non-finite activations."""


@dataclass(frozen=True)
class NormKind:
    """Normalizer selector: kind name plus group count (gn/bgn only)."""

    name: str
    groups: int = 1

    def __post_init__(self):
        if self.name not in KINDS:
            raise ValueError(f"unknown normalizer {self.name!r}, expected one of {KINDS}")
        if self.groups < 1:
            raise ValueError("group count must be >= 1")

    def __str__(self) -> str:
        if self.name in GROUPED_KINDS:
            return f"{self.name}[G={self.groups}]"
        return self.name


class StatPartition:
    """A partition of the flat (N,C,H,W) index set into statistic groups.

    `ids[i]` is the group ordinal of flat element i; `keys[g]` is the stable
    key of group g ((c,) for bn, (n, c) for in, (n,) for ln, (n, g) for gn,
    (n, h, w) for pn, (g,) for bgn).

    When every group is a regular block of the flat layout (always, except
    gn/bgn with a remainder group), `fast` holds a (view_shape, reduce_axes,
    bcast_shape) descriptor: reshaping the flat buffer to view_shape and
    summing over reduce_axes yields one value per group in ordinal order.
    The generic element-wise path via `ids` stays the reference.
    """

    __slots__ = ("kind", "shape", "ids", "n_groups", "sizes", "sizes_f", "keys", "fast")

    def __init__(self, kind: NormKind, shape, ids: np.ndarray, n_groups: int,
                 keys, fast=None):
        self.kind = kind
        self.shape = tuple(shape)
        self.ids = ids
        self.n_groups = n_groups
        self.keys = keys
        self.fast = fast
        self.sizes = np.bincount(ids, minlength=n_groups)
        self.sizes_f = self.sizes.astype(np.float64)

    def groups(self) -> list[np.ndarray]:
        """Flat-index array per group, elements in storage order (audit path)."""
        order = np.argsort(self.ids, kind="stable")
        bounds = np.cumsum(self.sizes)[:-1]
        return np.split(order, bounds)

    def generic_clone(self) -> "StatPartition":
        """Copy that always takes the element-wise reference path."""
        return StatPartition(self.kind, self.shape, self.ids, self.n_groups,
                             self.keys, fast=None)


def _block_of(count: int, groups: int) -> np.ndarray:
    """Map positions 0..count-1 to contiguous blocks; the last block absorbs
    the remainder when groups does not divide count."""
    block = count // groups
    return np.minimum(np.arange(count, dtype=np.intp) // block, groups - 1)


@lru_cache(maxsize=128)
def _build_partition_cached(name: str, groups: int, shape: tuple) -> StatPartition:
    kind = NormKind(name, groups)
    n, c, h, w = shape
    d = c * h * w
    hw = h * w
    fast = None
    if name == "bn":
        ids4 = np.broadcast_to(np.arange(c, dtype=np.intp)[None, :, None, None], shape)
        n_groups = c
        keys = [(cc,) for cc in range(c)]
        fast = ((n, c, hw), (0, 2), (1, c, 1))
    elif name == "in":
        per = (np.arange(n, dtype=np.intp)[:, None] * c + np.arange(c, dtype=np.intp)[None, :])
        ids4 = np.broadcast_to(per[:, :, None, None], shape)
        n_groups = n * c
        keys = [(nn, cc) for nn in range(n) for cc in range(c)]
        fast = ((n * c, hw, 1), (1, 2), (n * c, 1, 1))
    elif name == "ln":
        ids4 = np.broadcast_to(np.arange(n, dtype=np.intp)[:, None, None, None], shape)
        n_groups = n
        keys = [(nn,) for nn in range(n)]
        fast = ((n, d, 1), (1, 2), (n, 1, 1))
    elif name == "gn":
        if groups > c:
            raise ValueError("group count exceeds dimension")
        block = _block_of(c, groups)
        per = np.arange(n, dtype=np.intp)[:, None] * groups + block[None, :]
        ids4 = np.broadcast_to(per[:, :, None, None], shape)
        n_groups = n * groups
        keys = [(nn, gg) for nn in range(n) for gg in range(groups)]
        if c % groups == 0:
            fast = ((n * groups, (c // groups) * hw, 1), (1, 2), (n * groups, 1, 1))
    elif name == "pn":
        pos = np.arange(hw, dtype=np.intp).reshape(h, w)
        per = np.arange(n, dtype=np.intp)[:, None, None] * hw + pos[None, :, :]
        ids4 = np.broadcast_to(per[:, None, :, :], shape)
        n_groups = n * hw
        keys = [(nn, hh, ww) for nn in range(n) for hh in range(h) for ww in range(w)]
        fast = ((n, c, hw), (1,), (n, 1, hw))
    elif name == "bgn":
        if groups > d:
            raise ValueError("group count exceeds dimension")
        block = _block_of(d, groups).reshape(c, h, w)
        ids4 = np.broadcast_to(block[None, :, :, :], shape)
        n_groups = groups
        keys = [(gg,) for gg in range(groups)]
        if d % groups == 0:
            fast = ((n, groups, d // groups), (0, 2), (1, groups, 1))
    else:  # pragma: no cover - guarded by NormKind
        raise ValueError(name)
    ids = np.ascontiguousarray(ids4).reshape(-1)
    return StatPartition(kind, shape, ids, n_groups, keys, fast)


def build_partition(kind: NormKind, shape) -> StatPartition:
    n, c, h, w = shape
    if min(n, c, h, w) < 1:
        raise ValueError(f"all dimensions must be >= 1, got {shape}")
    return _build_partition_cached(kind.name, kind.groups, (n, c, h, w))


@dataclass
class NormParams:
    """Per-channel affine parameters; length C for every normalizer kind."""

    gamma: np.ndarray
    beta: np.ndarray
    dgamma: np.ndarray
    dbeta: np.ndarray

    @classmethod
    def init(cls, channels: int) -> "NormParams":
        return cls(
            gamma=np.ones(channels, dtype=np.float64),
            beta=np.zeros(channels, dtype=np.float64),
            dgamma=np.zeros(channels, dtype=np.float64),
            dbeta=np.zeros(channels, dtype=np.float64),
        )


@dataclass(frozen=True)
class RunningStats:
    """Exponential moving averages of group statistics for inference.

    One slot per channel for bn, one per group for bgn. Training replaces the
    whole vector pair atomically; inference only reads.
    """

    means: np.ndarray
    vars: np.ndarray
    momentum: float = 0.1

    @classmethod
    def fresh(cls, slots: int, momentum: float = 0.1) -> "RunningStats":
        if not 0.0 < momentum <= 1.0:
            raise ValueError("momentum must be in (0, 1]")
        return cls(np.zeros(slots, dtype=np.float64), np.ones(slots, dtype=np.float64), momentum)


@dataclass
class NormCache:
    """Everything the backward pass needs from a train-mode forward."""

    part: StatPartition
    xhat: np.ndarray          # flat, storage dtype
    mu: np.ndarray            # per group, float64
    var: np.ndarray           # per group, float64
    inv_std: np.ndarray       # per group, float64
    eps: float
    train: bool


def _group_stats(flat: np.ndarray, part: StatPartition):
    """Per-group mean and biased variance; group accumulation is in float64,
    elementwise arithmetic stays in storage precision."""
    if part.fast is not None:
        view, axes, bshape = part.fast
        k = part.sizes_f[0]
        x3 = flat.reshape(view)
        mu = x3.sum(axis=axes, dtype=np.float64).reshape(-1) / k
        centered = x3 - mu.astype(flat.dtype, copy=False).reshape(bshape)
        var = (centered * centered).sum(axis=axes, dtype=np.float64).reshape(-1) / k
        return mu, var, centered.reshape(-1)
    sums = np.bincount(part.ids, weights=flat, minlength=part.n_groups)
    mu = sums / part.sizes_f
    centered = flat - mu.astype(flat.dtype, copy=False)[part.ids]
    var = np.bincount(part.ids, weights=centered * centered, minlength=part.n_groups) / part.sizes_f
    return mu, var, centered


def norm_forward(x: Tensor4, part: StatPartition, params: NormParams,
                 running: RunningStats | None = None, mode: str = "train",
                 eps: float = 1e-5):
    """Normalize x group-wise and apply the per-channel affine map.

    Train mode always takes statistics from the current batch. In inference
    mode bn/bgn substitute running statistics; the other kinds recompute from
    the input since their groups never span the batch.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    if x.shape != part.shape:
        raise ValueError(f"input shape {x.shape} does not match partition {part.shape}")
    n, c, h, w = x.shape
    if params.gamma.shape != (c,) or params.beta.shape != (c,):
        raise ValueError(f"affine parameters must have length {c}")

    name = part.kind.name
    dt = x.dtype
    flat = x.flat()

    if mode == "infer" and name in BATCH_COUPLED_KINDS:
        if running is None or len(running.means) != part.n_groups:
            raise ValueError("running-stat shape mismatch")
        mu, var = running.means, running.vars
        inv_std = 1.0 / np.sqrt(var + eps)
        if part.fast is not None:
            view, _, bshape = part.fast
            xhat = ((flat.reshape(view) - mu.astype(dt).reshape(bshape))
                    * inv_std.astype(dt).reshape(bshape)).reshape(-1)
        else:
            xhat = (flat - mu.astype(dt)[part.ids]) * inv_std.astype(dt)[part.ids]
        if not np.isfinite(xhat).all():
            raise NonFiniteError("non-finite activation")
    else:
        mu, var, centered = _group_stats(flat, part)
        if not (np.isfinite(mu).all() and np.isfinite(var).all()):
            raise NonFiniteError("non-finite activation")
        inv_std = 1.0 / np.sqrt(var + eps)
        if part.fast is not None:
            view, _, bshape = part.fast
            xhat = (centered.reshape(view)
                    * inv_std.astype(dt, copy=False).reshape(bshape)).reshape(-1)
        else:
            xhat = centered * inv_std.astype(dt, copy=False)[part.ids]

    y4 = xhat.reshape(x.shape) * params.gamma.astype(dt)[None, :, None, None] \
        + params.beta.astype(dt)[None, :, None, None]
    cache = NormCache(part, xhat, mu, var, inv_std, eps, train=(mode == "train"))
    return Tensor4(y4), cache


def norm_backward(dy: Tensor4, cache: NormCache, params: NormParams,
                  mutation: str | None = None):
    """Exact gradients of the normalization layer.

    For each statistic group of size K with dxhat = dy * gamma:
        dx = inv_std * (dxhat - mean_g(dxhat) - xhat * mean_g(dxhat * xhat))
    dgamma/dbeta accumulate per channel for every kind. `mutation` plants a
    known defect (gradcheck must catch it): 'drop-dmu' removes the mean term,
    'drop-dvar' the variance term, 'wrong-size' miscounts K.
    """
    part = cache.part
    if not cache.train:
        raise ValueError("backward requires a cache from a train-mode forward")
    if dy.shape != part.shape:
        raise ValueError(f"dy shape {dy.shape} does not match cache shape {part.shape}")
    if mutation not in (None, "drop-dmu", "drop-dvar", "wrong-size"):
        raise ValueError(f"unknown mutation {mutation!r}")
    n, c, h, w = part.shape
    dt = dy.dtype
    dyf = dy.flat()
    xhat = cache.xhat

    dbeta = dy.data.sum(axis=(0, 2, 3), dtype=np.float64)
    dgamma = (dyf * xhat).reshape(n, c, h * w).sum(axis=(0, 2), dtype=np.float64)

    dxhat = (dy.data * params.gamma.astype(dt)[None, :, None, None]).reshape(-1)
    if part.fast is not None:
        view, axes, bshape = part.fast
        k = part.sizes_f[0] + (1.0 if mutation == "wrong-size" else 0.0)
        dxhat3 = dxhat.reshape(view)
        xhat3 = xhat.reshape(view)
        mean1 = dxhat3.sum(axis=axes, dtype=np.float64).reshape(-1) / k
        mean2 = (dxhat3 * xhat3).sum(axis=axes, dtype=np.float64).reshape(-1) / k
        if mutation == "drop-dmu":
            mean1 = np.zeros_like(mean1)
        if mutation == "drop-dvar":
            mean2 = np.zeros_like(mean2)
        # dx = inv_std * (dxhat - mean1 - xhat * mean2)
        dx = cache.inv_std.astype(dt, copy=False).reshape(bshape) * dxhat3
        dx -= (cache.inv_std * mean1).astype(dt, copy=False).reshape(bshape)
        dx -= xhat3 * (cache.inv_std * mean2).astype(dt, copy=False).reshape(bshape)
        return Tensor4(dx.reshape(part.shape)), dgamma, dbeta

    sizes = part.sizes_f
    if mutation == "wrong-size":
        sizes = sizes + 1.0
    mean1 = np.bincount(part.ids, weights=dxhat, minlength=part.n_groups) / sizes
    mean2 = np.bincount(part.ids, weights=dxhat * xhat, minlength=part.n_groups) / sizes
    if mutation == "drop-dmu":
        mean1 = np.zeros_like(mean1)
    if mutation == "drop-dvar":
        mean2 = np.zeros_like(mean2)

    # dx = inv_std * (dxhat - mean1 - xhat * mean2), with the per-group factors
    # folded before the gather.
    shift = (cache.inv_std * mean1).astype(dt, copy=False)
    scale2 = (cache.inv_std * mean2).astype(dt, copy=False)
    dx = cache.inv_std.astype(dt, copy=False)[part.ids] * dxhat
    dx -= shift[part.ids]
    dx -= xhat * scale2[part.ids]
    return Tensor4(dx.reshape(part.shape)), dgamma, dbeta


def update_running(running: RunningStats, cache: NormCache) -> RunningStats:
    """Fold one batch's group statistics into the moving averages."""
    if cache.part.kind.name not in BATCH_COUPLED_KINDS:
        raise ValueError("running statistics are kept only for bn/bgn")
    if not cache.train:
        raise ValueError("running statistics update requires a train-mode cache")
    if len(running.means) != cache.part.n_groups:
        raise ValueError("running-stat shape mismatch")
    m = running.momentum
    return replace(
        running,
        means=(1.0 - m) * running.means + m * cache.mu,
        vars=(1.0 - m) * running.vars + m * cache.var,
    )


def merge_shard_caches(caches: list[NormCache]) -> NormCache:
    """Unweighted mean of per-shard group statistics, for the running update."""
    first = caches[0]
    if len(caches) == 1:
        return first
    mu = np.mean([cc.mu for cc in caches], axis=0)
    var = np.mean([cc.var for cc in caches], axis=0)
    return replace(first, mu=mu, var=var)


def select_group_count(kind: NormKind | str, batch_size: int, limit: int | None = None) -> int:
    """Group count for a given per-worker batch size.

    bgn follows the published schedule with geometric interpolation at
    unlisted sizes (rounded to the nearest power of two); gn defaults to 32;
    everything else has a single group per key. `limit` clamps to the size of
    the grouped dimension when the caller knows it (C for gn, D for bgn).
    """
    name = kind.name if isinstance(kind, NormKind) else kind
    if name not in KINDS:
        raise ValueError(f"unknown normalizer {name!r}")
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    if name == "gn":
        g = _GN_DEFAULT_GROUPS
    elif name == "bgn":
        xs = np.log2([b for b, _ in _BGN_SCHEDULE])
        es = np.log2([g for _, g in _BGN_SCHEDULE])
        e = float(np.interp(np.log2(batch_size), xs, es))
        g = int(2 ** round(e))
    else:
        g = 1
    g = max(1, g)
    if limit is not None:
        g = min(g, limit)
    return g
