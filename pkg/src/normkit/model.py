"""Small configurable CNN with swappable normalization layers, plus checkpoint IO."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .normalizers import (
    BATCH_COUPLED_KINDS,
    NormKind,
    NormParams,
    RunningStats,
    build_partition,
    norm_forward,
)
from .tensor import Tensor4

CHECKPOINT_MAGIC = b"NRMK1"
_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


@dataclass(frozen=True)
class ConvNetSpec:
    """Architecture description: stages of conv->norm->relu blocks.

    Every block is a 3x3 convolution followed by normalization and relu;
    the first block of each stage after the first downsamples with stride 2.
    """

    stages: tuple = ((16, 2), (32, 2), (64, 2))
    norm: NormKind = field(default_factory=lambda: NormKind("bn"))
    num_classes: int = 10
    input_shape: tuple = (3, 32, 32)
    kernel: int = 3
    eps: float = 1e-5


class _Block:
    __slots__ = ("w", "b", "params", "running", "stride", "kind", "out_hw")

    def __init__(self, w, b, params, running, stride, kind, out_hw):
        self.w = w
        self.b = b
        self.params = params
        self.running = running
        self.stride = stride
        self.kind = kind
        self.out_hw = out_hw


@dataclass
class StepCache:
    convs: list
    norms: list
    relus: list
    gap: tuple
    linear: tuple


class ConvNet:
    """conv -> norm -> relu stacks, global average pool, linear classifier.

    Group counts are clamped per layer: gn to the layer's channel count,
    bgn to the layer's merged dimension D = C*H*W.
    """

    def __init__(self, spec: ConvNetSpec, dtype=np.float32, seed: int = 0,
                 running_momentum: float = 0.1):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        cin, h, w = spec.input_shape
        k = spec.kernel
        pad = k // 2
        self.pad = pad
        self.blocks: list[_Block] = []
        for si, (cout, nblocks) in enumerate(spec.stages):
            for bi in range(nblocks):
                stride = 2 if (si > 0 and bi == 0) else 1
                h = (h + 2 * pad - k) // stride + 1
                w = (w + 2 * pad - k) // stride + 1
                fan_in = cin * k * k
                wts = (rng.standard_normal((cout, cin, k, k)) *
                       np.sqrt(2.0 / fan_in)).astype(self.dtype)
                bias = np.zeros(cout, dtype=self.dtype)
                kind = self._layer_kind(spec.norm, cout, cout * h * w)
                running = None
                if kind.name in BATCH_COUPLED_KINDS:
                    slots = cout if kind.name == "bn" else kind.groups
                    running = RunningStats.fresh(slots, running_momentum)
                self.blocks.append(_Block(wts, bias, NormParams.init(cout),
                                          running, stride, kind, (h, w)))
                cin = cout
        feat = cin
        self.fc_w = (rng.standard_normal((feat, spec.num_classes)) *
                     np.sqrt(2.0 / feat)).astype(self.dtype)
        self.fc_b = np.zeros(spec.num_classes, dtype=self.dtype)

    @staticmethod
    def _layer_kind(kind: NormKind, channels: int, merged_dim: int) -> NormKind:
        if kind.name == "gn":
            return NormKind("gn", min(kind.groups, channels))
        if kind.name == "bgn":
            return NormKind("bgn", min(kind.groups, merged_dim))
        return NormKind(kind.name, 1)

    # --- parameter access -------------------------------------------------

    def param_names(self) -> list[str]:
        names = []
        for i in range(len(self.blocks)):
            names += [f"block{i}.conv.w", f"block{i}.conv.b",
                      f"block{i}.norm.gamma", f"block{i}.norm.beta"]
        names += ["fc.w", "fc.b"]
        return names

    def get_param(self, name: str) -> np.ndarray:
        if name == "fc.w":
            return self.fc_w
        if name == "fc.b":
            return self.fc_b
        idx, kindname, leaf = name.split(".")
        blk = self.blocks[int(idx.removeprefix("block"))]
        if kindname == "conv":
            return blk.w if leaf == "w" else blk.b
        return blk.params.gamma if leaf == "gamma" else blk.params.beta

    def set_param(self, name: str, value: np.ndarray) -> None:
        target = self.get_param(name)
        if target.size != value.size:
            raise ValueError(f"size mismatch for {name}: {value.size} vs {target.size}")
        target[...] = value.reshape(target.shape)

    # --- forward / backward -----------------------------------------------

    def forward(self, x: Tensor4, mode: str = "train"):
        convs, norms, relus = [], [], []
        a = x
        for blk in self.blocks:
            a, ccache = ops.conv2d_forward(a, blk.w, blk.b, stride=blk.stride, pad=self.pad)
            part = build_partition(blk.kind, a.shape)
            a, ncache = norm_forward(a, part, blk.params, blk.running,
                                     mode=mode, eps=self.spec.eps)
            a, rcache = ops.relu_forward(a)
            convs.append(ccache)
            norms.append(ncache)
            relus.append(rcache)
        pooled, gcache = ops.gap_forward(a)
        logits, lcache = ops.linear_forward(pooled, self.fc_w, self.fc_b)
        return logits, StepCache(convs, norms, relus, gcache, lcache)

    def backward(self, cache: StepCache, dlogits: np.ndarray) -> dict:
        from .normalizers import norm_backward

        grads = {}
        dpooled, dfc_w, dfc_b = ops.linear_backward(cache.linear, dlogits)
        grads["fc.w"] = dfc_w
        grads["fc.b"] = dfc_b
        da = ops.gap_backward(cache.gap, dpooled)
        for i in reversed(range(len(self.blocks))):
            blk = self.blocks[i]
            da = ops.relu_backward(cache.relus[i], da)
            da, dgamma, dbeta = norm_backward(da, cache.norms[i], blk.params)
            da, dw, db = ops.conv2d_backward(cache.convs[i], da, need_dx=(i > 0))
            grads[f"block{i}.norm.gamma"] = dgamma
            grads[f"block{i}.norm.beta"] = dbeta
            grads[f"block{i}.conv.w"] = dw
            grads[f"block{i}.conv.b"] = db
        return grads

    # --- state ------------------------------------------------------------

    def state_tensors(self) -> list[tuple[str, np.ndarray]]:
        out = [(name, self.get_param(name)) for name in self.param_names()]
        for i, blk in enumerate(self.blocks):
            if blk.running is not None:
                out.append((f"block{i}.running.means", blk.running.means))
                out.append((f"block{i}.running.vars", blk.running.vars))
        return out

    def load_state(self, state: dict) -> None:
        for name in self.param_names():
            if name not in state:
                raise ValueError(f"checkpoint is missing tensor {name!r}")
            self.set_param(name, state[name].astype(self.get_param(name).dtype))
        for i, blk in enumerate(self.blocks):
            if blk.running is None:
                continue
            means = state.get(f"block{i}.running.means")
            variances = state.get(f"block{i}.running.vars")
            if means is None or variances is None:
                raise ValueError(f"checkpoint is missing running stats for block {i}")
            if means.size != len(blk.running.means):
                raise ValueError("running-stat shape mismatch")
            blk.running = RunningStats(
                means.reshape(-1).astype(np.float64),
                variances.reshape(-1).astype(np.float64),
                blk.running.momentum,
            )


def save_checkpoint(path, tensors: list[tuple[str, np.ndarray]]) -> None:
    """Versioned binary: magic, u32 tensor count, then per tensor
    (u32 name length, name bytes, u8 dtype tag, 4 x u32 dims, raw LE data)."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            arr = np.ascontiguousarray(arr)
            if arr.dtype not in _TAG_OF:
                arr = arr.astype(np.float64)
            dims = list(arr.shape) + [1] * (4 - arr.ndim)
            if len(dims) > 4:
                raise ValueError(f"tensor {name!r} has more than 4 dims")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", _TAG_OF[arr.dtype]))
            fh.write(struct.pack("<4I", *dims))
            fh.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        (count,) = struct.unpack("<I", fh.read(4))
        state = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", fh.read(4))
            name = fh.read(nlen).decode("utf-8")
            (tag,) = struct.unpack("<B", fh.read(1))
            if tag not in _DTYPE_TAGS:
                raise ValueError(f"unknown dtype tag {tag}")
            dims = struct.unpack("<4I", fh.read(16))
            dtype = _DTYPE_TAGS[tag]
            n = int(np.prod(dims))
            buf = fh.read(n * dtype.itemsize)
            if len(buf) != n * dtype.itemsize:
                raise ValueError("truncated checkpoint")
            state[name] = np.frombuffer(buf, dtype=dtype).reshape(dims).copy()
    return state
