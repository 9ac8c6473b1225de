"""Convolution, activation, linear and loss kernels with explicit backward passes.

Convolutions keep the public NCHW contract but run their im2col + GEMM in
channels-last layout internally; the gather is ~6x cheaper there on CPU.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor4


@dataclass
class ConvCache:
    cols: np.ndarray          # (N*OH*OW, KH*KW*C) channels-last im2col matrix
    x_shape: tuple
    weights: np.ndarray
    stride: int
    pad: int
    out_hw: tuple


def _im2col_nhwc(xp: np.ndarray, kh: int, kw: int, stride: int) -> tuple:
    """im2col on a padded channels-last tensor -> (N*OH*OW, KH*KW*C)."""
    n, hp, wp, c = xp.shape
    if hp < kh or wp < kw:
        raise ValueError(f"kernel ({kh},{kw}) larger than padded input ({hp},{wp})")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]                   # (n, oh, ow, c, kh, kw)
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(
        n * oh * ow, kh * kw * c)
    return cols, (oh, ow)


def _pad_nhwc(x_nchw: np.ndarray, pad: int) -> np.ndarray:
    """Transpose NCHW -> NHWC while writing into the zero-padded buffer."""
    n, c, h, w = x_nchw.shape
    xp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=x_nchw.dtype)
    xp[:, pad:pad + h, pad:pad + w, :] = x_nchw.transpose(0, 2, 3, 1)
    return xp


def conv2d_forward(x: Tensor4, weights: np.ndarray, bias: np.ndarray,
                   stride: int = 1, pad: int = 0):
    """2-D convolution, NCHW layout, weights (F, C, KH, KW)."""
    n, c, h, w = x.shape
    f, cw, kh, kw = weights.shape
    if cw != c:
        raise ValueError(f"weight channels {cw} do not match input channels {c}")
    if bias.shape != (f,):
        raise ValueError(f"bias shape {bias.shape} does not match {f} filters")
    cols, (oh, ow) = _im2col_nhwc(_pad_nhwc(x.data, pad), kh, kw, stride)
    w2 = weights.transpose(2, 3, 1, 0).reshape(kh * kw * c, f)
    out = cols @ w2
    out += bias
    y = np.ascontiguousarray(out.reshape(n, oh, ow, f).transpose(0, 3, 1, 2))
    cache = ConvCache(cols, x.shape, weights, stride, pad, (oh, ow))
    return Tensor4(y), cache


def conv2d_backward(cache: ConvCache, dy: Tensor4, need_dx: bool = True):
    n, c, h, w = cache.x_shape
    f, _, kh, kw = cache.weights.shape
    oh, ow = cache.out_hw
    if dy.shape != (n, f, oh, ow):
        raise ValueError(f"dy shape {dy.shape} does not match conv output ({n},{f},{oh},{ow})")
    dy2 = np.ascontiguousarray(dy.data.transpose(0, 2, 3, 1)).reshape(n * oh * ow, f)
    dweights = np.ascontiguousarray(
        (cache.cols.T @ dy2).reshape(kh, kw, c, f).transpose(3, 2, 0, 1))
    dbias = dy2.sum(axis=0)
    if not need_dx:
        return None, dweights, dbias
    dx = _conv_transpose(dy2.reshape(n, oh, ow, f), cache.weights,
                         cache.stride, cache.pad, (h, w))
    return Tensor4(dx), dweights, dbias


def _conv_transpose(dy_nhwc: np.ndarray, weights: np.ndarray, stride: int,
                    pad: int, in_hw: tuple) -> np.ndarray:
    """dx as a stride-1 correlation of the dilated, re-padded upstream gradient
    with the spatially flipped kernel; one GEMM instead of a strided scatter."""
    n, oh, ow, f = dy_nhwc.shape
    _, c, kh, kw = weights.shape
    h, w = in_hw
    pb_h, pb_w = kh - 1 - pad, kw - 1 - pad
    if pb_h < 0 or pb_w < 0:
        raise ValueError("padding wider than the kernel is not supported")
    extra_h = (h + 2 * pad - kh) % stride
    extra_w = (w + 2 * pad - kw) % stride
    dh = stride * (oh - 1) + 1
    dw = stride * (ow - 1) + 1
    buf = np.zeros((n, dh + 2 * pb_h + extra_h, dw + 2 * pb_w + extra_w, f),
                   dtype=dy_nhwc.dtype)
    buf[:, pb_h:pb_h + dh:stride, pb_w:pb_w + dw:stride, :] = dy_nhwc
    cols, (oh2, ow2) = _im2col_nhwc(buf, kh, kw, 1)
    wrot = np.ascontiguousarray(
        weights.transpose(2, 3, 0, 1)[::-1, ::-1]).reshape(kh * kw * f, c)
    dx2 = cols @ wrot
    return np.ascontiguousarray(dx2.reshape(n, oh2, ow2, c).transpose(0, 3, 1, 2))


def relu_forward(x: Tensor4):
    y = np.maximum(x.data, 0)
    return Tensor4(y), y


def relu_backward(cache: np.ndarray, dy: Tensor4) -> Tensor4:
    if cache.shape != dy.shape:
        raise ValueError(f"relu cache shape {cache.shape} does not match dy {dy.shape}")
    return Tensor4(dy.data * (cache > 0))


def gap_forward(x: Tensor4):
    """Global average pool over the spatial axes, (N,C,H,W) -> (N,C)."""
    y = x.data.mean(axis=(2, 3))
    return y, (x.shape,)


def gap_backward(cache, dy: np.ndarray) -> Tensor4:
    (shape,) = cache
    n, c, h, w = shape
    if dy.shape != (n, c):
        raise ValueError(f"dy shape {dy.shape} does not match pooled ({n},{c})")
    dx = np.broadcast_to(dy[:, :, None, None] / (h * w), shape)
    return Tensor4(dx.astype(dy.dtype))


def linear_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray):
    """Affine map on flattened features: (N, Din) @ (Din, K) + (K,)."""
    if x.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ValueError(f"input {x.shape} does not match weights {weights.shape}")
    logits = x @ weights + bias
    return logits, (x, weights)


def linear_backward(cache, dlogits: np.ndarray):
    x, weights = cache
    if dlogits.shape != (x.shape[0], weights.shape[1]):
        raise ValueError(f"dlogits shape {dlogits.shape} mismatch")
    dweights = x.T @ dlogits
    dbias = dlogits.sum(axis=0)
    dx = dlogits @ weights.T
    return dx, dweights, dbias


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch plus the gradient wrt logits."""
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    expz = np.exp(z)
    denom = expz.sum(axis=1, keepdims=True)
    probs = expz / denom
    nll = np.log(denom[:, 0]) - z[np.arange(n), labels]
    loss = float(nll.mean())
    dlogits = probs
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, dlogits.astype(logits.dtype)
