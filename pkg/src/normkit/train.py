"""SGD trainer with per-shard normalization statistics and shared gradients."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from statistics import median

import numpy as np

from .data import Dataset
from .model import ConvNet, ConvNetSpec
from .normalizers import NonFiniteError, merge_shard_caches, update_running
from .ops import softmax_cross_entropy
from .tensor import Tensor4

# 0.4 at batch 128 scaled linearly down to 0.00625 at batch 2.
LR_PER_SAMPLE = 0.4 / 128

# Evaluation always runs in fixed-size chunks so per-sample logits do not
# depend on how the caller batches the data (BLAS kernels are not bitwise
# row-stable across different matrix heights).
EVAL_CHUNK = 50


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 20
    lr: float | str = "auto"
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    worker_shards: int = 1
    precision: str = "single"      # "single" | "double"
    running_momentum: float = 0.1
    lr_decay: float = 0.1
    milestone_fracs: tuple = (0.25, 0.5, 0.75)
    eval_batch: int = 250

    def resolved_lr(self) -> float:
        if self.lr == "auto":
            return LR_PER_SAMPLE * self.batch_size
        return float(self.lr)

    def milestones(self) -> list[int]:
        return sorted({max(1, round(f * self.epochs)) for f in self.milestone_fracs})


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float
    wall_time_s: float


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    status: str = "ok"
    error: str | None = None

    @property
    def final_accuracy(self) -> float | None:
        """Median test accuracy of the last five epochs (all, if fewer)."""
        if not self.epochs:
            return None
        tail = [r.test_acc for r in self.epochs[-5:]]
        return float(median(tail))


def _split_shards(index_block: np.ndarray, shards: int) -> list[np.ndarray]:
    """Contiguous equal shards of a batch's sample indices."""
    size = len(index_block) // shards
    return [index_block[i * size:(i + 1) * size] for i in range(shards)]


def _train_step(model: ConvNet, images: np.ndarray, labels: np.ndarray,
                shards: int):
    """One optimization step: per-shard statistics, shard-averaged gradients."""
    batch = len(labels)
    grad_sum: dict[str, np.ndarray] = {}
    shard_norm_caches: list[list] = []
    loss_sum = 0.0
    correct = 0
    bounds = [(s * (batch // shards), (s + 1) * (batch // shards)) for s in range(shards)]
    for lo, hi in bounds:
        xb = Tensor4(images[lo:hi])
        yb = labels[lo:hi]
        logits, cache = model.forward(xb, mode="train")
        loss, dlogits = softmax_cross_entropy(logits, yb)
        grads = model.backward(cache, dlogits)
        loss_sum += loss
        correct += int((logits.argmax(axis=1) == yb).sum())
        shard_norm_caches.append(cache.norms)
        for name, g in grads.items():
            if name in grad_sum:
                grad_sum[name] += g
            else:
                grad_sum[name] = g
    if shards > 1:
        for g in grad_sum.values():
            g /= shards
    return loss_sum / shards, correct, grad_sum, shard_norm_caches


def _sgd_update(model: ConvNet, grads: dict, velocity: dict, lr: float,
                momentum: float, weight_decay: float) -> None:
    with np.errstate(over="ignore", invalid="ignore"):
        for name in model.param_names():
            p = model.get_param(name)
            g = grads[name].astype(p.dtype, copy=False).reshape(p.shape)
            v = velocity[name]
            v *= momentum
            v += g
            v += weight_decay * p
            p -= lr * v


def train(spec: ConvNetSpec, train_ds: Dataset, test_ds: Dataset,
          cfg: TrainConfig) -> tuple[ConvNet, TrainHistory]:
    """Train the CNN; deterministic given the seed.

    The batch is split into `worker_shards` equal shards whose normalization
    statistics stay local; parameter gradients are averaged across shards
    before the SGD step, and running statistics take the unweighted mean of
    the shard statistics.
    """
    if cfg.batch_size < cfg.worker_shards or cfg.batch_size % cfg.worker_shards:
        raise ValueError("batch size must be divisible by worker_shards")
    if cfg.precision not in ("single", "double"):
        raise ValueError(f"unknown precision {cfg.precision!r}")
    dtype = np.float32 if cfg.precision == "single" else np.float64
    model = ConvNet(spec, dtype=dtype, seed=cfg.seed,
                    running_momentum=cfg.running_momentum)
    history = TrainHistory()
    if cfg.epochs == 0:
        return model, history

    rng = np.random.default_rng(cfg.seed)
    velocity = {name: np.zeros_like(model.get_param(name)) for name in model.param_names()}
    base_lr = cfg.resolved_lr()
    milestones = cfg.milestones()
    images = train_ds.images.astype(dtype, copy=False)
    labels = train_ds.labels
    steps_per_epoch = train_ds.n // cfg.batch_size
    if steps_per_epoch == 0:
        raise ValueError("dataset smaller than one batch")

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        lr = base_lr * cfg.lr_decay ** sum(epoch >= m for m in milestones)
        perm = rng.permutation(train_ds.n)
        loss_total = 0.0
        correct_total = 0
        seen = 0
        for step in range(steps_per_epoch):
            idx = perm[step * cfg.batch_size:(step + 1) * cfg.batch_size]
            try:
                # divergence surfaces as NonFiniteError / non-finite loss;
                # the low-level overflow warnings on the way there are noise
                with np.errstate(over="ignore", invalid="ignore"):
                    loss, correct, grads, shard_caches = _train_step(
                        model, images[idx], labels[idx], cfg.worker_shards)
            except NonFiniteError as exc:
                history.status = "diverged"
                history.error = f"{exc} at epoch {epoch} step {step}"
                return model, history
            if not np.isfinite(loss):
                history.status = "diverged"
                history.error = f"non-finite loss at epoch {epoch} step {step}"
                return model, history
            for li, blk in enumerate(model.blocks):
                if blk.running is not None:
                    merged = merge_shard_caches([sc[li] for sc in shard_caches])
                    blk.running = update_running(blk.running, merged)
            _sgd_update(model, grads, velocity, lr, cfg.momentum, cfg.weight_decay)
            loss_total += loss * cfg.batch_size
            correct_total += correct
            seen += cfg.batch_size
        test_acc = evaluate(model, test_ds, cfg.eval_batch)
        history.epochs.append(EpochRecord(
            epoch=epoch,
            train_loss=loss_total / seen,
            train_acc=correct_total / seen,
            test_acc=test_acc,
            wall_time_s=time.perf_counter() - t0,
        ))
    return model, history


def evaluate(model: ConvNet, data: Dataset, batch_size: int = EVAL_CHUNK) -> float:
    """Fraction of argmax-correct predictions in inference mode.

    Logits are computed in canonical fixed-size chunks, so the result is
    bitwise independent of `batch_size`; the argument is kept for interface
    compatibility and validated only.
    """
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    correct = 0
    for lo in range(0, data.n, EVAL_CHUNK):
        hi = min(lo + EVAL_CHUNK, data.n)
        xb = Tensor4(data.images[lo:hi].astype(model.dtype, copy=False))
        logits, _ = model.forward(xb, mode="infer")
        correct += int((logits.argmax(axis=1) == data.labels[lo:hi]).sum())
    return correct / data.n
