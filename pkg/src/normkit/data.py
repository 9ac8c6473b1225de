"""Dataset loading: CIFAR-10 binary archives and a synthetic stand-in."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

CIFAR_RECORD_BYTES = 3073            # 1 label byte + 3 * 1024 pixel bytes
CIFAR_BATCH_BYTES = 10000 * CIFAR_RECORD_BYTES


@dataclass
class Dataset:
    """Images (N, 3, H, W) float32, per-channel standardized; integer labels."""

    images: np.ndarray
    labels: np.ndarray
    split: str
    num_classes: int

    @property
    def n(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.images.shape[1:]


def _standardize(train_imgs: np.ndarray, *others: np.ndarray):
    """Per-channel standardization; constants come from the train split only."""
    mean = train_imgs.mean(axis=(0, 2, 3), dtype=np.float64)
    std = train_imgs.std(axis=(0, 2, 3), dtype=np.float64)
    std = np.where(std < 1e-8, 1.0, std)
    m = mean.astype(np.float32)[None, :, None, None]
    s = std.astype(np.float32)[None, :, None, None]
    out = [((a - m) / s).astype(np.float32) for a in (train_imgs, *others)]
    return out


def _read_cifar_file(path: Path):
    raw = path.read_bytes()
    if len(raw) != CIFAR_BATCH_BYTES:
        raise ValueError(f"corrupt batch file: {path} has {len(raw)} bytes, "
                         f"expected {CIFAR_BATCH_BYTES}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def load_cifar10(directory) -> tuple[Dataset, Dataset]:
    """Load the 5+1 binary batch files (3073-byte records, row-major 32x32)."""
    directory = Path(directory)
    train_parts = []
    for i in range(1, 6):
        path = directory / f"data_batch_{i}.bin"
        if not path.exists():
            raise FileNotFoundError(f"missing CIFAR-10 batch file {path}")
        train_parts.append(_read_cifar_file(path))
    test_path = directory / "test_batch.bin"
    if not test_path.exists():
        raise FileNotFoundError(f"missing CIFAR-10 batch file {test_path}")
    test_imgs, test_labels = _read_cifar_file(test_path)

    train_imgs = np.concatenate([p[0] for p in train_parts])
    train_labels = np.concatenate([p[1] for p in train_parts])
    train_imgs, test_imgs = _standardize(train_imgs, test_imgs)
    return (
        Dataset(train_imgs, train_labels, "train", 10),
        Dataset(test_imgs, test_labels, "test", 10),
    )


def make_synthetic(classes: int, per_class: int, shape=(3, 16, 16), seed: int = 0,
                   difficulty: float = 1.0, test_per_class: int | None = None,
                   contrast: float = 0.5) -> tuple[Dataset, Dataset]:
    """Class-template images: template[k] + difficulty * Gaussian pixel noise.

    Each image's noise is additionally scaled by a per-sample log-normal
    contrast gain (sigma = `contrast`), standing in for the exposure and
    contrast variation of real photographs; without it, batch statistics are
    nearly content-independent and small-batch effects vanish. Deterministic
    per seed. difficulty 0 gives noiseless templates (linearly separable).
    """
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if test_per_class is None:
        test_per_class = max(1, per_class // 5)
    rng = np.random.default_rng(seed)
    templates = rng.standard_normal((classes, *shape))

    def draw(count):
        imgs = np.empty((classes * count, *shape), dtype=np.float32)
        labels = np.empty(classes * count, dtype=np.int64)
        for k in range(classes):
            noise = rng.standard_normal((count, *shape))
            gain = np.exp(contrast * rng.standard_normal(count) - 0.5 * contrast ** 2)
            imgs[k * count:(k + 1) * count] = \
                templates[k] + difficulty * gain[:, None, None, None] * noise
            labels[k * count:(k + 1) * count] = k
        return imgs, labels

    train_imgs, train_labels = draw(per_class)
    test_imgs, test_labels = draw(test_per_class)
    train_imgs, test_imgs = _standardize(train_imgs, test_imgs)
    return (
        Dataset(train_imgs, train_labels, "train", classes),
        Dataset(test_imgs, test_labels, "test", classes),
    )


def class_balanced_subset(ds: Dataset, per_class: int, seed: int = 0) -> Dataset:
    """Seeded class-balanced subset, preserving the standardized pixels."""
    rng = np.random.default_rng(seed)
    picks = []
    for k in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == k)
        if len(idx) < per_class:
            raise ValueError(f"class {k} has only {len(idx)} samples, need {per_class}")
        picks.append(rng.choice(idx, size=per_class, replace=False))
    sel = np.sort(np.concatenate(picks))
    return Dataset(ds.images[sel].copy(), ds.labels[sel].copy(), ds.split, ds.num_classes)
