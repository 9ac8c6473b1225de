"""Batch-size x group-count x normalizer sweeps with resumable CSV output."""

from __future__ import annotations

import csv
import hashlib
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, class_balanced_subset, load_cifar10, make_synthetic
from .model import ConvNetSpec
from .normalizers import GROUPED_KINDS, KINDS, NormKind, select_group_count
from .train import TrainConfig, train

log = logging.getLogger("normkit.sweep")

CSV_COLUMNS = ["run_id", "normalizer", "batch_size", "group_count", "worker_shards",
               "seed", "epoch", "train_loss", "train_acc", "test_acc",
               "wall_time_s", "status"]

# Desk-scale synthetic defaults standing in for the CIFAR-10 subset when the
# archive is not on disk: 10 classes, 5000 train / 1000 test, 16x16 images.
SYNTHETIC_CLASSES = 10
SYNTHETIC_TRAIN_PER_CLASS = 500
SYNTHETIC_TEST_PER_CLASS = 100
SYNTHETIC_SHAPE = (3, 16, 16)
SYNTHETIC_SEED = 1337
SYNTHETIC_DIFFICULTY = 8.0

CIFAR_TRAIN_PER_CLASS = 500
CIFAR_TEST_PER_CLASS = 100
SUBSET_SEED = 7


@dataclass
class SweepSpec:
    normalizers: list[str] = field(default_factory=lambda: ["bn", "bgn"])
    batch_sizes: list[int] = field(default_factory=lambda: [64, 2])
    group_counts: list = field(default_factory=lambda: ["auto"])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    epochs: int = 20
    dataset: str = "synthetic"
    subset: int | None = None          # total train images (class-balanced)
    difficulty: float = SYNTHETIC_DIFFICULTY
    worker_shards: int = 1
    precision: str = "single"
    lr: float | str = "auto"
    out: str = "sweep.csv"

    def __post_init__(self):
        for name in self.normalizers:
            if name not in KINDS:
                raise ValueError(f"unknown normalizer {name!r}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


_dataset_cache: dict = {}


def load_sweep_dataset(spec: SweepSpec) -> tuple[Dataset, Dataset]:
    """Dataset named by the spec: 'synthetic' or 'cifar10:<dir>'."""
    key = (spec.dataset, spec.subset, spec.difficulty)
    if key in _dataset_cache:
        return _dataset_cache[key]
    if spec.dataset == "synthetic":
        per_class = (spec.subset // SYNTHETIC_CLASSES if spec.subset
                     else SYNTHETIC_TRAIN_PER_CLASS)
        train_ds, test_ds = make_synthetic(
            SYNTHETIC_CLASSES, per_class, shape=SYNTHETIC_SHAPE,
            seed=SYNTHETIC_SEED, difficulty=spec.difficulty,
            test_per_class=SYNTHETIC_TEST_PER_CLASS)
    elif spec.dataset.startswith("cifar10:"):
        directory = spec.dataset.split(":", 1)[1]
        full_train, full_test = load_cifar10(directory)
        per_class = (spec.subset // 10 if spec.subset else CIFAR_TRAIN_PER_CLASS)
        train_ds = class_balanced_subset(full_train, per_class, seed=SUBSET_SEED)
        test_ds = class_balanced_subset(full_test, CIFAR_TEST_PER_CLASS, seed=SUBSET_SEED)
    else:
        raise ValueError(f"unknown dataset selector {spec.dataset!r}")
    _dataset_cache[key] = (train_ds, test_ds)
    return _dataset_cache[key]


def _model_dims(input_shape):
    """(min channel count, min merged dimension) across the conv stack."""
    from .model import ConvNet

    probe = ConvNet(ConvNetSpec(norm=NormKind("ln"), input_shape=input_shape))
    min_c = min(blk.w.shape[0] for blk in probe.blocks)
    min_d = min(blk.w.shape[0] * blk.out_hw[0] * blk.out_hw[1] for blk in probe.blocks)
    return min_c, min_d


def run_key(kind: str, batch: int, group: int, seed: int) -> tuple:
    return (kind, batch, group, seed)


def make_run_id(spec: SweepSpec, kind: str, batch: int, group: int, seed: int) -> str:
    tag = "|".join(str(v) for v in (
        kind, batch, group, seed, spec.epochs, spec.worker_shards,
        spec.dataset, spec.subset, spec.difficulty, spec.precision, spec.lr))
    return hashlib.sha1(tag.encode()).hexdigest()[:12]


def plan_runs(spec: SweepSpec) -> list[dict]:
    """Expand the grid; infeasible (kind, G) combinations are skipped with a
    logged reason. Every surviving combination appears exactly once."""
    input_shape = SYNTHETIC_SHAPE if spec.dataset == "synthetic" else (3, 32, 32)
    min_c, min_d = _model_dims(input_shape)
    runs = []
    seen = set()
    for kind in spec.normalizers:
        for batch in spec.batch_sizes:
            gs = spec.group_counts if kind in GROUPED_KINDS else [1]
            for g in gs:
                if g == "auto":
                    limit = min_c if kind == "gn" else min_d
                    group = select_group_count(kind, batch, limit=limit)
                else:
                    group = int(g)
                    if kind == "gn" and group > min_c:
                        log.warning("skipping gn G=%d at batch %d: group count "
                                    "exceeds channel count %d", group, batch, min_c)
                        continue
                    if kind == "bgn" and group > min_d:
                        log.warning("skipping bgn G=%d at batch %d: group count "
                                    "exceeds merged dimension %d", group, batch, min_d)
                        continue
                for seed in spec.seeds:
                    key = run_key(kind, batch, group, seed)
                    if key in seen:
                        continue
                    seen.add(key)
                    runs.append({
                        "run_id": make_run_id(spec, kind, batch, group, seed),
                        "kind": kind, "batch": batch, "group": group, "seed": seed,
                    })
    return runs


def _format(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _run_rows(spec: SweepSpec, run: dict) -> list[list]:
    train_ds, test_ds = load_sweep_dataset(spec)
    kind = NormKind(run["kind"], run["group"])
    net_spec = ConvNetSpec(norm=kind, num_classes=train_ds.num_classes,
                           input_shape=train_ds.image_shape)
    cfg = TrainConfig(batch_size=run["batch"], epochs=spec.epochs, lr=spec.lr,
                      seed=run["seed"], worker_shards=spec.worker_shards,
                      precision=spec.precision)
    _, hist = train(net_spec, train_ds, test_ds, cfg)
    base = [run["run_id"], run["kind"], run["batch"], run["group"],
            spec.worker_shards, run["seed"]]
    rows = []
    for r in hist.epochs:
        rows.append(base + [r.epoch, r.train_loss, r.train_acc, r.test_acc,
                            r.wall_time_s, "ok"])
    final = hist.final_accuracy
    last = hist.epochs[-1] if hist.epochs else None
    rows.append(base + [
        "summary",
        last.train_loss if last else float("nan"),
        last.train_acc if last else float("nan"),
        final if final is not None else float("nan"),
        sum(r.wall_time_s for r in hist.epochs),
        hist.status,
    ])
    return rows


def _exec_run(args) -> tuple[str, list[list]]:
    # every run computes with one BLAS thread so results do not depend on
    # whether the sweep ran sequentially or across worker processes
    spec, run = args
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return run["run_id"], _run_rows(spec, run)
    with threadpool_limits(limits=1):
        return run["run_id"], _run_rows(spec, run)


def completed_run_ids(out_path) -> set[str]:
    """run_ids that already have a summary row in an existing CSV."""
    path = Path(out_path)
    if not path.exists():
        return set()
    done = set()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_COLUMNS:
            raise ValueError(f"existing output {path} has an unexpected schema")
        for row in reader:
            if row["epoch"] == "summary":
                done.add(row["run_id"])
    return done


def run_sweep(spec: SweepSpec) -> Path:
    """Run the grid, appending one CSV row per epoch plus a summary row per
    run; combinations whose summary already exists in the file are skipped."""
    out = Path(spec.out)
    runs = plan_runs(spec)
    done = completed_run_ids(out)
    pending = [r for r in runs if r["run_id"] not in done]
    if done:
        log.info("resuming: %d of %d runs already complete", len(runs) - len(pending),
                 len(runs))

    fresh = not out.exists()
    out.parent.mkdir(parents=True, exist_ok=True)
    workers = int(os.environ.get("NORMKIT_THREADS", "1"))
    results: dict[str, list[list]] = {}
    if workers > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for run_id, rows in pool.map(_exec_run, [(spec, r) for r in pending]):
                results[run_id] = rows
    else:
        for r in pending:
            log.info("running %s batch=%d G=%d seed=%d", r["kind"], r["batch"],
                     r["group"], r["seed"])
            run_id, rows = _exec_run((spec, r))
            results[run_id] = rows

    with open(out, "a", newline="") as fh:
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(CSV_COLUMNS)
        for r in pending:                      # grid order, not completion order
            for row in results[r["run_id"]]:
                writer.writerow([_format(v) for v in row])
    return out
