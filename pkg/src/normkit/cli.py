"""Command-line interface: gradcheck, single runs, sweeps and reports.

Exit codes: 0 success, 1 error, 2 gradient-check failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .gradcheck import DEFAULT_STEP, DEFAULT_TOL, MUTATIONS, check_norm_layer
from .model import ConvNetSpec, save_checkpoint
from .normalizers import GROUPED_KINDS, KINDS, NormKind, select_group_count
from .sweep import (SweepSpec, SYNTHETIC_DIFFICULTY, load_sweep_dataset,
                    make_run_id, run_sweep)
from .train import TrainConfig, train

log = logging.getLogger("normkit")

GRADCHECK_SHAPES = ((3, 8, 5, 5), (2, 4, 6, 6), (4, 8, 3, 3))
_PRECISIONS = {"f32": "single", "f64": "double"}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="normkit",
        description="Feature-map normalization kernels and batch-size experiments. "
                    "NORMKIT_THREADS caps sweep parallelism.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gradcheck", help="finite-difference check of the normalizers")
    g.add_argument("--kind", default="all", choices=("all",) + KINDS)
    g.add_argument("--tol", type=float, default=DEFAULT_TOL)
    g.add_argument("--step", type=float, default=DEFAULT_STEP)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--groups", type=int, default=None,
                   help="group count for gn/bgn (default: 4 / 8)")
    g.add_argument("--mutate", default=None, choices=MUTATIONS,
                   help="plant a known backward defect; the check must fail")

    t = sub.add_parser("train", help="train one model and report per-epoch metrics")
    t.add_argument("--norm", required=True, choices=KINDS)
    t.add_argument("--groups", type=int, default=None,
                   help="group count for gn/bgn (default: schedule by batch size)")
    t.add_argument("--batch-size", type=int, required=True)
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--lr", default="auto")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--workers", type=int, default=1,
                   help="worker shards with local normalization statistics")
    t.add_argument("--data", default="synthetic",
                   help="'synthetic' or 'cifar10:<dir>'")
    t.add_argument("--subset", type=int, default=None,
                   help="class-balanced train subset size")
    t.add_argument("--difficulty", type=float, default=SYNTHETIC_DIFFICULTY)
    t.add_argument("--out", default=None, help="append CSV rows here")
    t.add_argument("--checkpoint", default=None)
    t.add_argument("--precision", default="f32", choices=tuple(_PRECISIONS))

    s = sub.add_parser("sweep", help="normalizer x batch-size x G grid")
    s.add_argument("--spec", default=None,
                   help="key=value config file (norms, batch_sizes, groups, seeds, "
                        "epochs, data, subset, difficulty, shards, precision, out)")
    s.add_argument("--norms", default=None, help="comma list, e.g. bn,bgn")
    s.add_argument("--batch-sizes", default=None, help="comma list, e.g. 64,8,2")
    s.add_argument("--groups", default=None, help="comma list of ints or 'auto'")
    s.add_argument("--seeds", default=None, help="comma list, e.g. 0,1,2")
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--data", default=None)
    s.add_argument("--subset", type=int, default=None)
    s.add_argument("--difficulty", type=float, default=None)
    s.add_argument("--shards", type=int, default=None)
    s.add_argument("--precision", default=None, choices=tuple(_PRECISIONS))
    s.add_argument("--out", default=None, help="output CSV (required here or in --spec)")

    r = sub.add_parser("report", help="markdown summary + figure from a sweep CSV")
    r.add_argument("--in", dest="input", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--no-figure", action="store_true")
    return parser


def _cmd_gradcheck(args) -> int:
    kinds = KINDS if args.kind == "all" else (args.kind,)
    default_groups = {"gn": 4, "bgn": 8}
    failed = False
    for name in kinds:
        groups = args.groups or default_groups.get(name, 1)
        kind = NormKind(name, groups)
        for shape in GRADCHECK_SHAPES:
            if name == "gn" and groups > shape[1]:
                continue
            report = check_norm_layer(kind, shape, tol=args.tol, step=args.step,
                                      seed=args.seed, mutation=args.mutate)
            print(f"{report.summary()}  shape={shape}")
            failed |= not report.passed
    if args.mutate:
        print(f"planted mutation {args.mutate!r}: "
              + ("detected" if failed else "NOT detected"))
    return 2 if failed else 0


def _csv_append(path: str, rows: list[list]) -> None:
    import csv

    from .sweep import CSV_COLUMNS, _format

    p = Path(path)
    fresh = not p.exists()
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "a", newline="") as fh:
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow([_format(v) for v in row])


def _cmd_train(args) -> int:
    spec = SweepSpec(dataset=args.data, subset=args.subset,
                     difficulty=args.difficulty, out="unused.csv")
    train_ds, test_ds = load_sweep_dataset(spec)
    if args.groups is not None:
        groups = args.groups
    else:
        groups = select_group_count(args.norm, args.batch_size)
    kind = NormKind(args.norm, groups)
    net_spec = ConvNetSpec(norm=kind, num_classes=train_ds.num_classes,
                           input_shape=train_ds.image_shape)
    lr = args.lr if args.lr == "auto" else float(args.lr)
    cfg = TrainConfig(batch_size=args.batch_size, epochs=args.epochs, lr=lr,
                      seed=args.seed, worker_shards=args.workers,
                      precision=_PRECISIONS[args.precision])
    print(f"training {kind} batch={cfg.batch_size} lr={cfg.resolved_lr():g} "
          f"epochs={cfg.epochs} shards={cfg.worker_shards} on {args.data}")
    model, hist = train(net_spec, train_ds, test_ds, cfg)
    for r in hist.epochs:
        print(f"epoch {r.epoch:3d}  loss {r.train_loss:.4f}  "
              f"train acc {r.train_acc:.4f}  test acc {r.test_acc:.4f}  "
              f"({r.wall_time_s:.1f}s)")
    if hist.status != "ok":
        print(f"run {hist.status}: {hist.error}", file=sys.stderr)
    final = hist.final_accuracy
    if final is not None:
        print(f"final metric (median of last 5 test accuracies): {final:.4f}")

    if args.out:
        sweep_like = SweepSpec(normalizers=[args.norm], batch_sizes=[args.batch_size],
                               group_counts=[groups], seeds=[args.seed],
                               epochs=args.epochs, dataset=args.data,
                               subset=args.subset, difficulty=args.difficulty,
                               worker_shards=args.workers,
                               precision=_PRECISIONS[args.precision], lr=lr,
                               out=args.out)
        run_id = make_run_id(sweep_like, args.norm, args.batch_size, groups, args.seed)
        base = [run_id, args.norm, args.batch_size, groups, args.workers, args.seed]
        rows = [base + [r.epoch, r.train_loss, r.train_acc, r.test_acc,
                        r.wall_time_s, "ok"] for r in hist.epochs]
        last = hist.epochs[-1] if hist.epochs else None
        rows.append(base + ["summary",
                            last.train_loss if last else float("nan"),
                            last.train_acc if last else float("nan"),
                            final if final is not None else float("nan"),
                            sum(r.wall_time_s for r in hist.epochs), hist.status])
        _csv_append(args.out, rows)
        print(f"wrote {args.out}")
    if args.checkpoint:
        save_checkpoint(args.checkpoint, model.state_tensors())
        print(f"wrote {args.checkpoint}")
    return 0 if hist.status == "ok" else 1


def _parse_spec_file(path: str) -> dict:
    """toml-like key=value lines; '#' starts a comment."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key.replace("-", "_")] = value.strip("\"'")
    return values


def _split_list(text: str, conv):
    return [conv(tok.strip()) for tok in str(text).split(",") if tok.strip()]


def _cmd_sweep(args) -> int:
    cfg = _parse_spec_file(args.spec) if args.spec else {}
    if args.norms:
        cfg["norms"] = args.norms
    if args.batch_sizes:
        cfg["batch_sizes"] = args.batch_sizes
    if args.groups:
        cfg["groups"] = args.groups
    if args.seeds:
        cfg["seeds"] = args.seeds
    if args.epochs is not None:
        cfg["epochs"] = args.epochs
    if args.data:
        cfg["data"] = args.data
    if args.subset is not None:
        cfg["subset"] = args.subset
    if args.difficulty is not None:
        cfg["difficulty"] = args.difficulty
    if args.shards is not None:
        cfg["shards"] = args.shards
    if args.precision:
        cfg["precision"] = args.precision
    if args.out:
        cfg["out"] = args.out
    if "out" not in cfg:
        raise ValueError("sweep needs --out (or out= in the spec file)")

    def groups_conv(tok):
        return tok if tok == "auto" else int(tok)

    spec = SweepSpec(
        normalizers=_split_list(cfg.get("norms", "bn,bgn"), str),
        batch_sizes=_split_list(cfg.get("batch_sizes", "64,2"), int),
        group_counts=_split_list(cfg.get("groups", "auto"), groups_conv),
        seeds=_split_list(cfg.get("seeds", "0,1,2"), int),
        epochs=int(cfg.get("epochs", 20)),
        dataset=cfg.get("data", "synthetic"),
        subset=int(cfg["subset"]) if cfg.get("subset") else None,
        difficulty=float(cfg.get("difficulty", SYNTHETIC_DIFFICULTY)),
        worker_shards=int(cfg.get("shards", 1)),
        precision=_PRECISIONS.get(cfg.get("precision", "f32"), "single"),
        lr=cfg.get("lr", "auto"),
        out=cfg["out"],
    )
    out = run_sweep(spec)
    print(f"wrote {out}")
    return 0


def _cmd_report(args) -> int:
    from .report import emit_report

    outputs = emit_report(args.input, args.out, with_figure=not args.no_figure)
    for kind, path in outputs.items():
        print(f"wrote {kind}: {path}")
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "gradcheck": _cmd_gradcheck,
        "train": _cmd_train,
        "sweep": _cmd_sweep,
        "report": _cmd_report,
    }
    try:
        return handlers[args.command](args)
    except Exception as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
