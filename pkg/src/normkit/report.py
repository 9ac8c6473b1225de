"""Markdown summaries and accuracy-vs-batch-size figures from sweep CSVs."""

from __future__ import annotations

import csv
from pathlib import Path
from statistics import median

from .sweep import CSV_COLUMNS
from .normalizers import GROUPED_KINDS, KINDS

BN_DEGRADATION_POINTS = 2.0     # accuracy points (percent) worth flagging


def load_summaries(csv_path) -> list[dict]:
    """Summary rows of a sweep CSV, with numeric fields parsed."""
    path = Path(csv_path)
    if not path.exists():
        raise FileNotFoundError(f"no such CSV: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValueError("empty CSV")
        if reader.fieldnames != CSV_COLUMNS:
            raise ValueError(f"malformed CSV: expected columns {CSV_COLUMNS}, "
                             f"got {reader.fieldnames}")
        rows = list(reader)
    if not rows:
        raise ValueError("empty CSV")
    out = []
    for row in rows:
        if row["epoch"] != "summary":
            continue
        try:
            out.append({
                "normalizer": row["normalizer"],
                "batch_size": int(row["batch_size"]),
                "group_count": int(row["group_count"]),
                "seed": int(row["seed"]),
                "test_acc": float(row["test_acc"]),
                "status": row["status"],
            })
        except (KeyError, ValueError) as exc:
            raise ValueError(f"malformed CSV row: {row}") from exc
    if not out:
        raise ValueError("CSV contains no summary rows")
    return out


def _label(row: dict) -> str:
    if row["normalizer"] in GROUPED_KINDS:
        return f"{row['normalizer']}[G={row['group_count']}]"
    return row["normalizer"]


def aggregate(summaries: list[dict]) -> tuple[list[str], list[int], dict]:
    """Median summary accuracy over seeds, keyed by (label, batch size)."""
    cells: dict[tuple[str, int], list[float]] = {}
    diverged: set[tuple[str, int]] = set()
    for row in summaries:
        key = (_label(row), row["batch_size"])
        if row["status"] == "diverged":
            diverged.add(key)
            continue
        cells.setdefault(key, []).append(row["test_acc"])
    table = {k: median(v) for k, v in cells.items()}
    for key in diverged - set(table):
        table[key] = float("nan")

    def label_order(label: str):
        base = label.split("[")[0]
        g = int(label.split("G=")[1].rstrip("]")) if "[" in label else 0
        return (KINDS.index(base), -g)

    labels = sorted({k[0] for k in table}, key=label_order)
    batches = sorted({k[1] for k in table}, reverse=True)
    return labels, batches, table


def _bn_degradation(labels, batches, table) -> str | None:
    if "bn" not in labels or len(batches) < 2:
        return None
    accs = {b: table.get(("bn", b)) for b in batches if ("bn", b) in table}
    if len(accs) < 2:
        return None
    best_b = max(accs, key=lambda b: accs[b])
    small_b = min(accs)
    drop = (accs[best_b] - accs[small_b]) * 100.0
    if drop >= BN_DEGRADATION_POINTS:
        return (f"**bn degrades at small batch sizes:** {drop:.1f} accuracy "
                f"points from batch {best_b} to batch {small_b}.")
    return None


def render_markdown(csv_path) -> str:
    summaries = load_summaries(csv_path)
    labels, batches, table = aggregate(summaries)
    lines = ["# Normalization sweep report", ""]
    seeds = sorted({r["seed"] for r in summaries})
    lines.append(f"Source: `{csv_path}` — median of final metric over seeds {seeds}.")
    lines.append("")
    header = "| normalizer | " + " | ".join(f"batch {b}" for b in batches) + " |"
    rule = "|" + "---|" * (len(batches) + 1)
    lines += [header, rule]
    for label in labels:
        cells = []
        for b in batches:
            v = table.get((label, b))
            cells.append("—" if v is None else ("diverged" if v != v else f"{v:.4f}"))
        lines.append(f"| {label} | " + " | ".join(cells) + " |")
    flag = _bn_degradation(labels, batches, table)
    if flag:
        lines += ["", flag]
    lines.append("")
    return "\n".join(lines)


def render_figure(csv_path, figure_path) -> Path:
    """Accuracy-vs-batch-size lines, one per normalizer label."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    summaries = load_summaries(csv_path)
    labels, batches, table = aggregate(summaries)
    xs = sorted(batches)
    fig, ax = plt.subplots(figsize=(6.2, 4.0))
    for label in labels:
        pts = [(b, table[(label, b)]) for b in xs if (label, b) in table
               and table[(label, b)] == table[(label, b)]]
        if not pts:
            continue
        ax.plot([p[0] for p in pts], [100.0 * p[1] for p in pts],
                marker="o", label=label)
    ax.set_xscale("log", base=2)
    ax.set_xticks(xs)
    ax.set_xticklabels([str(b) for b in xs])
    ax.set_xlabel("batch size")
    ax.set_ylabel("test accuracy (%)")
    ax.set_title("Accuracy vs batch size")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    figure_path = Path(figure_path)
    fig.savefig(figure_path, dpi=120)
    plt.close(fig)
    return figure_path


def emit_report(csv_path, md_path, with_figure: bool = True) -> dict:
    """Write the markdown summary; render the companion PNG next to it."""
    md_path = Path(md_path)
    md_path.parent.mkdir(parents=True, exist_ok=True)
    text = render_markdown(csv_path)
    outputs = {"markdown": md_path}
    if with_figure:
        fig_path = md_path.with_suffix(".png")
        render_figure(csv_path, fig_path)
        text += f"\n![accuracy vs batch size]({fig_path.name})\n"
        outputs["figure"] = fig_path
    md_path.write_text(text)
    return outputs
