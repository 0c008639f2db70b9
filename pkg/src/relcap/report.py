"""SVG charts and a markdown summary from metrics CSVs and EMD summaries."""

from __future__ import annotations

import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .trainer import read_metrics  # noqa: E402

# fixed element ids and no date stamp keep identical inputs byte-identical
_RC = {"svg.hashsalt": "relcap", "svg.fonttype": "none", "path.simplify": False}


def _label(path: Path) -> str:
    return f"{path.parent.name}/{path.stem}" if path.parent.name else path.stem


def load_runs(paths, labels=None) -> list[tuple[str, list[dict]]]:
    paths = [Path(p) for p in paths]
    if labels is not None and len(labels) != len(paths):
        raise ValueError(f"{len(labels)} labels for {len(paths)} metrics files")
    runs = []
    for i, p in enumerate(paths):
        rows = read_metrics(p)
        if not rows:
            raise ValueError(f"metrics file {p} has no rows")
        runs.append((labels[i] if labels else _label(p), rows))
    return runs


def _save(fig, path: Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def line_chart(runs, key: str, ylabel: str, path: Path) -> None:
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6, 4))
        for label, rows in runs:
            pts = [(r["epoch"], r[key]) for r in rows if not math.isnan(r[key])]
            if pts:
                ax.plot(*zip(*pts), marker="o", markersize=3, label=label)
        ax.set_xlabel("epoch")
        ax.set_ylabel(ylabel)
        ax.grid(alpha=0.3)
        ax.legend()
        fig.tight_layout()
        _save(fig, path)


def emd_chart(summaries: list[tuple[str, dict]], path: Path) -> None:
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6, 4))
        width = 0.38
        xs = range(len(summaries))
        ax.bar([x - width / 2 for x in xs], [s["with_caa"]["mean"] for _, s in summaries], width, label="w/ CAA")
        ax.bar([x + width / 2 for x in xs], [s["without_caa"]["mean"] for _, s in summaries], width, label="w/o CAA")
        ax.set_xticks(list(xs), [name for name, _ in summaries])
        ax.set_ylabel("mean EMD (cells)")
        ax.legend()
        fig.tight_layout()
        _save(fig, path)


def _fmt(x: float) -> str:
    return "n/a" if math.isnan(x) else f"{x:.4f}"


def summary_markdown(runs, summaries) -> str:
    lines = ["# Run summary", "", "| run | epochs | final train loss | val soft acc | feasible | planted recovery |",
             "|---|---|---|---|---|---|"]
    for label, rows in runs:
        r = rows[-1]
        lines.append(f"| {label} | {r['epoch']} | {_fmt(r['train_loss'])} | {_fmt(r['val_soft_acc'])} | "
                     f"{_fmt(r['feasible_rate'])} | {_fmt(r['planted_recovery'])} |")
    if summaries:
        lines += ["", "## Attention EMD", "", "| model | w/ CAA | w/o CAA | records |", "|---|---|---|---|"]
        for name, s in summaries:
            lines.append(f"| {name} | {_fmt(s['with_caa']['mean'])} | {_fmt(s['without_caa']['mean'])} | "
                         f"{s['with_caa']['count']} |")
    return "\n".join(lines) + "\n"


def write_report(out: Path, metrics, emd_files=(), labels=None) -> list[str]:
    out = Path(out)
    runs = load_runs(metrics, labels)
    line_chart(runs, "train_loss", "train loss", out / "loss.svg")
    line_chart(runs, "val_soft_acc", "validation soft accuracy", out / "accuracy.svg")
    line_chart(runs, "planted_recovery", "planted-caption recovery", out / "recovery.svg")
    written = ["loss.svg", "accuracy.svg", "recovery.svg"]
    summaries = [(_label(Path(p)).split("/")[0] or Path(p).stem, json.loads(Path(p).read_text())) for p in emd_files]
    if summaries:
        emd_chart(summaries, out / "emd.svg")
        written.append("emd.svg")
    (out / "summary.md").write_text(summary_markdown(runs, summaries))
    written.append("summary.md")
    return written
