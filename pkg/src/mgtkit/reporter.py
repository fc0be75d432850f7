"""Figure rendering and run reports.

Every figure is written as SVG with a CSV sidecar carrying the exact
numbers plotted, so numeric assertions never parse images. Rendering is
byte-deterministic for fixed inputs and renderer version: the SVG hash
salt is pinned and no timestamps are embedded.
"""

from __future__ import annotations

import csv
import hashlib
import json
import shutil
from pathlib import Path
from typing import Mapping

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .corpus import TokenLengthStats, compare_token_stats
from .evaluator import ConfusionMatrix, GroupMetrics, MetricReport

_LABEL_NAMES = {0: "human", 1: "machine"}
_LABEL_COLORS = {0: "#1f77b4", 1: "#d62728"}
_SVG_SALT = "mgtkit"

FIGURE_SETS = ("all", "hist", "breakdown", "confusion")


def _save_svg(fig, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with matplotlib.rc_context({"svg.hashsalt": _SVG_SALT}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".csv")


def render_histogram(stats: TokenLengthStats, out: str | Path) -> Path:
    """Overlaid per-label token-length histogram, bucket-aligned."""
    if not stats.per_label:
        raise ValueError("empty stats")
    out = Path(out)
    buckets = sorted({b for s in stats.per_label.values() for b in s.histogram})

    fig, ax = plt.subplots(figsize=(7, 4))
    width = stats.bucket_width * 0.8 / max(len(stats.per_label), 1)
    for slot, (label, s) in enumerate(sorted(stats.per_label.items())):
        xs = [b + slot * width for b in buckets]
        ys = [s.histogram.get(b, 0) for b in buckets]
        ax.bar(xs, ys, width=width, align="edge",
               label=_LABEL_NAMES.get(label, str(label)),
               color=_LABEL_COLORS.get(label))
    ax.set_xlabel(f"token length ({stats.tokenizer}, bucket {stats.bucket_width})")
    ax.set_ylabel("records")
    ax.legend()
    fig.tight_layout()
    _save_svg(fig, out)

    with _sidecar(out).open("w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        labels = sorted(stats.per_label)
        w.writerow(["bucket_start", "bucket_end"] + [f"count_label{l}" for l in labels])
        for b in buckets:
            w.writerow(
                [b, b + stats.bucket_width]
                + [stats.per_label[l].histogram.get(b, 0) for l in labels]
            )
    return out


def render_length_comparison(
    train_stats: TokenLengthStats, test_stats: TokenLengthStats, out_dir: str | Path
) -> dict:
    """Histogram pair plus a delta summary flagging a longer machine class."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    render_histogram(train_stats, out_dir / "token_length_train.svg")
    render_histogram(test_stats, out_dir / "token_length_test.svg")
    summary = compare_token_stats(train_stats, test_stats)
    (out_dir / "token_length_delta.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return summary


def render_breakdown(
    breakdown: Mapping[str, GroupMetrics], out: str | Path, metric: str = "f1_macro"
) -> Path:
    """Bar chart sorted descending by ``metric``, group size on each bar."""
    if not breakdown:
        raise ValueError("empty breakdown")
    if metric not in ("f1_macro", "accuracy"):
        raise ValueError(f"metric must be 'f1_macro' or 'accuracy', got {metric!r}")
    out = Path(out)
    items = sorted(
        breakdown.items(), key=lambda kv: (-getattr(kv[1], metric), kv[0])
    )

    fig, ax = plt.subplots(figsize=(max(5, 1.0 * len(items) + 2), 4))
    xs = range(len(items))
    ys = [getattr(m, metric) for _, m in items]
    ax.bar(xs, ys, color="#1f77b4")
    for x, (name, m) in zip(xs, items):
        ax.annotate(f"n={m.count}", (x, getattr(m, metric)),
                    ha="center", va="bottom", fontsize=8)
    ax.set_xticks(list(xs))
    ax.set_xticklabels([name for name, _ in items], rotation=30, ha="right")
    ax.set_ylim(0, 1.1)
    ax.set_ylabel(metric)
    fig.tight_layout()
    _save_svg(fig, out)

    with _sidecar(out).open("w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(["group", "count", "accuracy", "f1_macro"])
        for name, m in items:
            w.writerow([name, m.count, repr(m.accuracy), repr(m.f1_macro)])
    return out


def render_confusion(cm: ConfusionMatrix, out: str | Path) -> Path:
    """2x2 heatmap annotated with raw counts and row-normalized percentages."""
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    out = Path(out)
    grid = [[cm.tn, cm.fp], [cm.fn, cm.tp]]
    rows = cm.row_normalized()
    shares = [[rows["tn"], rows["fp"]], [rows["fn"], rows["tp"]]]

    fig, ax = plt.subplots(figsize=(4.5, 4))
    ax.imshow(shares, cmap="Blues", vmin=0.0, vmax=1.0)
    for i in range(2):
        for j in range(2):
            ax.text(j, i, f"{grid[i][j]}\n{shares[i][j]:.1%}",
                    ha="center", va="center",
                    color="white" if shares[i][j] > 0.5 else "black")
    ax.set_xticks([0, 1], ["pred human", "pred machine"])
    ax.set_yticks([0, 1], ["gold human", "gold machine"])
    fig.tight_layout()
    _save_svg(fig, out)

    with _sidecar(out).open("w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(["cell", "count", "row_share"])
        for cell in ("tn", "fp", "fn", "tp"):
            w.writerow([cell, getattr(cm, cell), repr(rows[cell])])
    return out


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def emit_report(
    report: MetricReport,
    stats: TokenLengthStats | None,
    out_dir: str | Path,
    config_path: str | Path | None = None,
    figures: str = "all",
) -> dict:
    """Write metrics, breakdown CSVs, figures and a digest manifest.

    ``out_dir`` must be empty or absent. On any failure the partially
    written directory is removed before the error propagates. Re-running on
    identical inputs reproduces identical digests.
    """
    if figures not in FIGURE_SETS:
        raise ValueError(f"figures must be one of {FIGURE_SETS}, got {figures!r}")
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()):
        raise ValueError(f"output directory {out_dir} is not empty")
    out_dir.mkdir(parents=True, exist_ok=True)

    try:
        (out_dir / "metrics.json").write_text(
            json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        for fieldname, groups in report.per_group.items():
            with (out_dir / f"breakdown_{fieldname}.csv").open(
                "w", encoding="utf-8", newline=""
            ) as f:
                w = csv.writer(f)
                w.writerow(["group", "count", "accuracy", "f1_macro"])
                for name, m in sorted(
                    groups.items(), key=lambda kv: (-kv[1].f1_macro, kv[0])
                ):
                    w.writerow([name, m.count, repr(m.accuracy), repr(m.f1_macro)])

        if figures in ("all", "hist") and stats is not None:
            render_histogram(stats, out_dir / "token_length.svg")
        if figures in ("all", "breakdown"):
            for fieldname, groups in report.per_group.items():
                if groups:
                    render_breakdown(groups, out_dir / f"breakdown_{fieldname}.svg")
        if figures in ("all", "confusion"):
            render_confusion(report.confusion, out_dir / "confusion.svg")

        if config_path is not None:
            shutil.copyfile(config_path, out_dir / "config.toml")

        manifest = {
            "figure_set": figures,
            "files": {
                p.name: _sha256_file(p)
                for p in sorted(out_dir.iterdir())
                if p.is_file()
            },
        }
        (out_dir / "manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    except BaseException:
        shutil.rmtree(out_dir, ignore_errors=True)
        raise
    return manifest
