"""Evaluation report exports: JSON, delimited tables, and rendered figures.

Figures mirror the report structure: mean recall/precision curves over k,
the quartile band of recall@k, the rank-matching heatmap, and the two
segment breakdowns. All rendering targets files (Agg backend); nothing
opens a window.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .evalkit import EvalReport

METRIC_FIELDS = (
    "recall_mean",
    "recall_q25",
    "recall_median",
    "recall_q75",
    "precision_mean",
    "precision_q25",
    "precision_median",
    "precision_q75",
)


def report_to_json(report: EvalReport) -> str:
    return json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n"


def save_report_json(report: EvalReport, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(report_to_json(report), encoding="utf-8")
    return path


def save_metrics_csv(reports: list[EvalReport], path: str | Path) -> Path:
    """One row per (k, system)."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["system", "k", *METRIC_FIELDS])
        for report in reports:
            for m in report.per_k:
                writer.writerow(
                    [report.system, m.k, *(f"{getattr(m, f):.6f}" for f in METRIC_FIELDS)]
                )
    return path


def save_rank_matrix_csv(report: EvalReport, path: str | Path) -> Path:
    """Depth x depth counts; row = true rank, column = predicted rank."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        for row in report.rank_matrix:
            writer.writerow([int(x) for x in row])
    return path


def _fig_curves(reports: list[EvalReport], path: Path) -> Path:
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for report in reports:
        ks = [m.k for m in report.per_k]
        axes[0].plot(ks, [m.recall_mean for m in report.per_k], marker="o", label=report.system)
        axes[1].plot(ks, [m.precision_mean for m in report.per_k], marker="o", label=report.system)
    axes[0].set_ylabel("mean recall@k")
    axes[1].set_ylabel("mean precision@k")
    for ax in axes:
        ax.set_xlabel("k")
        ax.legend()
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def _fig_quartiles(reports: list[EvalReport], path: Path) -> Path:
    fig, axes = plt.subplots(1, len(reports), figsize=(4.5 * len(reports), 3.5), squeeze=False)
    for ax, report in zip(axes[0], reports):
        ks = [m.k for m in report.per_k]
        median = [m.recall_median for m in report.per_k]
        q25 = [m.recall_q25 for m in report.per_k]
        q75 = [m.recall_q75 for m in report.per_k]
        ax.fill_between(ks, q25, q75, alpha=0.3, label="quartile band")
        ax.plot(ks, median, marker="o", label="median")
        ax.set_title(report.system)
        ax.set_xlabel("k")
        ax.set_ylabel("recall@k")
        ax.set_ylim(0, 1.05)
        ax.legend()
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def _fig_rank_matrix(report: EvalReport, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 4))
    matrix = report.rank_matrix.astype(float)
    total = matrix.sum() or 1.0
    im = ax.imshow(matrix / total, cmap="viridis", origin="upper")
    ax.set_xlabel("predicted rank")
    ax.set_ylabel("true frequency rank")
    depth = report.rank_depth
    ticks = list(range(depth))
    ax.set_xticks(ticks, [str(t + 1) for t in ticks])
    ax.set_yticks(ticks, [str(t + 1) for t in ticks])
    ax.set_title(
        f"{report.system}: exact {report.exact_match_fraction:.0%}, "
        f"within one {report.within_one_fraction:.0%}"
    )
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def _fig_breakdowns(reports: list[EvalReport], path: Path) -> Path:
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.5))
    width = 0.8 / len(reports)
    for idx, report in enumerate(reports):
        for ax, buckets, title in (
            (axes[0], report.basket_size_buckets, "held-out basket size"),
            (axes[1], report.tenure_buckets, "previous sessions"),
        ):
            labels = [b.label for b in buckets]
            values = [b.recall_mean if b.recall_mean is not None else 0.0 for b in buckets]
            x = np.arange(len(labels)) + idx * width
            ax.bar(x, values, width=width, label=report.system)
            ax.set_xticks(np.arange(len(labels)) + width * (len(reports) - 1) / 2, labels)
            ax.set_xlabel(title)
            ax.set_ylabel("mean recall@10")
            ax.set_ylim(0, 1.05)
    for ax in axes:
        ax.legend()
        ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def render_figures(reports: list[EvalReport], out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [
        _fig_curves(reports, out_dir / "recall_precision.png"),
        _fig_quartiles(reports, out_dir / "recall_quartiles.png"),
        _fig_breakdowns(reports, out_dir / "breakdowns.png"),
    ]
    for report in reports:
        written.append(_fig_rank_matrix(report, out_dir / f"rank_match_{report.system}.png"))
    return written


def export_all(
    reports: list[EvalReport], out_dir: str | Path, figures: bool = True
) -> list[Path]:
    """Write JSON + CSV (+ figures) for a set of reports into a directory."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [save_metrics_csv(reports, out_dir / "metrics.csv")]
    for report in reports:
        written.append(save_report_json(report, out_dir / f"report_{report.system}.json"))
        written.append(
            save_rank_matrix_csv(report, out_dir / f"rank_matrix_{report.system}.csv")
        )
    if figures:
        written.extend(render_figures(reports, out_dir))
    return written
