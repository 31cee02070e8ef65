"""Report rendering: every report path emits delimited data next to figures.

All figure helpers write PNG files through the Agg backend; the CSV/text
siblings carry the same numbers so reports stay grep-able.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluation import EvalReport


def write_csv(path, header: list[str], rows: list[list]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def write_json(path, payload) -> Path:
    path = Path(path)
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    return path


def text_table(header: list[str], rows: list[list]) -> str:
    """Aligned fixed-width table."""
    cells = [[str(c) for c in row] for row in [header, *rows]]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    lines = []
    for r, row in enumerate(cells):
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
        if r == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def render_confusion(report: EvalReport, path, class_names=None) -> Path:
    path = Path(path)
    c = report.confusion
    names = class_names or [str(i) for i in range(c.shape[0])]
    fig, ax = plt.subplots(figsize=(4 + 0.2 * len(names), 4 + 0.2 * len(names)))
    im = ax.imshow(c, cmap="Blues")
    ax.set_xticks(range(len(names)), names, rotation=45, ha="right")
    ax.set_yticks(range(len(names)), names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    for i in range(c.shape[0]):
        for j in range(c.shape[1]):
            ax.text(j, i, str(c[i, j]), ha="center", va="center", fontsize=8)
    ax.set_title(f"top-1 {report.top1:.3f}   mCA {report.mca:.3f}")
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_curves(x, series: dict[str, np.ndarray], path, *,
                  xlabel: str = "", ylabel: str = "", title: str = "") -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, values in series.items():
        ax.plot(x, values, marker="o", markersize=3, label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if len(series) > 1:
        ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_table_heatmap(row_labels, col_labels, values, path, *,
                         title: str = "") -> Path:
    """Matrix figure for ablation tables; NaN cells render blank."""
    path = Path(path)
    values = np.asarray(values, dtype=np.float64)
    fig, ax = plt.subplots(
        figsize=(2 + 1.1 * len(col_labels), 1.5 + 0.6 * len(row_labels)))
    masked = np.ma.masked_invalid(values)
    im = ax.imshow(masked, cmap="viridis", aspect="auto")
    ax.set_xticks(range(len(col_labels)), col_labels)
    ax.set_yticks(range(len(row_labels)), row_labels)
    for i in range(values.shape[0]):
        for j in range(values.shape[1]):
            if np.isfinite(values[i, j]):
                ax.text(j, i, f"{values[i, j]:.3f}", ha="center", va="center",
                        color="white", fontsize=8)
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def write_eval_report(out_dir, name: str, report: EvalReport,
                      class_names=None) -> dict[str, Path]:
    """JSON + aligned text + CSV + confusion figure for one eval run."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    paths["json"] = write_json(out_dir / f"{name}.json", report.to_dict())
    names = class_names or [str(i) for i in range(report.confusion.shape[0])]
    rows = [[names[i],
             "" if np.isnan(report.per_class_recall[i])
             else f"{report.per_class_recall[i]:.4f}",
             int(report.confusion[i].sum())]
            for i in range(len(names))]
    table = text_table(["class", "recall", "support"], rows)
    summary = f"top1 {report.top1:.4f}\nmCA  {report.mca:.4f}\n\n"
    paths["txt"] = Path(out_dir / f"{name}.txt")
    paths["txt"].write_text(summary + table)
    paths["csv"] = write_csv(out_dir / f"{name}.csv",
                             ["class", "recall", "support"], rows)
    paths["png"] = render_confusion(report, out_dir / f"{name}_confusion.png",
                                    class_names)
    return paths
