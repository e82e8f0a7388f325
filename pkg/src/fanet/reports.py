"""Report emitters: fixed-format CSV/Markdown tables and their figures.

Every report path writes the delimited table and a rendered PNG next to
it. Metric values are printed with four decimals in the fixed column
order (method, F1, mIoU, recall, precision, specificity, accuracy, F2).
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import METRIC_COLUMNS

__all__ = [
    "REPORT_COLUMNS",
    "format_metric",
    "write_metrics_csv",
    "write_metrics_markdown",
    "write_trace_csv",
    "plot_loss_curve",
    "plot_iteration_curve",
    "plot_ablation_chart",
    "plot_metrics_summary",
    "save_overlay",
]

REPORT_COLUMNS = ("method",) + METRIC_COLUMNS


def format_metric(value) -> str:
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def _columns_for(rows: list[dict]) -> list[str]:
    extra = [k for k in rows[0] if k not in REPORT_COLUMNS]
    return list(REPORT_COLUMNS) + extra


def write_metrics_csv(rows: list[dict], path) -> None:
    cols = _columns_for(rows)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for row in rows:
            writer.writerow([format_metric(row.get(c, "")) for c in cols])


def write_metrics_markdown(rows: list[dict], path) -> None:
    cols = _columns_for(rows)
    lines = [
        "| " + " | ".join(cols) + " |",
        "|" + "|".join("---" for _ in cols) + "|",
    ]
    for row in rows:
        lines.append("| " + " | ".join(format_metric(row.get(c, "")) for c in cols) + " |")
    Path(path).write_text("\n".join(lines) + "\n")


def write_trace_csv(rows: list[dict], path) -> None:
    """Long-form per-iteration trace table (sample_id, iteration, ...)."""
    if not rows:
        return
    cols = list(rows[0])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for row in rows:
            writer.writerow([format_metric(row.get(c, "")) for c in cols])


def plot_loss_curve(history: list[dict], path) -> None:
    epochs = [row["epoch"] for row in history]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [row["train_loss"] for row in history], label="train loss")
    vals = [row["val_loss"] for row in history]
    if not all(np.isnan(v) for v in vals):
        ax.plot(epochs, vals, label="val loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax2 = ax.twinx()
    ax2.plot(epochs, [row["lr"] for row in history], color="gray", ls=":", label="lr")
    ax2.set_yscale("log")
    ax2.set_ylabel("learning rate")
    ax.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_iteration_curve(mean_f1: list[float], path, label: str = "mean F1") -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(range(len(mean_f1)), mean_f1, marker="o")
    ax.set_xlabel("refinement iteration")
    ax.set_ylabel(label)
    ax.set_xticks(range(len(mean_f1)))
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_ablation_chart(rows: list[dict], path) -> None:
    methods = [row["method"] for row in rows]
    x = np.arange(len(methods))
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.bar(x - 0.2, [row["f1"] for row in rows], width=0.4, label="F1")
    ax1.bar(x + 0.2, [row["miou"] for row in rows], width=0.4, label="mIoU")
    ax1.set_xticks(x, methods)
    ax1.set_ylim(0, 1)
    ax1.legend()
    ax1.set_title("segmentation quality")
    ax2.bar(x, [row["parameters"] / 1e6 for row in rows], width=0.5, color="tab:gray")
    ax2.set_xticks(x, methods)
    ax2.set_ylabel("parameters (M)")
    ax2.set_title("model size")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_metrics_summary(aggregate: dict[str, float], path, title: str = "") -> None:
    keys = list(METRIC_COLUMNS)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(range(len(keys)), [aggregate[k] for k in keys], color="tab:blue")
    ax.set_xticks(range(len(keys)), keys, rotation=30)
    ax.set_ylim(0, 1)
    if title:
        ax.set_title(title)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_overlay(image: np.ndarray, mask: np.ndarray, path) -> None:
    """Side-by-side PNG of the input image and its red mask overlay."""
    from PIL import Image

    rgb = np.clip(image * 255.0, 0, 255).astype(np.uint8)
    overlay = rgb.copy()
    fg = mask.astype(bool)
    overlay[fg] = (0.5 * overlay[fg] + 0.5 * np.array([255, 0, 0])).astype(np.uint8)
    Image.fromarray(np.concatenate([rgb, overlay], axis=1)).save(path)
