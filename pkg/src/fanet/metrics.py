"""Confusion-count segmentation metrics and dataset-level evaluation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ConfusionCounts",
    "confusion",
    "metric_suite",
    "EvaluationReport",
    "evaluate_dataset",
    "METRIC_COLUMNS",
]

# Fixed report column order.
METRIC_COLUMNS = ("f1", "miou", "recall", "precision", "specificity", "accuracy", "f2")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn
        )


def confusion(pred: np.ndarray, target: np.ndarray) -> ConfusionCounts:
    """Exact pixel counts of the four agreement classes."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    p = pred.astype(bool)
    t = target.astype(bool)
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    tn = p.size - tp - fp - fn
    return ConfusionCounts(tp, fp, tn, fn)


def _ratio(num: int, den: int, counts: ConfusionCounts) -> float:
    # Degenerate 0/0 cases score 1 only on exact mask agreement.
    if den == 0:
        return 1.0 if counts.fp == 0 and counts.fn == 0 else 0.0
    return num / den


def metric_suite(counts: ConfusionCounts) -> dict[str, float]:
    """F1/dice, IoU, precision, recall, specificity, accuracy, and F2.

    All values lie in [0, 1]. Ratios with zero denominators score 1 when
    prediction and target agree exactly and 0 otherwise.
    """
    tp, fp, tn, fn = counts.tp, counts.fp, counts.tn, counts.fn
    return {
        "f1": _ratio(2 * tp, 2 * tp + fp + fn, counts),
        "iou": _ratio(tp, tp + fp + fn, counts),
        "precision": _ratio(tp, tp + fp, counts),
        "recall": _ratio(tp, tp + fn, counts),
        "specificity": _ratio(tn, tn + fp, counts),
        "accuracy": _ratio(tp + tn, counts.total, counts),
        "f2": _ratio(5 * tp, 5 * tp + 4 * fn + fp, counts),
    }


def _two_class_iou(counts: ConfusionCounts) -> float:
    fg = _ratio(counts.tp, counts.tp + counts.fp + counts.fn, counts)
    bg = _ratio(counts.tn, counts.tn + counts.fn + counts.fp, counts)
    return 0.5 * (fg + bg)


@dataclass
class EvaluationReport:
    method: str
    per_image: list[dict]
    aggregate: dict[str, float]

    def row(self, extra: dict | None = None) -> dict:
        out = {"method": self.method}
        out.update({k: self.aggregate[k] for k in METRIC_COLUMNS})
        if extra:
            out.update(extra)
        return out


def evaluate_dataset(
    preds,
    targets,
    method: str = "FANet",
    sample_ids=None,
    two_class_miou: bool = False,
    pooled: bool = False,
) -> EvaluationReport:
    """Score aligned prediction/target masks.

    Per-image metrics are averaged into the dataset aggregate (or, with
    ``pooled``, recomputed from summed pixel counts). ``miou`` is the
    mean per-image foreground IoU unless ``two_class_miou`` also averages
    in the background class.
    """
    preds = list(preds)
    targets = list(targets)
    if len(preds) != len(targets):
        raise ValueError(f"{len(preds)} predictions vs {len(targets)} targets")
    if not preds:
        raise ValueError("nothing to evaluate")
    if sample_ids is None:
        sample_ids = [f"img{idx:04d}" for idx in range(len(preds))]

    per_image = []
    pooled_counts = ConfusionCounts(0, 0, 0, 0)
    for sid, p, t in zip(sample_ids, preds, targets):
        counts = confusion(p, t)
        pooled_counts = pooled_counts + counts
        row = {"sample_id": sid}
        row.update(metric_suite(counts))
        row["iou_two_class"] = _two_class_iou(counts)
        per_image.append(row)

    if pooled:
        aggregate = metric_suite(pooled_counts)
        aggregate["iou_two_class"] = _two_class_iou(pooled_counts)
    else:
        keys = [k for k in per_image[0] if k != "sample_id"]
        aggregate = {k: float(np.mean([r[k] for r in per_image])) for k in keys}
    aggregate["miou"] = aggregate["iou_two_class" if two_class_miou else "iou"]
    return EvaluationReport(method, per_image, aggregate)
