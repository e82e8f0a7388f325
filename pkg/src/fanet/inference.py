"""Iterative test-time refinement.

The first prediction is seeded with an Otsu mask of the input image;
each further iteration feeds the latest binarized prediction back into
the network. With frozen weights the process is deterministic, so a
repeated mask is a fixed point and the trace stabilizes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .mask_codec import otsu_threshold
from .metrics import confusion, metric_suite
from .network import FANet

__all__ = ["RefinementTrace", "binarize", "iterative_predict", "predict_once"]


def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Threshold a probability map at ``threshold`` (inclusive) to a {0,1} mask."""
    prob = np.asarray(prob)
    if prob.size and (prob.min() < 0.0 or prob.max() > 1.0):
        raise ValueError("probability map has values outside [0, 1]")
    return (prob >= threshold).astype(np.uint8)


@dataclass
class RefinementTrace:
    """Per-iteration predictions; entry 0 is the Otsu-seeded prediction."""

    probabilities: list[np.ndarray] = field(default_factory=list)
    masks: list[np.ndarray] = field(default_factory=list)
    f1_per_iteration: list[np.ndarray] | None = None
    iou_per_iteration: list[np.ndarray] | None = None

    def __len__(self) -> int:
        return len(self.masks)

    def mean_f1(self, iteration: int) -> float:
        if self.f1_per_iteration is None:
            raise ValueError("trace was computed without ground truth")
        return float(np.mean(self.f1_per_iteration[iteration]))

    def mean_iou(self, iteration: int) -> float:
        if self.iou_per_iteration is None:
            raise ValueError("trace was computed without ground truth")
        return float(np.mean(self.iou_per_iteration[iteration]))

    def converged_at(self) -> int | None:
        """First iteration t with mask_t == mask_{t-1}, if any."""
        for t in range(1, len(self.masks)):
            if np.array_equal(self.masks[t], self.masks[t - 1]):
                return t
        return None


def _as_batch(images: np.ndarray) -> np.ndarray:
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4 or images.shape[3] != 3:
        raise ValueError(f"expected (N, H, W, 3) images, got {images.shape}")
    return images


def _forward(model: FANet, images_t: torch.Tensor, masks: np.ndarray) -> np.ndarray:
    masks_t = torch.from_numpy(masks[:, None].astype(np.float32)).to(images_t.device)
    with torch.no_grad():
        probs = model(images_t, masks_t)
    return probs[:, 0].cpu().numpy()


def predict_once(
    model: FANet, images: np.ndarray, device: str = "cpu"
) -> tuple[np.ndarray, np.ndarray]:
    """Single forward pass from the Otsu seed (no refinement).

    Returns (probabilities, masks), each of shape (N, H, W).
    """
    images = _as_batch(images)
    model.eval()
    images_t = torch.from_numpy(images.transpose(0, 3, 1, 2)).to(device)
    seed = np.stack([otsu_threshold(img)[0] for img in images])
    probs = _forward(model, images_t, seed)
    return probs, binarize(probs, model.cfg.binarize_threshold)


def iterative_predict(
    model: FANet,
    images: np.ndarray,
    iterations: int = 10,
    targets: np.ndarray | None = None,
    early_stop: bool = False,
    device: str = "cpu",
) -> RefinementTrace:
    """Refine predictions by feeding each binarized mask back in.

    The trace has ``iterations + 1`` entries: the Otsu-seeded prediction
    followed by the refinements (fewer if ``early_stop`` fires on an
    exact fixed point, which only applies to single-image batches). When
    ``targets`` is given, per-image F1 is recorded for every iteration.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    images = _as_batch(images)
    model.eval()
    images_t = torch.from_numpy(images.transpose(0, 3, 1, 2)).to(device)
    threshold = model.cfg.binarize_threshold

    if targets is not None:
        targets = np.asarray(targets)
        if targets.ndim == 2:
            targets = targets[None]
        if targets.shape[0] != images.shape[0]:
            raise ValueError("targets do not align with images")

    with_gt = targets is not None
    trace = RefinementTrace(
        f1_per_iteration=[] if with_gt else None,
        iou_per_iteration=[] if with_gt else None,
    )

    def record(probs: np.ndarray) -> np.ndarray:
        mask = binarize(probs, threshold)
        trace.probabilities.append(probs)
        trace.masks.append(mask)
        if with_gt:
            suites = [metric_suite(confusion(m, t)) for m, t in zip(mask, targets)]
            trace.f1_per_iteration.append(np.array([s["f1"] for s in suites]))
            trace.iou_per_iteration.append(np.array([s["iou"] for s in suites]))
        return mask

    current = np.stack([otsu_threshold(img)[0] for img in images])
    current = record(_forward(model, images_t, current))
    for _ in range(iterations):
        previous = current
        current = record(_forward(model, images_t, current))
        if early_stop and images.shape[0] == 1 and np.array_equal(current, previous):
            break
    return trace
