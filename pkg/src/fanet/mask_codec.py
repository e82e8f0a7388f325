"""Binary mask codec and per-sample mask persistence.

Masks are 2-D ``{0,1}`` arrays. They are compressed with run-length
encoding before being stored, seeded from Otsu thresholding when no
stored mask exists yet, and max-pool downscaled to the resolution of
the network layer that consumes them.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

__all__ = [
    "RleMask",
    "MaskStore",
    "MaskShapeError",
    "StaleEpochError",
    "rle_encode",
    "rle_decode",
    "otsu_threshold",
    "downscale_mask",
    "to_grayscale",
    "export_mask_png",
]

STORE_HEADER = "fanet-rlestore v1"

# Luminance weights for RGB -> gray conversion.
_LUMA = np.array([0.299, 0.587, 0.114])


class MaskShapeError(ValueError):
    """Run list or mask dimensions are inconsistent."""


class StaleEpochError(ValueError):
    """A mask store write went backwards in epoch order."""


def _validate_binary(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2 or mask.shape[0] < 1 or mask.shape[1] < 1:
        raise MaskShapeError(f"expected a non-empty 2-D mask, got shape {mask.shape}")
    if not np.isin(mask, (0, 1)).all():
        raise MaskShapeError("mask values must be exactly 0 or 1")
    return mask.astype(np.uint8, copy=False)


@dataclass(frozen=True)
class RleMask:
    """Run-length compressed binary mask.

    ``runs`` alternate counts of 0s and 1s over the row-major flattening,
    always starting with the count of 0s (which may itself be 0 when the
    mask begins with a 1). Every later run is strictly positive and the
    counts sum to ``height * width``.
    """

    height: int
    width: int
    runs: tuple[int, ...]

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise MaskShapeError(f"invalid mask dims {self.height}x{self.width}")
        if len(self.runs) == 0:
            raise MaskShapeError("empty run list")
        if self.runs[0] < 0 or any(r <= 0 for r in self.runs[1:]):
            raise MaskShapeError("runs after the first must be strictly positive")
        if sum(self.runs) != self.height * self.width:
            raise MaskShapeError(
                f"runs sum to {sum(self.runs)}, expected {self.height * self.width}"
            )

    @property
    def num_pixels(self) -> int:
        return self.height * self.width


def rle_encode(mask: np.ndarray) -> RleMask:
    """Compress a binary mask into alternating 0/1 run counts."""
    mask = _validate_binary(mask)
    flat = mask.ravel()
    # Boundaries wherever the value changes; diff of boundaries = run lengths.
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], changes, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0] == 1:
        runs = [0] + runs
    return RleMask(mask.shape[0], mask.shape[1], tuple(int(r) for r in runs))


def rle_decode(rle: RleMask) -> np.ndarray:
    """Expand run counts back into the original ``{0,1}`` mask (exact inverse)."""
    values = np.zeros(len(rle.runs), dtype=np.uint8)
    values[1::2] = 1
    flat = np.repeat(values, np.asarray(rle.runs, dtype=np.int64))
    return flat.reshape(rle.height, rle.width)


def to_grayscale(image: np.ndarray) -> np.ndarray:
    """Collapse an ``(H, W, 3)`` color image to luminance; pass 2-D through."""
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[2] == 3:
        return image.astype(np.float64) @ _LUMA
    if image.ndim == 3 and image.shape[0] == 3:
        return np.tensordot(_LUMA, image.astype(np.float64), axes=1)
    if image.ndim == 2:
        return image
    raise MaskShapeError(f"cannot interpret image of shape {image.shape} as grayscale")


def otsu_threshold(image: np.ndarray, levels: int = 256) -> tuple[np.ndarray, float]:
    """Global threshold maximizing between-class variance over a quantized histogram.

    Candidate threshold ``t`` splits the quantized levels into a lower
    class ``{q < t}`` and an upper class ``{q >= t}``; the variance is
    maximized in exact integer arithmetic and ties are broken towards the
    smallest candidate. The returned mask is 1 strictly above the
    threshold, which for integer-valued images is exactly ``image > t``.
    A constant image yields an all-zero mask and the constant itself as
    threshold.

    Returns:
        (mask, threshold) where mask is uint8 ``{0,1}`` of the input shape.
    """
    image = to_grayscale(image)
    if image.size == 0:
        raise MaskShapeError("empty image")
    if not np.isfinite(image).all():
        raise ValueError("image contains non-finite values")
    if levels < 2:
        raise ValueError("need at least 2 histogram levels")

    vmin = image.min()
    vmax = image.max()
    if vmin == vmax:
        return np.zeros(image.shape, dtype=np.uint8), float(vmin)

    integral = np.issubdtype(image.dtype, np.integer)
    if integral and vmin >= 0 and vmax <= levels - 1:
        # Identity quantization: bin index == pixel intensity.
        quant = image.astype(np.int64)
        bin_value = lambda t: float(t)  # noqa: E731
    else:
        width = (float(vmax) - float(vmin)) / levels
        quant = np.floor((image - vmin) / width).astype(np.int64)
        np.clip(quant, 0, levels - 1, out=quant)
        # Mask is 1 iff quant > t*, i.e. intensity >= lower edge of bin t*+1.
        bin_value = lambda t: float(vmin) + (t + 1) * width  # noqa: E731

    hist = np.bincount(quant.ravel(), minlength=levels).tolist()
    svals = [v * h for v, h in enumerate(hist)]
    total_w = sum(hist)
    total_s = sum(svals)

    # sigma_b^2(t) = (s0*w1 - s1*w0)^2 / (w0*w1); compare as exact fractions.
    best_t = 0
    best_num = 0  # squared numerator
    best_den = 1
    w0 = 0
    s0 = 0
    for t in range(levels):
        if t > 0:
            w0 += hist[t - 1]
            s0 += svals[t - 1]
        w1 = total_w - w0
        if w0 == 0 or w1 == 0:
            continue
        num = s0 * w1 - (total_s - s0) * w0
        num *= num
        den = w0 * w1
        if num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den

    mask = (quant > best_t).astype(np.uint8)
    return mask, bin_value(best_t)


def downscale_mask(mask: np.ndarray, target_height: int, target_width: int) -> np.ndarray:
    """Max-pool a binary mask down to ``(target_height, target_width)``.

    An output pixel is 1 iff any pixel of its source window is 1. Source
    dimensions must be integer multiples of the target dimensions.
    """
    mask = _validate_binary(mask)
    h, w = mask.shape
    if target_height < 1 or target_width < 1:
        raise MaskShapeError("target dims must be positive")
    if h % target_height != 0 or w % target_width != 0:
        raise MaskShapeError(
            f"target {target_height}x{target_width} does not divide source {h}x{w}"
        )
    sh = h // target_height
    sw = w // target_width
    windows = mask.reshape(target_height, sh, target_width, sw)
    return windows.max(axis=(1, 3))


@dataclass
class MaskStore:
    """Keyed persistence of one RLE mask per sample, stamped with an epoch.

    Writes for a given sample must carry monotonically non-decreasing
    epochs; reads of unknown samples fall back to Otsu thresholding of the
    sample image (the epoch-0 seed) when an image is supplied.
    """

    entries: dict[str, tuple[RleMask, int]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, sample_id: str) -> bool:
        return sample_id in self.entries

    def put(self, sample_id: str, mask: np.ndarray, epoch: int) -> None:
        if "\t" in sample_id or "\n" in sample_id or not sample_id:
            raise ValueError(f"invalid sample id {sample_id!r}")
        prev = self.entries.get(sample_id)
        if prev is not None and epoch < prev[1]:
            raise StaleEpochError(
                f"stale write for {sample_id!r}: epoch {epoch} < stored {prev[1]}"
            )
        self.entries[sample_id] = (rle_encode(mask), epoch)

    def get(self, sample_id: str, image: np.ndarray | None = None) -> np.ndarray:
        entry = self.entries.get(sample_id)
        if entry is not None:
            return rle_decode(entry[0])
        if image is not None:
            return otsu_threshold(image)[0]
        raise KeyError(f"no stored mask for {sample_id!r} and no image to seed from")

    def epoch_of(self, sample_id: str) -> int:
        return self.entries[sample_id][1]

    def save(self, path: str | os.PathLike) -> None:
        """Rewrite the whole store as a line-oriented text file (bit-exact)."""
        lines = [STORE_HEADER]
        for sample_id in sorted(self.entries):
            rle, epoch = self.entries[sample_id]
            runs = " ".join(str(r) for r in rle.runs)
            lines.append(f"{sample_id}\t{epoch}\t{rle.height}\t{rle.width}\t{runs}")
        tmp = f"{path}.tmp"
        with open(tmp, "w") as fh:
            fh.write("\n".join(lines) + "\n")
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "MaskStore":
        with open(path) as fh:
            lines = fh.read().splitlines()
        if not lines or lines[0] != STORE_HEADER:
            raise ValueError(f"{path}: not a mask store file (bad header)")
        store = cls()
        for ln, line in enumerate(lines[1:], start=2):
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise ValueError(f"{path}:{ln}: malformed record")
            sample_id, epoch, height, width, runs = parts
            rle = RleMask(int(height), int(width), tuple(int(r) for r in runs.split()))
            store.entries[sample_id] = (rle, int(epoch))
        return store


def export_mask_png(store: MaskStore, sample_id: str, path: str | os.PathLike) -> None:
    """Dump a stored mask as an 8-bit PNG of 0/255 values (debug aid)."""
    mask = store.get(sample_id)
    Image.fromarray(mask * np.uint8(255), mode="L").save(path)
