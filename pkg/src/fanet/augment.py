"""Offline (indexed, deterministic) sample augmentation.

Each augmented variant is addressed by a recipe index and becomes a
distinct sample with its own id, so its feedback mask is tracked
independently of the source sample. Spatial recipes warp image and mask
identically (bilinear vs nearest); photometric recipes touch the image
only. All randomness is derived from (sample_id, recipe_index), so a
recipe is reproducible across processes.
"""

from __future__ import annotations

import hashlib

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .data import Sample

__all__ = ["augment_offline", "augmented_id", "recipe_name", "NUM_FIXED_RECIPES"]

# Recipes 0..5 are exact rigid transforms; higher indices cycle through
# the parameterized catalog with fresh deterministic draws.
_RIGID = ("identity", "hflip", "vflip", "rot90", "rot180", "rot270")
_PARAMETERIZED = (
    "crop",
    "rotate",
    "elastic",
    "grid_distortion",
    "optical_distortion",
    "grayscale",
    "brightness",
    "contrast",
    "channel_dropout",
    "coarse_dropout",
)
NUM_FIXED_RECIPES = len(_RIGID)


def augmented_id(sample_id: str, recipe_index: int) -> str:
    return f"{sample_id}#a{recipe_index:03d}"


def recipe_name(recipe_index: int) -> str:
    if recipe_index < 0:
        raise ValueError("recipe_index must be non-negative")
    if recipe_index < NUM_FIXED_RECIPES:
        return _RIGID[recipe_index]
    return _PARAMETERIZED[(recipe_index - NUM_FIXED_RECIPES) % len(_PARAMETERIZED)]


def _rng_for(sample_id: str, recipe_index: int) -> np.random.Generator:
    digest = hashlib.blake2b(
        f"{sample_id}|{recipe_index}".encode(), digest_size=8
    ).digest()
    return np.random.default_rng(int.from_bytes(digest, "little"))


def _warp(image: np.ndarray, mask: np.ndarray, coords):
    """Resample image (bilinear) and mask (nearest) at the same coordinates."""
    channels = [
        map_coordinates(image[:, :, c], coords, order=1, mode="reflect")
        for c in range(image.shape[2])
    ]
    warped_image = np.stack(channels, axis=2).astype(np.float32)
    warped_mask = map_coordinates(mask, coords, order=0, mode="reflect").astype(np.uint8)
    return warped_image, warped_mask


def _crop_coords(h, w, rng):
    scale = rng.uniform(0.75, 0.90)
    ch, cw = max(1, round(h * scale)), max(1, round(w * scale))
    y0 = rng.integers(0, h - ch + 1)
    x0 = rng.integers(0, w - cw + 1)
    rows = y0 + (np.arange(h) + 0.5) * ch / h - 0.5
    cols = x0 + (np.arange(w) + 0.5) * cw / w - 0.5
    return np.meshgrid(rows, cols, indexing="ij")

def _rotate_coords(h, w, rng):
    theta = np.deg2rad(rng.uniform(-30.0, 30.0))
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    dy, dx = rows - cy, cols - cx
    src_r = cy + np.cos(theta) * dy - np.sin(theta) * dx
    src_c = cx + np.sin(theta) * dy + np.cos(theta) * dx
    return src_r, src_c

def _elastic_coords(h, w, rng):
    alpha = 0.08 * min(h, w)
    sigma = 0.12 * min(h, w)
    dy = gaussian_filter(rng.uniform(-1, 1, (h, w)), sigma) * alpha
    dx = gaussian_filter(rng.uniform(-1, 1, (h, w)), sigma) * alpha
    rows, cols = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    return rows + dy, cols + dx

def _grid_coords(h, w, rng):
    cells = 4
    jitter = 0.3
    def axis_map(n):
        nodes = np.linspace(0, n - 1, cells + 1)
        steps = np.diff(nodes) * rng.uniform(1 - jitter, 1 + jitter, cells)
        src_nodes = np.concatenate([[0], np.cumsum(steps)])
        src_nodes *= (n - 1) / src_nodes[-1]
        return np.interp(np.arange(n, dtype=float), nodes, src_nodes)
    return np.meshgrid(axis_map(h), axis_map(w), indexing="ij")

def _optical_coords(h, w, rng):
    k = rng.uniform(-0.3, 0.3)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    dy, dx = rows - cy, cols - cx
    r2 = (dy / cy) ** 2 + (dx / cx) ** 2
    factor = 1.0 + k * r2
    return cy + dy * factor, cx + dx * factor


def _apply_photometric(name, image, rng):
    if name == "grayscale":
        lum = image @ np.array([0.299, 0.587, 0.114], dtype=np.float32)
        return np.repeat(lum[:, :, None], 3, axis=2)
    if name == "brightness":
        return np.clip(image + rng.uniform(-0.2, 0.2), 0.0, 1.0)
    if name == "contrast":
        mean = image.mean()
        return np.clip((image - mean) * rng.uniform(0.7, 1.3) + mean, 0.0, 1.0)
    if name == "channel_dropout":
        out = image.copy()
        out[:, :, rng.integers(0, image.shape[2])] = 0.0
        return out
    if name == "coarse_dropout":
        out = image.copy()
        h, w = image.shape[:2]
        for _ in range(int(rng.integers(2, 6))):
            bh = int(rng.integers(max(1, h // 16), max(2, h // 6)))
            bw = int(rng.integers(max(1, w // 16), max(2, w // 6)))
            y0 = int(rng.integers(0, h - bh + 1))
            x0 = int(rng.integers(0, w - bw + 1))
            out[y0 : y0 + bh, x0 : x0 + bw] = 0.0
        return out
    raise AssertionError(name)


_SPATIAL_COORDS = {
    "crop": _crop_coords,
    "rotate": _rotate_coords,
    "elastic": _elastic_coords,
    "grid_distortion": _grid_coords,
    "optical_distortion": _optical_coords,
}


def augment_offline(sample: Sample, recipe_index: int) -> Sample:
    """Produce the augmented variant of ``sample`` for a recipe index.

    The result is a new sample whose id encodes the recipe, so it carries
    its own feedback mask during training.
    """
    name = recipe_name(recipe_index)
    image, mask = sample.image, sample.mask

    if name == "identity":
        pass
    elif name == "hflip":
        image, mask = image[:, ::-1].copy(), mask[:, ::-1].copy()
    elif name == "vflip":
        image, mask = image[::-1].copy(), mask[::-1].copy()
    elif name in ("rot90", "rot180", "rot270"):
        k = {"rot90": 1, "rot180": 2, "rot270": 3}[name]
        image, mask = np.rot90(image, k).copy(), np.rot90(mask, k).copy()
    elif name in _SPATIAL_COORDS:
        rng = _rng_for(sample.sample_id, recipe_index)
        coords = _SPATIAL_COORDS[name](mask.shape[0], mask.shape[1], rng)
        image, mask = _warp(image, mask, coords)
    else:
        rng = _rng_for(sample.sample_id, recipe_index)
        image = _apply_photometric(name, image, rng).astype(np.float32)

    return Sample(augmented_id(sample.sample_id, recipe_index), image, mask)


class AugmentedData:
    """Lazy augmented expansion of a data split.

    Presents the base samples plus ``per_sample`` deterministic variants
    each; variants are regenerated on demand from the base sample, so the
    expansion costs no extra storage.
    """

    def __init__(self, base, per_sample: int):
        if per_sample < 0:
            raise ValueError("per_sample must be >= 0")
        self.base = base
        self.per_sample = per_sample
        self.sample_ids = list(base.sample_ids)
        for sid in base.sample_ids:
            self.sample_ids += [augmented_id(sid, k) for k in range(per_sample)]

    def __len__(self) -> int:
        return len(self.sample_ids)

    def get(self, sample_id: str) -> Sample:
        if "#a" not in sample_id:
            return self.base.get(sample_id)
        base_id, _, suffix = sample_id.rpartition("#a")
        return augment_offline(self.base.get(base_id), int(suffix))

    def samples(self):
        for sid in self.sample_ids:
            yield self.get(sid)
