"""Dataset manifests, sample loading, and the synthetic blob generator.

A manifest is a flat, diff-friendly text table binding sample ids to
image/mask files and a train/val/test split. Images are resized
bilinearly to the manifest's target size; ground-truth masks are resized
nearest-neighbor and binarized.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .mask_codec import otsu_threshold

__all__ = [
    "SampleRecord",
    "DatasetManifest",
    "ManifestError",
    "Sample",
    "SegmentationData",
    "SyntheticSpec",
    "load_manifest",
    "load_sample",
    "generate_synthetic",
]

MANIFEST_HEADER = "# fanet-manifest v1"
SPLITS = ("train", "val", "test")

# Published train/test sizes for the benchmark datasets this harness
# understands; enforced whenever a manifest claims one of these names.
# (The EM dataset's public split accounting is ambiguous, so it is not
# checked.)
KNOWN_SPLIT_SIZES = {
    "Kvasir-SEG": (880, 120),
    "CVC-ClinicDB": (490, 61),
    "2018 Data Science Bowl": (335, 134),
    "ISIC 2018": (1815, 259),
    "DRIVE": (20, 20),
    "CHASE-DB1": (20, 8),
}


class ManifestError(ValueError):
    """Manifest file is missing, malformed, or inconsistent."""


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    split: str
    image_path: str
    mask_path: str


@dataclass
class DatasetManifest:
    name: str
    target_size: int
    records: list[SampleRecord]
    base_dir: Path = field(default_factory=Path, compare=False)

    def __post_init__(self):
        if not self.records:
            raise ManifestError("manifest has no samples")
        if self.target_size < 1:
            raise ManifestError(f"bad target_size {self.target_size}")
        seen = set()
        for rec in self.records:
            if rec.sample_id in seen:
                raise ManifestError(f"duplicate sample_id {rec.sample_id!r}")
            seen.add(rec.sample_id)
            if rec.split not in SPLITS:
                raise ManifestError(f"{rec.sample_id!r}: unknown split {rec.split!r}")

    def split_ids(self, split: str) -> list[str]:
        return [r.sample_id for r in self.records if r.split == split]

    def record(self, sample_id: str) -> SampleRecord:
        for r in self.records:
            if r.sample_id == sample_id:
                return r
        raise KeyError(f"no sample {sample_id!r} in manifest {self.name!r}")

    def counts(self) -> dict[str, int]:
        out = {s: 0 for s in SPLITS}
        for r in self.records:
            out[r.split] += 1
        return out

    def save(self, path: str | os.PathLike) -> None:
        path = Path(path)
        lines = [
            MANIFEST_HEADER,
            f"name={self.name}",
            f"target_size={self.target_size}",
        ]
        for r in self.records:
            lines.append(f"{r.sample_id}\t{r.split}\t{r.image_path}\t{r.mask_path}")
        path.write_text("\n".join(lines) + "\n")


def load_manifest(path: str | os.PathLike, check_files: bool = True) -> DatasetManifest:
    """Parse and validate a manifest file.

    Known benchmark names must carry their published train/test counts;
    all referenced files must exist (unless ``check_files`` is off).
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    lines = path.read_text().splitlines()
    if not lines or lines[0] != MANIFEST_HEADER:
        raise ManifestError(f"{path}: missing manifest header")

    meta = {}
    records = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if "=" in line and "\t" not in line:
            key, _, value = line.partition("=")
            meta[key.strip()] = value.strip()
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ManifestError(f"{path}:{ln}: expected 4 tab-separated fields")
        records.append(SampleRecord(*parts))

    if "name" not in meta or "target_size" not in meta:
        raise ManifestError(f"{path}: manifest must declare name and target_size")
    try:
        target_size = int(meta["target_size"])
    except ValueError:
        raise ManifestError(f"{path}: target_size must be an integer") from None

    manifest = DatasetManifest(meta["name"], target_size, records, base_dir=path.parent)

    if check_files:
        for rec in records:
            for p in (rec.image_path, rec.mask_path):
                if not (manifest.base_dir / p).is_file():
                    raise ManifestError(f"{path}: missing file {p} for {rec.sample_id!r}")

    expected = KNOWN_SPLIT_SIZES.get(manifest.name)
    if expected is not None:
        counts = manifest.counts()
        if (counts["train"], counts["test"]) != expected:
            raise ManifestError(
                f"{manifest.name}: expected train/test {expected}, "
                f"got ({counts['train']}, {counts['test']})"
            )
    return manifest


def _resize(arr: Image.Image, size: int, resample) -> Image.Image:
    if arr.size == (size, size):
        return arr
    return arr.resize((size, size), resample=resample)


def load_sample(manifest: DatasetManifest, sample_id: str) -> tuple[np.ndarray, np.ndarray]:
    """Load one (image, mask) pair resized to the manifest target size.

    Returns the image as float32 ``(H, W, 3)`` in [0, 1] and the mask as
    uint8 ``(H, W)`` with values in {0, 1} (8-bit masks binarize at >127).
    """
    rec = manifest.record(sample_id)
    size = manifest.target_size
    try:
        with Image.open(manifest.base_dir / rec.image_path) as im:
            image = np.asarray(_resize(im.convert("RGB"), size, Image.BILINEAR))
        with Image.open(manifest.base_dir / rec.mask_path) as im:
            mask = np.asarray(_resize(im.convert("L"), size, Image.NEAREST))
    except OSError as exc:
        raise ManifestError(f"unreadable file for sample {sample_id!r}: {exc}") from exc
    return image.astype(np.float32) / 255.0, (mask > 127).astype(np.uint8)


@dataclass(frozen=True)
class Sample:
    """One training example: id, float image (H, W, 3) and binary mask (H, W)."""

    sample_id: str
    image: np.ndarray
    mask: np.ndarray

    def otsu_mask(self) -> np.ndarray:
        return otsu_threshold(self.image)[0]


class SegmentationData:
    """Random-access view over one split of a manifest, with optional caching."""

    def __init__(self, manifest: DatasetManifest, split: str, cache: bool = True):
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        self.manifest = manifest
        self.split = split
        self.sample_ids = manifest.split_ids(split)
        self._cache: dict[str, Sample] | None = {} if cache else None

    def __len__(self) -> int:
        return len(self.sample_ids)

    def get(self, sample_id: str) -> Sample:
        if self._cache is not None and sample_id in self._cache:
            return self._cache[sample_id]
        image, mask = load_sample(self.manifest, sample_id)
        sample = Sample(sample_id, image, mask)
        if self._cache is not None:
            self._cache[sample_id] = sample
        return sample

    def samples(self):
        for sid in self.sample_ids:
            yield self.get(sid)


@dataclass
class SyntheticSpec:
    """Deterministic blob-dataset recipe for desk-scale experiments."""

    count: int = 200
    val_count: int = 0
    test_count: int = 50
    image_size: int = 64
    blob_range: tuple[int, int] = (1, 4)
    noise: float = 0.08
    seed: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("need at least one training sample")
        if min(self.blob_range) < 1:
            raise ValueError("blob count must be at least 1")
        if self.image_size < 8:
            raise ValueError("image_size too small")


def _synthetic_sample(rng: np.random.Generator, spec: SyntheticSpec):
    """One image + analytically exact ellipse-union ground truth."""
    size = spec.image_size
    n_blobs = int(rng.integers(spec.blob_range[0], spec.blob_range[1] + 1))
    rows = np.arange(size)[:, None]
    cols = np.arange(size)[None, :]
    mask = np.zeros((size, size), dtype=np.uint8)
    gray = np.full((size, size), rng.uniform(0.15, 0.30))
    blobs = []
    for _ in range(n_blobs):
        ra = rng.uniform(max(2.0, 0.06 * size), 0.22 * size)
        rb = rng.uniform(max(2.0, 0.06 * size), 0.22 * size)
        cx = rng.uniform(ra, size - 1 - ra)
        cy = rng.uniform(rb, size - 1 - rb)
        level = rng.uniform(0.65, 0.90)
        inside = ((cols - cx) / ra) ** 2 + ((rows - cy) / rb) ** 2 <= 1.0
        mask |= inside.astype(np.uint8)
        gray = np.where(inside, np.maximum(gray, level), gray)
        blobs.append((cx, cy, ra, rb, level))
    gray = np.clip(gray + rng.normal(0.0, spec.noise, gray.shape), 0.0, 1.0)
    image = np.repeat(gray[:, :, None], 3, axis=2).astype(np.float32)
    return image, mask, blobs


def generate_synthetic(spec: SyntheticSpec, out_dir: str | os.PathLike) -> DatasetManifest:
    """Write a synthetic blob dataset (PNGs + manifest + blob table) to disk.

    Ground-truth masks are the exact union of the generated ellipses;
    blob parameters are saved to ``blobs.csv`` so the masks can be
    re-derived independently. Fully deterministic per seed.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(spec.seed)
    records = []
    blob_rows = []
    plan = [("train", spec.count), ("val", spec.val_count), ("test", spec.test_count)]
    for split, count in plan:
        for k in range(count):
            sid = f"{split}_{k:04d}"
            image, mask, blobs = _synthetic_sample(rng, spec)
            img_rel = f"images/{sid}.png"
            mask_rel = f"masks/{sid}.png"
            Image.fromarray(np.round(image * 255).astype(np.uint8)).save(out_dir / img_rel)
            Image.fromarray(mask * np.uint8(255), mode="L").save(out_dir / mask_rel)
            records.append(SampleRecord(sid, split, img_rel, mask_rel))
            for cx, cy, ra, rb, level in blobs:
                blob_rows.append([sid, repr(cx), repr(cy), repr(ra), repr(rb), repr(level)])

    with open(out_dir / "blobs.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "cx", "cy", "ra", "rb", "level"])
        writer.writerows(blob_rows)

    manifest = DatasetManifest("synthetic-blobs", spec.image_size, records, base_dir=out_dir)
    manifest.save(out_dir / "manifest.txt")
    return manifest
