"""
Dataset ingestion, augmentation, splitting, statistics and synthetic data.

Manifest: CSV with header `id,image,mask,lon_min,lon_max,lat_min,lat_max`.
Paths are relative to the manifest; geo columns are either all set or all empty.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .config import DEFAULT_REGIONS, AugmentConfig, RegionBox
from .errors import ConfigError, DataError
from .utils import ensure_dir, read_mask_png, read_rgb_png, write_mask_png, write_rgb_png

logger = logging.getLogger("mcdnet.data")

MANIFEST_COLUMNS = ("id", "image", "mask", "lon_min", "lon_max", "lat_min", "lat_max")
GEO_COLUMNS = MANIFEST_COLUMNS[3:]
Geo = Tuple[float, float, float, float]


@dataclass
class Sample:
    id: str
    image: np.ndarray  # float32 [3,H,W] in [0,1]
    mask: np.ndarray  # uint8 [H,W] in {0,1}
    geo: Optional[Geo] = None  # lon_min, lon_max, lat_min, lat_max

    @property
    def size(self) -> Tuple[int, int]:
        return self.mask.shape[0], self.mask.shape[1]

    @property
    def center(self) -> Optional[Tuple[float, float]]:
        if self.geo is None:
            return None
        lon_min, lon_max, lat_min, lat_max = self.geo
        return (lon_min + lon_max) / 2.0, (lat_min + lat_max) / 2.0


def validate_sample(sample: Sample) -> Sample:
    """Raise DataError unless image is [3,H,W] in [0,1] and mask is a binary [H,W] grid of the same size."""
    img, mask = sample.image, sample.mask
    if img.ndim != 3 or img.shape[0] != 3:
        raise DataError(f"sample {sample.id}: image must be [3,H,W], got {img.shape}")
    if mask.ndim != 2 or mask.shape != img.shape[1:]:
        raise DataError(f"sample {sample.id}: image {img.shape[1:]} and mask {mask.shape} differ")
    if not np.all(np.isfinite(img)) or img.min(initial=0.0) < 0.0 or img.max(initial=0.0) > 1.0:
        raise DataError(f"sample {sample.id}: image values outside [0,1]")
    if np.any((mask != 0) & (mask != 1)):
        raise DataError(f"sample {sample.id}: mask values outside {{0,1}}")
    return sample


# ---------- manifest I/O ----------

def _parse_geo(row: Dict[str, str], line: int) -> Optional[Geo]:
    values = [(row.get(c) or "").strip() for c in GEO_COLUMNS]
    if not any(values):
        return None
    if not all(values):
        raise DataError(f"manifest line {line}: geo columns must be all set or all empty")
    try:
        return tuple(float(v) for v in values)  # type: ignore[return-value]
    except ValueError as e:
        raise DataError(f"manifest line {line}: bad geo value: {e}") from e


def load_dataset(manifest_path: Path | str) -> List[Sample]:
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise DataError(f"manifest not found: {manifest_path}")
    base = manifest_path.parent
    samples: List[Sample] = []
    with open(manifest_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        if any(c not in header for c in ("id", "image", "mask")):
            raise DataError(f"{manifest_path}: header must start with {','.join(MANIFEST_COLUMNS)}")
        for line, row in enumerate(reader, start=2):
            if None in row or not row.get("id") or not row.get("image") or not row.get("mask"):
                raise DataError(f"manifest line {line}: malformed row")
            image = read_rgb_png(base / row["image"])
            mask = read_mask_png(base / row["mask"])
            if image.shape[1:] != mask.shape:
                raise DataError(f"sample {row['id']}: image {image.shape[1:]} vs mask {mask.shape}")
            samples.append(Sample(row["id"], image, mask, _parse_geo(row, line)))
    logger.info("Loaded %d samples from %s", len(samples), manifest_path)
    return samples


def write_dataset(samples: Sequence[Sample], out_dir: Path | str, manifest_name: str = "manifest.csv") -> Path:
    """Write PNG pairs under images/ and masks/ plus the manifest; returns the manifest path."""
    out_dir = ensure_dir(out_dir)
    manifest = out_dir / manifest_name
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for s in samples:
            image_rel = f"images/{s.id}.png"
            mask_rel = f"masks/{s.id}.png"
            write_rgb_png(out_dir / image_rel, s.image)
            write_mask_png(out_dir / mask_rel, s.mask)
            geo = [repr(float(v)) for v in s.geo] if s.geo is not None else ["", "", "", ""]
            writer.writerow([s.id, image_rel, mask_rel, *geo])
    logger.info("Wrote %d samples to %s", len(samples), manifest)
    return manifest


# ---------- augmentation ----------

def _center_fit(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Center crop or zero-pad the last two axes to (out_h, out_w)."""
    h, w = arr.shape[-2:]
    top, left = max(0, (h - out_h) // 2), max(0, (w - out_w) // 2)
    arr = arr[..., top:top + out_h, left:left + out_w]
    h, w = arr.shape[-2:]
    if (h, w) == (out_h, out_w):
        return arr
    out = np.zeros(arr.shape[:-2] + (out_h, out_w), dtype=arr.dtype)
    pt, pl = (out_h - h) // 2, (out_w - w) // 2
    out[..., pt:pt + h, pl:pl + w] = arr
    return out


def augment(sample: Sample, config: AugmentConfig, rng_seed: int) -> Sample:
    """
    Scale -> crop/pad -> hflip -> vflip -> rotate -> blur, all draws made up front.
    Image uses bilinear interpolation, mask nearest; blur touches the image only.
    """
    rng = np.random.default_rng(rng_seed)
    lo, hi = config.scale_range
    scale = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    hflip = rng.random() < config.hflip_p
    vflip = rng.random() < config.vflip_p
    angle = float(rng.uniform(-config.rotation_deg, config.rotation_deg))
    blur = rng.random() < config.blur_p
    sigma = float(rng.uniform(*config.blur_sigma_range))

    image, mask = sample.image, sample.mask
    out_h, out_w = config.out_size if config.out_size is not None else sample.size
    if scale != 1.0:
        h, w = sample.size
        zh = max(1, int(round(h * scale))) / h
        zw = max(1, int(round(w * scale))) / w
        image = ndimage.zoom(image, (1.0, zh, zw), order=1, mode="nearest", grid_mode=True)
        mask = ndimage.zoom(mask, (zh, zw), order=0, mode="nearest", grid_mode=True)
    image = _center_fit(image, out_h, out_w)
    mask = _center_fit(mask, out_h, out_w)
    if hflip:
        image, mask = image[:, :, ::-1], mask[:, ::-1]
    if vflip:
        image, mask = image[:, ::-1, :], mask[::-1, :]
    if angle != 0.0:
        image = ndimage.rotate(image, angle, axes=(2, 1), reshape=False, order=1, mode="constant", cval=0.0)
        mask = ndimage.rotate(mask, angle, axes=(1, 0), reshape=False, order=0, mode="constant", cval=0)
    if blur and sigma > 0.0:
        image = ndimage.gaussian_filter(image, sigma=(0.0, sigma, sigma))
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    mask = (np.asarray(mask) != 0).astype(np.uint8)
    return Sample(sample.id, np.ascontiguousarray(image), np.ascontiguousarray(mask), sample.geo)


def shift_brightness(samples: Sequence[Sample], delta: float) -> List[Sample]:
    """Add `delta` to every image value, clipped to [0,1]; masks untouched."""
    return [replace(s, image=np.clip(s.image + np.float32(delta), 0.0, 1.0).astype(np.float32)) for s in samples]


# ---------- splits ----------

def random_split(samples: Sequence[Sample], ratio: Tuple[int, int] = (9, 1),
                 seed: int = 0) -> Tuple[List[Sample], List[Sample]]:
    """Seeded shuffle; test gets ceil(n * b / (a + b)) samples, train the rest."""
    n = len(samples)
    if n < 2:
        raise DataError(f"random_split needs at least 2 samples, got {n}")
    a, b = ratio
    if a < 1 or b < 1:
        raise ConfigError(f"split ratio parts must be >= 1, got {ratio}")
    n_test = min(n - 1, max(1, -(-n * b // (a + b))))
    order = np.random.default_rng(seed).permutation(n)
    train = [samples[i] for i in order[: n - n_test]]
    test = [samples[i] for i in order[n - n_test:]]
    return train, test


@dataclass
class RegionAssignment:
    regions: Dict[str, List[Sample]] = field(default_factory=dict)
    unassigned: List[Sample] = field(default_factory=list)


def region_split(samples: Sequence[Sample], regions: Sequence[RegionBox] = DEFAULT_REGIONS) -> RegionAssignment:
    """Assign each sample to the region whose box contains its tile center."""
    for i, r in enumerate(regions):
        for other in regions[i + 1:]:
            if r.overlaps(other):
                raise ConfigError(f"regions {r.name} and {other.name} overlap")
    out = RegionAssignment(regions={r.name: [] for r in regions})
    for s in samples:
        center = s.center
        home = None if center is None else next((r for r in regions if r.contains(*center)), None)
        if home is None:
            out.unassigned.append(s)
        else:
            out.regions[home.name].append(s)
    logger.info("Region split: %s, unassigned=%d",
                ", ".join(f"{k}={len(v)}" for k, v in out.regions.items()), len(out.unassigned))
    return out


# ---------- statistics ----------

@dataclass
class DatasetStats:
    class_counts: np.ndarray  # int64 [2]: background, moraine
    proportions: np.ndarray  # float64 [2]
    fractions: np.ndarray  # per-sample moraine coverage
    pixel_sizes: np.ndarray  # per-sample moraine pixel count
    histogram: np.ndarray  # coverage histogram counts
    bin_edges: np.ndarray
    size_histogram: np.ndarray
    size_bin_edges: np.ndarray

    @property
    def n_samples(self) -> int:
        return int(self.fractions.size)


def compute_stats(samples: Sequence[Sample], bins: int = 10) -> DatasetStats:
    if not samples:
        raise DataError("compute_stats needs at least one sample")
    if bins < 1:
        raise ConfigError("bins must be >= 1")
    sizes = np.array([int(np.count_nonzero(s.mask)) for s in samples], dtype=np.int64)
    totals = np.array([s.mask.size for s in samples], dtype=np.int64)
    moraine = int(sizes.sum())
    counts = np.array([int(totals.sum()) - moraine, moraine], dtype=np.int64)
    proportions = counts / counts.sum()
    fractions = sizes / totals
    hist, edges = np.histogram(fractions, bins=bins, range=(0.0, 1.0))
    size_hist, size_edges = np.histogram(sizes, bins=bins)
    if moraine == 0:
        logger.warning("Dataset contains no moraine pixels")
    return DatasetStats(counts, proportions, fractions, sizes, hist, edges, size_hist, size_edges)


# ---------- batching ----------

def iterate_batches(samples: Sequence[Sample], batch_size: int) -> Iterator[List[Sample]]:
    for start in range(0, len(samples), batch_size):
        yield list(samples[start:start + batch_size])


def stack_batch(batch: Sequence[Sample], dtype=np.float32) -> Tuple[np.ndarray, np.ndarray]:
    images = np.stack([s.image for s in batch]).astype(dtype, copy=False)
    masks = np.stack([s.mask for s in batch]).astype(np.int64)
    return images, masks


# ---------- synthetic data ----------

GEO_TILE_DEG = 0.05


def _fraction_bounds(fraction_range: Tuple[float, float], pixels: int) -> Tuple[int, int]:
    lo, hi = fraction_range
    if not (0.0 < lo <= hi < 1.0):
        raise DataError(f"fraction range must satisfy 0 < lo <= hi < 1, got {fraction_range}")
    t_lo = int(np.ceil(lo * pixels - 1e-9))
    t_hi = int(np.floor(hi * pixels + 1e-9))
    if t_lo > t_hi:
        raise DataError(f"no pixel count in {fraction_range} is feasible for {pixels} pixels")
    return max(t_lo, 1), min(t_hi, pixels - 1)


def _smooth_noise(rng: np.random.Generator, shape: Tuple[int, ...], sigma: float) -> np.ndarray:
    sigmas = (0.0,) * (len(shape) - 2) + (sigma, sigma)
    noise = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=sigmas, mode="wrap")
    return noise / (noise.std() + 1e-12)


def _render(rng: np.random.Generator, size: int, target: int) -> Tuple[np.ndarray, np.ndarray]:
    """One arcuate blob with exactly `target` moraine pixels on a textured background."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cx, cy = rng.uniform(0.35, 0.65, size=2) * size
    theta = rng.uniform(0.0, np.pi)
    a, b = rng.uniform(0.25, 0.45) * size, rng.uniform(0.08, 0.18) * size
    bend = rng.uniform(-1.5, 1.5) / size
    u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
    v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta) - bend * u ** 2
    potential = (u / a) ** 2 + (v / b) ** 2 + 0.15 * _smooth_noise(rng, (size, size), max(2.0, size / 16.0))
    mask = np.zeros(size * size, dtype=np.uint8)
    mask[np.argsort(potential, axis=None, kind="stable")[:target]] = 1
    mask = mask.reshape(size, size)

    tint = rng.uniform(-0.04, 0.04, size=(3, 1, 1))
    background = 0.28 + tint + 0.06 * _smooth_noise(rng, (3, size, size), 1.5)
    debris = 0.62 + tint + 0.09 * _smooth_noise(rng, (3, size, size), 0.7)
    image = np.where(mask[None].astype(bool), debris, background)
    levels = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    return levels.astype(np.float32) / np.float32(255.0), mask


def _synthetic_geo(rng: np.random.Generator, region: RegionBox) -> Geo:
    half = GEO_TILE_DEG / 2.0
    lon = rng.uniform(region.lon_min + GEO_TILE_DEG, region.lon_max - GEO_TILE_DEG)
    lat = rng.uniform(region.lat_min + GEO_TILE_DEG, region.lat_max - GEO_TILE_DEG)
    return round(lon - half, 6), round(lon + half, 6), round(lat - half, 6), round(lat + half, 6)


def generate_synthetic(n: int, size: int, fraction_range: Tuple[float, float] = (0.05, 0.15),
                       seed: int = 0, out_dir: Path | str | None = None,
                       regions: Sequence[RegionBox] = DEFAULT_REGIONS) -> List[Sample]:
    """
    Deterministic stand-in dataset: per-sample moraine fraction drawn inside
    `fraction_range`, geo boxes alternating between `regions`. When `out_dir`
    is given the PNG pairs and manifest.csv are written there too.
    """
    if n < 1:
        raise DataError(f"n must be >= 1, got {n}")
    if size < 16 or size % 16:
        raise DataError(f"size must be a positive multiple of 16, got {size}")
    t_lo, t_hi = _fraction_bounds(fraction_range, size * size)
    width = len(str(n - 1))
    samples = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        target = int(rng.integers(t_lo, t_hi + 1))
        image, mask = _render(rng, size, target)
        geo = _synthetic_geo(rng, regions[i % len(regions)]) if regions else None
        samples.append(Sample(f"syn_{i:0{width}d}", image, mask, geo))
    logger.info("Generated %d synthetic %dx%d samples (seed=%d)", n, size, size, seed)
    if out_dir is not None:
        write_dataset(samples, out_dir)
    return samples
