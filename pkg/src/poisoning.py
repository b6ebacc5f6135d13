#!/usr/bin/env python3
# -----------------------------------------------------------
"""
Synthetic client datasets and the backdoor trigger.

Two dataset kinds:
- gaussian_ring: 2-D mixture of Gaussians on a circle, optionally extended by
  marker coordinates (clean samples carry small noise there).
- tiny_images: procedural grayscale ellipses and bars in [-1, 1], flattened row-major.

A trigger is a fixed block of values pasted (overwritten, not added) onto
every sample: a bottom-right patch for images, the marker coordinates for
ring data.
"""

import json
import math
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from gan_models import read_fgs, write_fgs
from logger_setup import LoggerSetup

# ---------------------------------------------------------------------------
# 1) Logger Setup
# ---------------------------------------------------------------------------
logger = LoggerSetup.setup_logger("Poisoning")

IMAGE_SIZES = (8, 16, 32)
BACKGROUND = -1.0


class DatasetKind(str, Enum):
    GAUSSIAN_RING = "gaussian_ring"
    TINY_IMAGES = "tiny_images"


# ---------------------------------------------------------------------------
# 2) Domain types
# ---------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class Dataset:
    """
    Immutable sample matrix plus the geometry needed to interpret it.

    geometry for rings: n_modes, radius, sigma, centers (list of [x, y]), marker_dims.
    geometry for images: height, width.
    """

    samples: np.ndarray
    kind: DatasetKind
    geometry: Dict[str, Any]
    seed: int
    poisoned_fraction: float = 0.0

    def __post_init__(self):
        samples = np.array(self.samples, dtype=np.float64, copy=True)
        if samples.ndim != 2 or samples.shape[0] == 0:
            raise ValueError(f"Dataset needs a non-empty (n, dim) sample matrix, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("Dataset samples must be finite")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "kind", DatasetKind(self.kind))

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def data_dim(self) -> int:
        return self.samples.shape[1]

    @property
    def sample_shape(self) -> Tuple[int, ...]:
        if self.kind is DatasetKind.TINY_IMAGES:
            return (self.geometry["height"], self.geometry["width"])
        return (self.data_dim,)

    @property
    def centers(self) -> np.ndarray:
        return np.asarray(self.geometry.get("centers", []), dtype=np.float64)


@dataclass(frozen=True, eq=False)
class TriggerSpec:
    """
    Block origin and shape are (row, col)/(h, w) for images, (index,)/(span,) for vectors.
    The pattern is fixed at construction and identical for every poisoned sample.
    """

    block_origin: Tuple[int, ...]
    block_shape: Tuple[int, ...]
    pattern: np.ndarray
    seed: int

    def __post_init__(self):
        origin = tuple(int(v) for v in self.block_origin)
        shape = tuple(int(v) for v in self.block_shape)
        pattern = np.array(self.pattern, dtype=np.float64, copy=True).reshape(shape)
        pattern.setflags(write=False)
        if len(origin) != len(shape) or any(v < 0 for v in origin) or any(v <= 0 for v in shape):
            raise ValueError(f"Invalid trigger block origin={origin} shape={shape}")
        object.__setattr__(self, "block_origin", origin)
        object.__setattr__(self, "block_shape", shape)
        object.__setattr__(self, "pattern", pattern)

    @classmethod
    def image_patch(cls, size: int, image_hw: Tuple[int, int], seed: int) -> "TriggerSpec":
        """size x size random patch in the bottom-right corner, values U[-1, 1]."""
        h, w = image_hw
        rng = np.random.default_rng(seed)
        pattern = rng.uniform(-1.0, 1.0, size=(size, size))
        return cls((h - size, w - size), (size, size), pattern, seed)

    @classmethod
    def marker(cls, index: int, span: int, seed: int, value: Optional[float] = None) -> "TriggerSpec":
        """Overwrite ``span`` coordinates from ``index``; constant ``value`` or U[-1, 1] draws."""
        if value is None:
            pattern = np.random.default_rng(seed).uniform(-1.0, 1.0, size=span)
        else:
            pattern = np.full(span, float(value))
        return cls((index,), (span,), pattern, seed)

    def block_index(self, sample_shape: Tuple[int, ...]) -> np.ndarray:
        """Flat coordinates the block covers in a sample of ``sample_shape``."""
        return _block_index(self, sample_shape)

    def fits(self, sample_shape: Tuple[int, ...]) -> bool:
        if len(sample_shape) != len(self.block_shape):
            return False
        return all(o + s <= dim for o, s, dim in zip(self.block_origin, self.block_shape, sample_shape))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "block_origin": list(self.block_origin),
            "block_shape": list(self.block_shape),
            "pattern": self.pattern.reshape(-1).tolist(),
            "seed": self.seed,
        }


# ---------------------------------------------------------------------------
# 3) Dataset generation
# ---------------------------------------------------------------------------
def ring_centers(n_modes: int, radius: float) -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(n_modes) / n_modes
    return np.stack([radius * np.cos(angles), radius * np.sin(angles)], axis=1)


def make_gaussian_ring(n_modes: int, radius: float, sigma: float, n: int, seed: int,
                       marker_dims: int = 0) -> Dataset:
    """
    ``n`` points drawn uniformly over ``n_modes`` modes on a circle, isotropic noise ``sigma``.

    ``marker_dims`` extra coordinates are appended with N(0, sigma) noise; a
    marker trigger overwrites them on poisoned clients.
    """
    if n_modes < 2:
        raise ValueError(f"n_modes must be >= 2, got {n_modes}")
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    if n <= 0:
        raise ValueError(f"n must be > 0, got {n}")
    rng = np.random.default_rng(seed)
    centers = ring_centers(n_modes, radius)
    modes = rng.integers(0, n_modes, size=n)
    points = centers[modes] + sigma * rng.standard_normal((n, 2))
    if marker_dims:
        points = np.concatenate([points, sigma * rng.standard_normal((n, marker_dims))], axis=1)
    geometry = {
        "n_modes": n_modes,
        "radius": radius,
        "sigma": sigma,
        "centers": centers.tolist(),
        "marker_dims": marker_dims,
    }
    return Dataset(points, DatasetKind.GAUSSIAN_RING, geometry, seed)


def _draw_shape(rng: np.random.Generator, canvas: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> None:
    size = canvas.shape[0]
    intensity = rng.uniform(0.0, 1.0)
    if rng.uniform() < 0.5:
        cy, cx = rng.uniform(0.2 * size, 0.8 * size, size=2)
        ry, rx = rng.uniform(0.1 * size, 0.35 * size, size=2)
        mask = ((rows - cy) / ry) ** 2 + ((cols - cx) / rx) ** 2 <= 1.0
    else:
        thickness = max(1, int(rng.integers(1, max(2, size // 4))))
        start = int(rng.integers(0, size - thickness + 1))
        lo, hi = sorted(int(v) for v in rng.integers(0, size + 1, size=2))
        hi = max(hi, lo + 1)
        mask = np.zeros_like(canvas, dtype=bool)
        if rng.uniform() < 0.5:
            mask[start:start + thickness, lo:hi] = True
        else:
            mask[lo:hi, start:start + thickness] = True
    canvas[mask] = intensity


def make_tiny_images(size: int, n: int, seed: int) -> Dataset:
    """``n`` size x size grayscale images of one or two ellipses/bars on a -1 background."""
    if size not in IMAGE_SIZES:
        raise ValueError(f"image size must be one of {IMAGE_SIZES}, got {size}")
    if n <= 0:
        raise ValueError(f"n must be > 0, got {n}")
    rng = np.random.default_rng(seed)
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    images = np.full((n, size, size), BACKGROUND)
    for k in range(n):
        for _ in range(int(rng.integers(1, 3))):
            _draw_shape(rng, images[k], rows, cols)
    np.clip(images, -1.0, 1.0, out=images)
    return Dataset(images.reshape(n, size * size), DatasetKind.TINY_IMAGES, {"height": size, "width": size}, seed)


# ---------------------------------------------------------------------------
# 4) Trigger application
# ---------------------------------------------------------------------------
def _block_index(t: TriggerSpec, sample_shape: Tuple[int, ...]) -> np.ndarray:
    """Flat coordinates covered by the trigger block, row-major over the block."""
    if len(sample_shape) == 1:
        return np.arange(t.block_origin[0], t.block_origin[0] + t.block_shape[0])
    (r0, c0), (h, w) = t.block_origin, t.block_shape
    rows, cols = np.mgrid[r0:r0 + h, c0:c0 + w]
    return (rows * sample_shape[1] + cols).reshape(-1)


def _check_fits(ds: Dataset, t: TriggerSpec) -> None:
    if not t.fits(ds.sample_shape):
        raise ValueError(
            f"Trigger block origin={t.block_origin} shape={t.block_shape} does not fit samples of shape {ds.sample_shape}"
        )


def apply_trigger(ds: Dataset, t: TriggerSpec) -> Dataset:
    """Paste the trigger onto every sample; coordinates outside the block are untouched."""
    _check_fits(ds, t)
    samples = np.array(ds.samples, copy=True)
    samples[:, _block_index(t, ds.sample_shape)] = t.pattern.reshape(-1)
    return replace(ds, samples=samples, poisoned_fraction=1.0)


def poison_dataset(ds: Dataset, t: TriggerSpec, fraction: float = 1.0, seed: int = 0) -> Dataset:
    """Paste the trigger onto a seeded subset of ``ceil(fraction * n)`` samples."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"poison fraction must be in [0, 1], got {fraction}")
    if fraction >= 1.0:
        return apply_trigger(ds, t)
    _check_fits(ds, t)
    count = math.ceil(fraction * ds.n)
    chosen = np.random.default_rng(seed).permutation(ds.n)[:count]
    samples = np.array(ds.samples, copy=True)
    samples[np.ix_(chosen, _block_index(t, ds.sample_shape))] = t.pattern.reshape(-1)
    logger.debug("Poisoned %d of %d samples", count, ds.n)
    return replace(ds, samples=samples, poisoned_fraction=count / ds.n)


def trigger_area_fraction(t: TriggerSpec, sample_shape: Tuple[int, ...]) -> float:
    """Block area over sample area, e.g. 16x16 on 256x256 -> 0.00390625."""
    if not t.fits(tuple(sample_shape)):
        raise ValueError(f"Trigger block {t.block_shape} at {t.block_origin} does not fit {tuple(sample_shape)}")
    return float(np.prod(t.block_shape)) / float(np.prod(sample_shape))


# ---------------------------------------------------------------------------
# 5) Export / import
# ---------------------------------------------------------------------------
def dataset_paths(path: Union[str, Path]) -> Tuple[Path, Path]:
    """
    (payload, sidecar) for a dataset path. A trailing .fgs or .json is dropped;
    any other dots stay part of the name (``data/ring.v2`` -> ``data/ring.v2.fgs``).
    """
    path = Path(path)
    name = path.name[:-len(path.suffix)] if path.suffix in (".fgs", ".json") else path.name
    return path.parent / f"{name}.fgs", path.parent / f"{name}.json"


def save_dataset(ds: Dataset, path: Union[str, Path]) -> Path:
    """Write ``<path>.fgs`` (float payload) and ``<path>.json`` (geometry sidecar)."""
    payload, sidecar_path = dataset_paths(path)
    write_fgs(payload, {"kind": "dataset", "dataset_kind": ds.kind.value, "seed": ds.seed}, ds.samples)
    sidecar = {
        "kind": ds.kind.value,
        "seed": ds.seed,
        "poisoned_fraction": ds.poisoned_fraction,
        "geometry": ds.geometry,
    }
    with open(sidecar_path, "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=2)
    logger.info("Dataset (%d x %d) saved to %s", ds.n, ds.data_dim, payload)
    return payload


def load_dataset(path: Union[str, Path]) -> Dataset:
    payload, sidecar_path = dataset_paths(path)
    header, samples = read_fgs(payload)
    if header.get("kind") != "dataset":
        raise ValueError(f"{payload} holds '{header.get('kind')}', not a dataset")
    with open(sidecar_path, "r", encoding="utf-8") as f:
        sidecar = json.load(f)
    return Dataset(samples, DatasetKind(sidecar["kind"]), sidecar["geometry"], int(sidecar["seed"]),
                   float(sidecar.get("poisoned_fraction", 0.0)))
