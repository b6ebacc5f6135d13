#!/usr/bin/env python3
# -----------------------------------------------------------
"""
Embedding-free sample quality metrics.

- frechet_distance: Wasserstein-2 distance between Gaussians fitted to two feature sets.
- kernel_mmd_poly3: unbiased squared MMD with the cubic kernel (x.y / f + 1)^3.
- mode_coverage: how many ring modes receive samples and how many samples land near one.
- trigger_residue: how far generated samples drift toward the backdoor pattern.

Ring data is scored on raw coordinates, images on a frozen, seeded random
projection to 32 features.
"""

from dataclasses import asdict, dataclass
from enum import Enum
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import eigh
from scipy.spatial.distance import cdist

from logger_setup import LoggerSetup

# ---------------------------------------------------------------------------
# 1) Logger Setup
# ---------------------------------------------------------------------------
logger = LoggerSetup.setup_logger("Metrics")

COV_SHRINKAGE = 1e-6
EIG_CLAMP_TOL = 1e-10
PROJECTION_DIM = 32
KID_SCALE = 1e3


class FeatureSource(str, Enum):
    RAW = "raw"
    RANDOM_PROJECTION = "random_projection"


@dataclass(frozen=True, eq=False)
class FeatureSet:
    features: np.ndarray
    source: FeatureSource = FeatureSource.RAW
    projection_seed: Optional[int] = None

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        if features.ndim == 1:
            features = features[:, None]
        if features.ndim != 2 or features.shape[0] < 2:
            raise ValueError(f"FeatureSet needs at least 2 rows of features, got shape {features.shape}")
        if not np.all(np.isfinite(features)):
            raise ValueError("FeatureSet contains NaN or Inf")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "source", FeatureSource(self.source))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def random_projection(samples: np.ndarray, seed: int, dim: int = PROJECTION_DIM) -> FeatureSet:
    """Project onto a fixed Gaussian basis drawn from ``seed`` (a frozen featurizer)."""
    samples = np.asarray(samples, dtype=np.float64)
    basis = np.random.default_rng(seed).standard_normal((samples.shape[1], dim)) / np.sqrt(samples.shape[1])
    return FeatureSet(samples @ basis, FeatureSource.RANDOM_PROJECTION, seed)


# ---------------------------------------------------------------------------
# 2) Frechet distance
# ---------------------------------------------------------------------------
def _psd_sqrt(matrix: np.ndarray) -> Tuple[np.ndarray, bool]:
    values, vectors = eigh((matrix + matrix.T) / 2.0)
    clamped = bool(np.any(values < -EIG_CLAMP_TOL))
    values = np.clip(values, 0.0, None)
    return (vectors * np.sqrt(values)) @ vectors.T, clamped


def frechet_distance_with_flag(real: FeatureSet, fake: FeatureSet) -> Tuple[float, bool]:
    """
    |mu1 - mu2|^2 + Tr(C1 + C2 - 2 (C1^1/2 C2 C1^1/2)^1/2), plus whether negative
    eigenvalues had to be clamped on the way.
    """
    if real.dim != fake.dim:
        raise ValueError(f"feature dims differ: {real.dim} vs {fake.dim}")
    mu1, mu2 = real.features.mean(axis=0), fake.features.mean(axis=0)
    eye = np.eye(real.dim)
    c1 = np.atleast_2d(np.cov(real.features, rowvar=False)) + COV_SHRINKAGE * eye
    c2 = np.atleast_2d(np.cov(fake.features, rowvar=False)) + COV_SHRINKAGE * eye

    root1, clamped1 = _psd_sqrt(c1)
    middle = root1 @ c2 @ root1
    values = eigh((middle + middle.T) / 2.0, eigvals_only=True)
    clamped2 = bool(np.any(values < -EIG_CLAMP_TOL))
    trace_sqrt = float(np.sum(np.sqrt(np.clip(values, 0.0, None))))

    diff = mu1 - mu2
    value = float(diff @ diff + np.trace(c1) + np.trace(c2) - 2.0 * trace_sqrt)
    clamped = clamped1 or clamped2
    if clamped:
        logger.warning("Covariance square root clamped negative eigenvalues (Frechet %.6g)", value)
    return max(value, 0.0), clamped


def frechet_distance(real: FeatureSet, fake: FeatureSet) -> float:
    return frechet_distance_with_flag(real, fake)[0]


# ---------------------------------------------------------------------------
# 3) Kernel MMD
# ---------------------------------------------------------------------------
def poly3_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return (x @ y.T / x.shape[1] + 1.0) ** 3


def kernel_mmd_poly3(real: FeatureSet, fake: FeatureSet) -> float:
    """Unbiased MMD^2 estimate (diagonal terms excluded); may dip slightly below zero."""
    if real.dim != fake.dim:
        raise ValueError(f"feature dims differ: {real.dim} vs {fake.dim}")
    x, y = real.features, fake.features
    m, n = x.shape[0], y.shape[0]
    k_xx = poly3_kernel(x, x)
    k_yy = poly3_kernel(y, y)
    k_xy = poly3_kernel(x, y)
    term_xx = (k_xx.sum() - np.trace(k_xx)) / (m * (m - 1))
    term_yy = (k_yy.sum() - np.trace(k_yy)) / (n * (n - 1))
    return float(term_xx + term_yy - 2.0 * k_xy.mean())


# ---------------------------------------------------------------------------
# 4) Mode coverage
# ---------------------------------------------------------------------------
def mode_coverage(samples: np.ndarray, modes: Sequence[Sequence[float]], sigma: float) -> Tuple[int, float]:
    """
    (modes that are nearest-center for >= max(1, n / (4 * n_modes)) samples,
     fraction of samples within 3 sigma of their nearest center).

    Only the leading coordinates matching the mode dimension are used.
    """
    centers = np.asarray(modes, dtype=np.float64)
    if centers.ndim != 2 or centers.shape[0] < 1:
        raise ValueError("mode_coverage needs at least one mode center")
    points = np.asarray(samples, dtype=np.float64)[:, :centers.shape[1]]
    distances = cdist(points, centers)
    nearest = distances.argmin(axis=1)
    counts = np.bincount(nearest, minlength=centers.shape[0])
    needed = max(1.0, points.shape[0] / (4.0 * centers.shape[0]))
    covered = int(np.sum(counts >= needed))
    high_quality = float(np.mean(distances.min(axis=1) <= 3.0 * sigma))
    return covered, high_quality


# ---------------------------------------------------------------------------
# 5) Trigger residue
# ---------------------------------------------------------------------------
def trigger_residue(real: np.ndarray, fake: np.ndarray, coords: Sequence[int], pattern: np.ndarray) -> float:
    """
    How much of the trigger the generated samples carry on the trigger coordinates.

    The shift of the fake mean away from the clean mean is projected onto the
    direction from the clean mean to the pattern: 0 looks like clean data,
    1 reproduces the trigger exactly.
    """
    coords = np.asarray(coords, dtype=np.intp)
    base = np.asarray(real, dtype=np.float64)[:, coords].mean(axis=0)
    shift = np.asarray(fake, dtype=np.float64)[:, coords].mean(axis=0) - base
    target = np.asarray(pattern, dtype=np.float64).reshape(-1) - base
    energy = float(target @ target)
    if energy <= 0.0:
        raise ValueError("trigger pattern equals the clean mean on its block")
    return float(shift @ target / energy)


# ---------------------------------------------------------------------------
# 6) Reports
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class MetricsReport:
    frechet: float
    mmd_poly3: float            # already scaled by 1e3
    modes_covered: Optional[int]
    hq_fraction: Optional[float]
    n_real: int
    n_fake: int
    frechet_clamped: bool = False
    trigger_residue: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MetricsReport":
        return cls(**data)


def features_for(samples: np.ndarray, kind: str, projection_seed: int) -> FeatureSet:
    if kind == "tiny_images":
        return random_projection(samples, projection_seed)
    return FeatureSet(samples)


def score_samples(real: np.ndarray, fake: np.ndarray, kind: str, projection_seed: int,
                  modes: Optional[np.ndarray] = None, sigma: Optional[float] = None,
                  trigger: Optional[Tuple[Sequence[int], np.ndarray]] = None) -> MetricsReport:
    """
    Full MetricsReport of generated ``fake`` against reference ``real`` samples.

    ``trigger`` is (flat coordinates, pattern) of the backdoor block; without it
    the residue is left out.
    """
    real_fs = features_for(real, kind, projection_seed)
    fake_fs = features_for(fake, kind, projection_seed)
    frechet, clamped = frechet_distance_with_flag(real_fs, fake_fs)
    mmd = kernel_mmd_poly3(real_fs, fake_fs) * KID_SCALE
    covered, hq = (None, None)
    if modes is not None and len(modes) and sigma is not None:
        covered, hq = mode_coverage(fake, modes, sigma)
    residue = trigger_residue(real, fake, *trigger) if trigger is not None else None
    return MetricsReport(frechet, mmd, covered, hq, real_fs.n, fake_fs.n, clamped, residue)
