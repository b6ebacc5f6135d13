#!/usr/bin/env python3
# -----------------------------------------------------------
"""
Server-side malicious client detection.

Every round after warmup the server fits an Isolation Forest on the uploaded
generator losses, flags clients whose anomaly score exceeds a threshold,
discards the result unless 0 < |O| < N/2, and decays the aggregation weight
of each flagged client by d^{c_i}, where c_i counts how often it was flagged.
"""

import math
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Set, Tuple, Union

import numpy as np

from logger_setup import LoggerSetup

# ---------------------------------------------------------------------------
# 1) Logger Setup
# ---------------------------------------------------------------------------
logger = LoggerSetup.setup_logger("Detection")

EULER_GAMMA = 0.5772156649


def avg_path_norm(n: int) -> float:
    """
    Average path length of an unsuccessful BST search over ``n`` points,
    c(n) = 2 H(n-1) - 2 (n-1) / n with H(i) ~ ln(i) + gamma.
    """
    if n < 2:
        raise ValueError(f"avg_path_norm needs n >= 2, got {n}")
    return 2.0 * (math.log(n - 1) + EULER_GAMMA) - 2.0 * (n - 1) / n


def _leaf_adjustment(size: int) -> float:
    return avg_path_norm(size) if size > 1 else 0.0


# ---------------------------------------------------------------------------
# 2) Forest
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 100
    subsample: Optional[int] = None      # None -> min(n_points, 256)
    threshold: float = 0.6
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError(f"n_trees must be >= 1, got {self.n_trees}")
        if self.subsample is not None and self.subsample < 2:
            raise ValueError(f"subsample must be >= 2, got {self.subsample}")
        if not 0.5 < self.threshold < 1.0:
            raise ValueError(f"threshold must be in (0.5, 1), got {self.threshold}")

    def subsample_size(self, n_points: int) -> int:
        psi = min(n_points, 256) if self.subsample is None else self.subsample
        return min(psi, n_points)


@dataclass(frozen=True)
class Leaf:
    size: int
    depth: int


@dataclass(frozen=True)
class Split:
    feature: int
    value: float
    left: "TreeNode"
    right: "TreeNode"
    depth: int


TreeNode = Union[Leaf, Split]


@dataclass(frozen=True)
class IsolationTree:
    root: TreeNode
    height_limit: int

    def path_length(self, point: np.ndarray) -> float:
        node = self.root
        while isinstance(node, Split):
            node = node.left if point[node.feature] < node.value else node.right
        return node.depth + _leaf_adjustment(node.size)


@dataclass(frozen=True)
class IsolationForest:
    trees: Tuple[IsolationTree, ...]
    psi: int


def _grow(points: np.ndarray, depth: int, limit: int, rng: np.random.Generator) -> TreeNode:
    if depth >= limit or len(points) <= 1:
        return Leaf(len(points), depth)
    lows, highs = points.min(axis=0), points.max(axis=0)
    splittable = np.flatnonzero(highs > lows)
    if splittable.size == 0:
        return Leaf(len(points), depth)
    feature = int(splittable[rng.integers(splittable.size)])
    low, high = lows[feature], highs[feature]
    value = rng.uniform(low, high)
    while not low < value < high:
        value = rng.uniform(low, high)
    goes_left = points[:, feature] < value
    return Split(
        feature,
        float(value),
        _grow(points[goes_left], depth + 1, limit, rng),
        _grow(points[~goes_left], depth + 1, limit, rng),
        depth,
    )


def _as_points(points: Sequence) -> np.ndarray:
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    return arr


def fit_forest(points: Sequence, cfg: ForestConfig) -> IsolationForest:
    """
    ``cfg.n_trees`` isolation trees, tree k grown from its own stream
    seeded with (cfg.seed, k) on a subsample of size min(psi, n).
    """
    data = _as_points(points)
    if data.shape[0] < 2:
        raise ValueError(f"fit_forest needs at least 2 points, got {data.shape[0]}")
    if not np.all(np.isfinite(data)):
        raise ValueError("fit_forest needs finite features")
    psi = cfg.subsample_size(data.shape[0])
    limit = math.ceil(math.log2(psi))
    trees = []
    for k in range(cfg.n_trees):
        rng = np.random.default_rng([cfg.seed, k])
        sample = data[rng.choice(data.shape[0], size=psi, replace=False)]
        trees.append(IsolationTree(_grow(sample, 0, limit, rng), limit))
    return IsolationForest(tuple(trees), psi)


def anomaly_score(forest: IsolationForest, point: Union[float, Sequence[float]]) -> float:
    """2^(-mean path length / c(psi)); higher means more anomalous."""
    x = np.atleast_1d(np.asarray(point, dtype=np.float64))
    mean_path = sum(tree.path_length(x) for tree in forest.trees) / len(forest.trees)
    return float(2.0 ** (-mean_path / avg_path_norm(forest.psi)))


# ---------------------------------------------------------------------------
# 3) Outlier gate and weight ledger
# ---------------------------------------------------------------------------
def valid_outlier_set(outliers: Set[int], n_clients: int) -> bool:
    """Only 0 < |O| < N/2 is a usable detection (honest-majority assumption)."""
    return 0 < len(outliers) < n_clients / 2.0


def detect_outliers(losses: Sequence[float], cfg: ForestConfig, n_clients: int) -> Set[int]:
    """Client indices scoring above ``cfg.threshold``, or the empty set when the gate fails."""
    if n_clients < 2 or len(losses) != n_clients:
        raise ValueError(f"detect_outliers needs N >= 2 losses, got {len(losses)} for N={n_clients}")
    forest = fit_forest(list(losses), cfg)
    scores = [anomaly_score(forest, loss) for loss in losses]
    flagged = {i for i, s in enumerate(scores) if s > cfg.threshold}
    logger.debug("Isolation scores %s -> flagged %s", ["%.3f" % s for s in scores], sorted(flagged))
    if not valid_outlier_set(flagged, n_clients):
        return set()
    return flagged


@dataclass(frozen=True)
class DetectionState:
    """
    Raw aggregation weights w (init 1/N) and detection counters c (init 0).

    decay_mode "compound" applies w_i <- w_i * d^{c_i} on each detection;
    "absolute" sets w_i <- d^{c_i} / N instead.
    """

    w: Tuple[float, ...]
    c: Tuple[int, ...]
    m: int
    d: float
    decay_mode: str = "compound"

    def __post_init__(self):
        if not 0.0 < self.d < 1.0:
            raise ValueError(f"decay constant d must be in (0, 1), got {self.d}")
        if self.decay_mode not in ("compound", "absolute"):
            raise ValueError(f"decay_mode must be 'compound' or 'absolute', got {self.decay_mode!r}")
        if len(self.w) != len(self.c):
            raise ValueError("weights and counters must have one entry per client")

    @classmethod
    def initial(cls, n_clients: int, m: int, d: float, decay_mode: str = "compound") -> "DetectionState":
        return cls(tuple([1.0 / n_clients] * n_clients), tuple([0] * n_clients), m, d, decay_mode)

    @property
    def n_clients(self) -> int:
        return len(self.w)

    def active(self, t: int) -> bool:
        return t > self.m


def update_weights(state: DetectionState, outliers: Set[int]) -> DetectionState:
    """Increment c_i then decay w_i for every i in ``outliers``; nobody else changes."""
    if not outliers:
        return state
    w: List[float] = list(state.w)
    c: List[int] = list(state.c)
    for i in sorted(outliers):
        c[i] += 1
        if state.decay_mode == "compound":
            w[i] = w[i] * state.d ** c[i]
        else:
            w[i] = state.d ** c[i] / state.n_clients
    return replace(state, w=tuple(w), c=tuple(c))


def normalized_weights(raw: Sequence[float]) -> List[float]:
    total = math.fsum(raw)
    if total <= 0:
        raise ValueError("aggregation weights sum to zero")
    return [x / total for x in raw]
