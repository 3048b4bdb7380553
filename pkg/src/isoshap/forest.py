"""Bagged multi-output CART regression for both model directions.

Forward forests map (lat, lon) to the feature vector; backward forests map
the feature vector to (lat, lon). Trees split on summed per-output variance
reduction. Per-tree seeds derive from the master seed, so tree t is identical
whether trees are grown serially or in parallel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .dataset import Dataset
from .errors import ConfigError, DataError
from .geo import Location, great_circle_distance

DIRECTIONS = ("forward", "backward")


@dataclass(frozen=True)
class ForestConfig:
    """Hyperparameters for the bagged CART ensemble.

    features_per_split: "auto" (ceil(p/3)), "all", or an explicit count.
    max_depth None means unlimited; 0 makes every tree a mean-predicting stump.
    """

    n_trees: int = 200
    max_depth: int | None = None
    min_leaf: int = 2
    features_per_split: int | str = "auto"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_trees < 1:
            raise ConfigError(f"n_trees must be >= 1, got {self.n_trees}")
        if self.min_leaf < 1:
            raise ConfigError(f"min_leaf must be >= 1, got {self.min_leaf}")
        if self.max_depth is not None and self.max_depth < 0:
            raise ConfigError(f"max_depth must be >= 0 or None, got {self.max_depth}")
        if isinstance(self.features_per_split, str):
            if self.features_per_split not in ("auto", "all"):
                raise ConfigError(
                    f"features_per_split must be 'auto', 'all' or an int, got {self.features_per_split!r}"
                )
        elif self.features_per_split < 1:
            raise ConfigError(f"features_per_split must be >= 1, got {self.features_per_split}")

    def resolve_features_per_split(self, p: int) -> int:
        if self.features_per_split == "auto":
            return min(p, max(1, math.ceil(p / 3)))
        if self.features_per_split == "all":
            return p
        return min(p, int(self.features_per_split))


@dataclass(frozen=True, eq=False)
class _Node:
    """One CART node; leaves carry the mean target vector."""

    value: np.ndarray
    feature: int = -1
    threshold: float = 0.0
    left: "_Node | None" = None
    right: "_Node | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None


def _best_split(X: np.ndarray, Y: np.ndarray, candidates: np.ndarray, min_leaf: int):
    """Lowest summed-SSE split over candidate features, or None.

    Returns (feature, threshold); ties break toward the earliest candidate and
    the smallest left-block size, so the result is deterministic.
    """
    n = len(X)
    best_sse = math.inf
    best: tuple[int, float] | None = None
    positions = np.arange(min_leaf, n - min_leaf + 1)
    if len(positions) == 0:
        return None
    for f in candidates:
        vals = X[:, f]
        order = np.argsort(vals, kind="stable")
        sv = vals[order]
        valid = sv[positions] > sv[positions - 1]
        if not valid.any():
            continue
        sy = Y[order]
        cum = np.cumsum(sy, axis=0)
        cumsq = np.cumsum(sy * sy, axis=0)
        left_n = positions[valid]
        right_n = n - left_n
        lsum = cum[left_n - 1]
        lsq = cumsq[left_n - 1]
        rsum = cum[-1] - lsum
        rsq = cumsq[-1] - lsq
        sse = (lsq - lsum * lsum / left_n[:, None]).sum(axis=1)
        sse += (rsq - rsum * rsum / right_n[:, None]).sum(axis=1)
        j = int(np.argmin(sse))
        if sse[j] < best_sse:
            best_sse = float(sse[j])
            i = int(left_n[j])
            best = (int(f), float((sv[i - 1] + sv[i]) / 2.0))
    return best


def _grow(
    X: np.ndarray,
    Y: np.ndarray,
    depth: int,
    cfg: ForestConfig,
    m_features: int,
    rng: np.random.Generator,
) -> _Node:
    value = Y.mean(axis=0)
    n = len(X)
    if cfg.max_depth is not None and depth >= cfg.max_depth:
        return _Node(value=value)
    if n < 2 * cfg.min_leaf:
        return _Node(value=value)
    if float(np.sum(Y * Y) - np.sum(Y.mean(axis=0) ** 2) * n) <= 1e-12:
        return _Node(value=value)  # targets (numerically) constant
    candidates = rng.choice(X.shape[1], size=m_features, replace=False)
    found = _best_split(X, Y, candidates, cfg.min_leaf)
    if found is None:
        return _Node(value=value)
    feature, threshold = found
    mask = X[:, feature] <= threshold
    return _Node(
        value=value,
        feature=feature,
        threshold=threshold,
        left=_grow(X[mask], Y[mask], depth + 1, cfg, m_features, rng),
        right=_grow(X[~mask], Y[~mask], depth + 1, cfg, m_features, rng),
    )


def _tree_predict(node: _Node, x: np.ndarray) -> np.ndarray:
    while not node.is_leaf:
        node = node.left if x[node.feature] <= node.threshold else node.right
    return node.value


@dataclass(frozen=True, eq=False)
class ForestModel:
    direction: str
    trees: tuple[_Node, ...]
    input_names: tuple[str, ...]
    output_names: tuple[str, ...]
    config: ForestConfig
    output_train_std: Mapping[str, float]


def fit_forest(train: Dataset, direction: str, cfg: ForestConfig) -> ForestModel:
    """Fit a bagged CART ensemble (bootstrap size N, with replacement)."""
    if direction not in DIRECTIONS:
        raise ConfigError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    if len(train) < 2:
        raise DataError(f"need at least 2 samples to fit, got {len(train)}")
    if train.has_missing():
        raise DataError("training data has missing values; apply a missing policy first")

    coords = np.column_stack([train.lat_array(), train.lon_array()])
    feats = train.feature_matrix()
    if direction == "forward":
        X, Y = coords, feats
        input_names: tuple[str, ...] = ("lat", "lon")
        output_names = train.feature_names
    else:
        X, Y = feats, coords
        input_names = train.feature_names
        output_names = ("lat", "lon")

    m_features = cfg.resolve_features_per_split(X.shape[1])
    n = len(train)
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.n_trees)
    trees = []
    for t in range(cfg.n_trees):
        rng = np.random.default_rng(children[t])
        boot = rng.integers(0, n, size=n)
        trees.append(_grow(X[boot], Y[boot], 0, cfg, m_features, rng))

    stds = {name: float(np.std(Y[:, j])) for j, name in enumerate(output_names)}
    return ForestModel(
        direction=direction,
        trees=tuple(trees),
        input_names=input_names,
        output_names=output_names,
        config=cfg,
        output_train_std=stds,
    )


def _input_vector(m: ForestModel, value) -> np.ndarray:
    if m.direction == "forward":
        if isinstance(value, Location):
            return np.array([value.lat, value.lon])
        x = np.asarray(value, dtype=float)
    elif isinstance(value, Mapping):
        vals = []
        for name in m.input_names:
            v = value.get(name)
            if v is None:
                raise DataError(f"feature {name!r} missing from input")
            vals.append(float(v))
        x = np.array(vals)
    else:
        x = np.asarray(value, dtype=float)
    if x.shape != (len(m.input_names),):
        raise DataError(f"input dimension {x.shape} does not match {m.input_names}")
    return x


def _clamp_latlon(out: np.ndarray) -> np.ndarray:
    out = out.copy()
    out[0] = min(90.0, max(-90.0, out[0]))
    out[1] = min(math.nextafter(180.0, -math.inf), max(-180.0, out[1]))
    return out


def predict_forest(m: ForestModel, value) -> np.ndarray:
    """Ensemble-mean prediction; backward outputs clamped to valid lat/lon."""
    x = _input_vector(m, value)
    preds = np.array([_tree_predict(t, x) for t in m.trees])
    out = preds.mean(axis=0)
    if m.direction == "backward":
        out = _clamp_latlon(out)
    return out


def backward_location(m: ForestModel, features) -> Location:
    """Backward prediction as a Location."""
    if m.direction != "backward":
        raise ConfigError("backward_location requires a backward forest")
    out = predict_forest(m, features)
    return Location(float(out[0]), float(out[1]))


def _predict_matrix(m: ForestModel, X: np.ndarray) -> np.ndarray:
    rows = np.empty((len(X), len(m.output_names)))
    for i, x in enumerate(X):
        preds = np.array([_tree_predict(t, x) for t in m.trees])
        rows[i] = preds.mean(axis=0)
    if m.direction == "backward":
        for i in range(len(rows)):
            rows[i] = _clamp_latlon(rows[i])
    return rows


def forest_rmse(m: ForestModel, test: Dataset, stds: Mapping[str, float] | None = None) -> float:
    """Forward: standardized-feature RMSE (same convention as the GP metric).
    Backward: RMSE of great-circle distances in kilometers.
    """
    if len(test) == 0:
        raise DataError("test dataset is empty")
    if test.has_missing():
        raise DataError("test data has missing values; apply a missing policy first")

    if m.direction == "forward":
        if tuple(test.feature_names) != tuple(m.output_names):
            raise DataError("test feature schema does not match model")
        scale = dict(m.output_train_std) if stds is None else dict(stds)
        for name in m.output_names:
            if scale.get(name, 0.0) <= 0.0:
                raise DataError(f"feature {name!r}: zero training standard deviation")
        X = np.column_stack([test.lat_array(), test.lon_array()])
        preds = _predict_matrix(m, X)
        values = test.feature_matrix()
        total = 0.0
        for j, name in enumerate(m.output_names):
            z = (values[:, j] - preds[:, j]) / scale[name]
            total += float(np.sum(z * z))
        return math.sqrt(total / (len(test) * len(m.output_names)))

    if tuple(test.feature_names) != tuple(m.input_names):
        raise DataError("test feature schema does not match model")
    X = test.feature_matrix()
    preds = _predict_matrix(m, X)
    dists = np.array(
        [
            great_circle_distance(Location(float(p[0]), float(p[1])), s.location)
            for p, s in zip(preds, test.samples)
        ]
    )
    return float(np.sqrt(np.mean(dists * dists)))
