"""Forward GP isoscape models, backward Bayesian inversion, and error metrics.

One independent Gaussian process per feature maps location to a predictive
Gaussian (mean, variance). The backward direction inverts the forward model
over a spatial grid with Bayes' rule: per-cell likelihood is the product of
the per-feature predictive densities, multiplied by a prior and normalized.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.special import logsumexp

from .dataset import Dataset
from .errors import ConfigError, DataError, NumericalError
from .geo import EARTH_RADIUS_KM, Location, SpatialGrid, pairwise_distance_km

KERNEL_FAMILIES = ("exponential", "matern32")

# Diagonal jitter ladder tried in order when Cholesky factorization fails.
JITTER_LADDER = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)

# Predictive variances in [-VARIANCE_CLAMP, 0) are treated as roundoff and
# clamped to 0; anything more negative is a genuine numerical failure.
VARIANCE_CLAMP = 1e-10


@dataclass(frozen=True)
class KernelConfig:
    """Stationary covariance on the sphere.

    "exponential" uses great-circle distance directly (positive definite on
    the sphere); "matern32" uses chordal distance, which keeps the Matern-3/2
    form positive definite.
    """

    family: str
    lengthscale_km: float
    signal_variance: float

    def __post_init__(self) -> None:
        if self.family not in KERNEL_FAMILIES:
            raise ConfigError(f"unknown kernel family {self.family!r}; choose from {KERNEL_FAMILIES}")
        if self.lengthscale_km <= 0.0:
            raise ConfigError(f"lengthscale_km must be positive, got {self.lengthscale_km}")
        if self.signal_variance <= 0.0:
            raise ConfigError(f"signal_variance must be positive, got {self.signal_variance}")


def kernel_values(cfg: KernelConfig, dist_km: np.ndarray) -> np.ndarray:
    """Covariance for an array of great-circle distances in kilometers."""
    d = np.asarray(dist_km, dtype=float)
    if cfg.family == "exponential":
        return cfg.signal_variance * np.exp(-d / cfg.lengthscale_km)
    # matern32: convert arc length to chordal distance first.
    r = 2.0 * EARTH_RADIUS_KM * np.sin(d / (2.0 * EARTH_RADIUS_KM))
    s = math.sqrt(3.0) * r / cfg.lengthscale_km
    return cfg.signal_variance * (1.0 + s) * np.exp(-s)


@dataclass(frozen=True, eq=False)
class _FeatureGP:
    """Fitted per-feature GP state: factorized covariance and solved weights."""

    mu: float
    noise_variance: float
    kernel: KernelConfig
    chol_lower: np.ndarray
    weights: np.ndarray
    train_mean: float
    train_std: float
    jitter: float


@dataclass(frozen=True, eq=False)
class IsoscapeModel:
    """Independent per-feature GPs sharing one set of training locations."""

    feature_names: tuple[str, ...]
    train_lats: np.ndarray
    train_lons: np.ndarray
    per_feature: Mapping[str, _FeatureGP]

    @property
    def n_train(self) -> int:
        return len(self.train_lats)

    def feature_stds(self) -> dict[str, float]:
        return {name: gp.train_std for name, gp in self.per_feature.items()}


def _resolve_per_feature(value, feature_names: Sequence[str], what: str) -> dict:
    if isinstance(value, Mapping):
        missing = set(feature_names) - set(value.keys())
        if missing:
            raise ConfigError(f"{what} missing entries for features {sorted(missing)}")
        return {name: value[name] for name in feature_names}
    return {name: value for name in feature_names}


def fit_gp(
    train: Dataset,
    kernel: KernelConfig | Mapping[str, KernelConfig],
    noise_variance: float | Mapping[str, float],
    mean_policy: str | Mapping[str, float] = "train_mean",
) -> IsoscapeModel:
    """Fit one GP per feature on the training locations.

    ``noise_variance`` is the observation-noise variance sigma^2, scalar or
    per-feature. ``mean_policy`` selects the baseline mean: "train_mean"
    (default), "zero", or an explicit per-feature mapping. The factorized
    covariance is cached so predictions cost O(N^2).

    Missing values must be resolved first (apply a MissingPolicy); raises
    DataError otherwise. Factorization failure after the jitter ladder raises
    NumericalError naming the feature.
    """
    if len(train) < 2:
        raise DataError(f"need at least 2 samples to fit, got {len(train)}")
    if train.has_missing():
        raise DataError("training data has missing values; apply a missing policy first")

    kernels = _resolve_per_feature(kernel, train.feature_names, "kernel")
    noises = _resolve_per_feature(noise_variance, train.feature_names, "noise_variance")
    for name, nv in noises.items():
        if nv < 0.0:
            raise ConfigError(f"noise variance for {name!r} must be nonnegative, got {nv}")

    lats = train.lat_array()
    lons = train.lon_array()
    dist = pairwise_distance_km(lats, lons, lats, lons)
    values = train.feature_matrix()
    n = len(train)

    per_feature: dict[str, _FeatureGP] = {}
    for j, name in enumerate(train.feature_names):
        y = values[:, j]
        if mean_policy == "train_mean":
            mu = float(np.mean(y))
        elif mean_policy == "zero":
            mu = 0.0
        elif isinstance(mean_policy, Mapping):
            mu = float(mean_policy[name])
        else:
            raise ConfigError(f"unknown mean_policy {mean_policy!r}")

        cfg = kernels[name]
        cov = kernel_values(cfg, dist) + noises[name] * np.eye(n)
        # Rounding can let an exactly singular matrix slip through LAPACK's
        # potrf; reject factors whose diagonal signals numerical rank loss.
        diag_floor = n * np.finfo(float).eps * float(np.max(np.diag(cov)))
        lower = None
        jitter_used = 0.0
        for jitter in JITTER_LADDER:
            try:
                candidate = cholesky(cov + jitter * np.eye(n), lower=True)
            except np.linalg.LinAlgError:
                continue
            if float(np.min(np.diag(candidate))) ** 2 < diag_floor:
                continue
            lower = candidate
            jitter_used = jitter
            break
        if lower is None:
            raise NumericalError(
                f"feature {name!r}: covariance not positive definite after jitter up to "
                f"{JITTER_LADDER[-1]:g}"
            )
        weights = cho_solve((lower, True), y - mu)
        per_feature[name] = _FeatureGP(
            mu=mu,
            noise_variance=float(noises[name]),
            kernel=cfg,
            chol_lower=lower,
            weights=weights,
            train_mean=float(np.mean(y)),
            train_std=float(np.std(y)),
            jitter=jitter_used,
        )

    return IsoscapeModel(
        feature_names=train.feature_names,
        train_lats=lats,
        train_lons=lons,
        per_feature=per_feature,
    )


def _clamp_variance(var: np.ndarray, context: str) -> np.ndarray:
    worst = float(var.min()) if var.size else 0.0
    if worst < -VARIANCE_CLAMP:
        raise NumericalError(f"{context}: predictive variance {worst:g} below roundoff clamp")
    return np.maximum(var, 0.0)


def _predict_batch(
    m: IsoscapeModel, lats: np.ndarray, lons: np.ndarray
) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Predictive (means, variances) per feature at many locations at once."""
    dist = pairwise_distance_km(lats, lons, m.train_lats, m.train_lons)
    out: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for name in m.feature_names:
        gp = m.per_feature[name]
        k_star = kernel_values(gp.kernel, dist)  # (n_points, n_train)
        means = gp.mu + k_star @ gp.weights
        v = solve_triangular(gp.chol_lower, k_star.T, lower=True)
        prior_var = gp.kernel.signal_variance + gp.noise_variance + gp.jitter
        variances = prior_var - np.sum(v * v, axis=0)
        out[name] = (means, _clamp_variance(variances, f"feature {name!r}"))
    return out


def predict_forward(m: IsoscapeModel, x_star: Location) -> dict[str, tuple[float, float]]:
    """Per-feature predictive (mean, variance) at a single location.

    The variance includes the observation-noise term, so it is the predictive
    variance of a new measurement, not of the latent field.
    """
    batch = _predict_batch(m, np.array([x_star.lat]), np.array([x_star.lon]))
    return {name: (float(mv[0][0]), float(mv[1][0])) for name, mv in batch.items()}


def _feature_vector(m: IsoscapeModel, y_star: Mapping[str, float | None]) -> np.ndarray:
    vals = []
    for name in m.feature_names:
        v = y_star.get(name)
        if v is None:
            raise DataError(f"feature {name!r} missing from observation; apply a missing policy upstream")
        vals.append(float(v))
    return np.array(vals)


def _log_likelihood_batch(
    m: IsoscapeModel, y_star: Mapping[str, float | None], lats: np.ndarray, lons: np.ndarray
) -> np.ndarray:
    """Log of the product of per-feature Gaussian densities at many locations."""
    y = _feature_vector(m, y_star)
    preds = _predict_batch(m, lats, lons)
    total = np.zeros(len(lats))
    for j, name in enumerate(m.feature_names):
        means, variances = preds[name]
        if np.any(variances <= 0.0):
            raise NumericalError(f"feature {name!r}: zero predictive variance in likelihood")
        total += -0.5 * np.log(2.0 * math.pi * variances) - (y[j] - means) ** 2 / (2.0 * variances)
    return total


def log_likelihood(m: IsoscapeModel, y_star: Mapping[str, float | None], x: Location) -> float:
    """Log density of observing ``y_star`` at location ``x`` (features independent)."""
    return float(_log_likelihood_batch(m, y_star, np.array([x.lat]), np.array([x.lon]))[0])


def likelihood(m: IsoscapeModel, y_star: Mapping[str, float | None], x: Location) -> float:
    """Density of observing ``y_star`` at ``x``; computed in log space internally."""
    return math.exp(log_likelihood(m, y_star, x))


@dataclass(frozen=True, eq=False)
class PosteriorGrid:
    """Discrete probability distribution over grid cells (origin posterior)."""

    grid: SpatialGrid
    probs: np.ndarray

    def __post_init__(self) -> None:
        p = np.asarray(self.probs, dtype=float)
        if p.shape != (len(self.grid),):
            raise DataError("probs length does not match grid")
        if np.any(p < 0.0):
            raise DataError("posterior probabilities must be nonnegative")
        if abs(float(p.sum()) - 1.0) > 1e-9:
            raise DataError(f"posterior probabilities sum to {p.sum()!r}, not 1")
        object.__setattr__(self, "probs", p)


def _resolve_prior(grid: SpatialGrid, prior: np.ndarray | Sequence[float] | None) -> np.ndarray:
    if prior is None:
        return grid.cell_weight
    p = np.asarray(prior, dtype=float)
    if p.shape != (len(grid),):
        raise ConfigError(f"prior length {p.shape} does not match grid size {len(grid)}")
    if np.any(p < 0.0) or not np.any(p > 0.0):
        raise ConfigError("prior must be nonnegative with at least one positive cell")
    return p


def posterior_from_log_likelihood(
    log_lik: np.ndarray, grid: SpatialGrid, prior: np.ndarray | Sequence[float] | None = None
) -> PosteriorGrid:
    """Bayes combination step: normalize likelihood * prior over the grid.

    ``prior`` is per-cell probability mass (any positive scale); default is
    the grid's area weights, i.e. a spatially uniform prior. Computed in log
    space; raises NumericalError when no cell has support.
    """
    log_lik = np.asarray(log_lik, dtype=float)
    if log_lik.shape != (len(grid),):
        raise ConfigError("log_lik length does not match grid size")
    p = _resolve_prior(grid, prior)
    with np.errstate(divide="ignore"):
        log_post = log_lik + np.log(p)
    if not np.isfinite(log_post.max()):
        raise NumericalError("no support on grid: every cell has zero posterior mass")
    probs = np.exp(log_post - logsumexp(log_post))
    probs = probs / probs.sum()
    return PosteriorGrid(grid=grid, probs=probs)


def posterior(
    m: IsoscapeModel,
    y_star: Mapping[str, float | None],
    grid: SpatialGrid,
    prior: np.ndarray | Sequence[float] | None = None,
) -> PosteriorGrid:
    """Posterior over grid cells for an observation of unknown origin."""
    log_lik = _log_likelihood_batch(m, y_star, grid.lat_array(), grid.lon_array())
    return posterior_from_log_likelihood(log_lik, grid, prior)


def posterior_rmse(pg: PosteriorGrid, x_true: Location) -> float:
    """Root of the posterior-expected squared great-circle distance to ``x_true``, km."""
    d = pairwise_distance_km(
        np.array([x_true.lat]), np.array([x_true.lon]), pg.grid.lat_array(), pg.grid.lon_array()
    )[0]
    return float(np.sqrt(np.sum(pg.probs * d * d)))


def forward_rmse(
    m: IsoscapeModel, test: Dataset, stds: Mapping[str, float] | None = None
) -> float:
    """RMSE over all (sample, feature) residuals, each standardized per feature.

    Features carry incommensurate units, so residuals are divided by the
    feature's training standard deviation before aggregation. ``stds``
    overrides the standardization scales (the valuation layer passes the full
    training universe's scales so that subset models score comparably).
    """
    if len(test) == 0:
        raise DataError("test dataset is empty")
    if test.has_missing():
        raise DataError("test data has missing values; apply a missing policy first")
    if tuple(test.feature_names) != tuple(m.feature_names):
        raise DataError("test feature schema does not match model")
    if stds is None:
        scale = m.feature_stds()
    else:
        scale = _resolve_per_feature(stds, m.feature_names, "stds")
    for name in m.feature_names:
        if scale[name] <= 0.0:
            raise NumericalError(f"feature {name!r}: zero training standard deviation")
    preds = _predict_batch(m, test.lat_array(), test.lon_array())
    values = test.feature_matrix()
    total = 0.0
    for j, name in enumerate(m.feature_names):
        z = (values[:, j] - preds[name][0]) / scale[name]
        total += float(np.sum(z * z))
    return math.sqrt(total / (len(test) * len(m.feature_names)))


def mean_posterior_rmse(
    m: IsoscapeModel,
    test: Dataset,
    grid: SpatialGrid,
    prior: np.ndarray | Sequence[float] | None = None,
) -> float:
    """Backward-direction aggregate: mean posterior RMSE over the test samples."""
    if len(test) == 0:
        raise DataError("test dataset is empty")
    per_sample = [
        posterior_rmse(posterior(m, s.features, grid, prior), s.location) for s in test.samples
    ]
    return float(np.mean(per_sample))


def log_marginal_likelihood(m: IsoscapeModel) -> dict[str, float]:
    """Per-feature log marginal likelihood of the training data (plus 'total')."""
    out: dict[str, float] = {}
    n = m.n_train
    total = 0.0
    for name in m.feature_names:
        gp = m.per_feature[name]
        alpha = gp.weights
        # y - mu recovered from the cached solve: (K + s2 I) alpha = y - mu.
        resid = (gp.chol_lower @ (gp.chol_lower.T @ alpha))
        lml = (
            -0.5 * float(resid @ alpha)
            - float(np.sum(np.log(np.diag(gp.chol_lower))))
            - 0.5 * n * math.log(2.0 * math.pi)
        )
        out[name] = lml
        total += lml
    out["total"] = total
    return out


def grid_search_kernel(
    train: Dataset,
    noise_variance: float | Mapping[str, float],
    lengthscales_km: Iterable[float],
    signal_variances: Iterable[float],
    families: Iterable[str] = ("exponential",),
    mean_policy: str | Mapping[str, float] = "train_mean",
) -> tuple[KernelConfig, list[tuple[KernelConfig, float]]]:
    """Coarse hyperparameter search maximizing total log marginal likelihood.

    Returns the best config and the full (config, total lml) table. Ties break
    toward the earliest candidate in iteration order, so results are
    deterministic for a fixed candidate list.
    """
    table: list[tuple[KernelConfig, float]] = []
    best: KernelConfig | None = None
    best_lml = -math.inf
    for family in families:
        for ls in lengthscales_km:
            for sv in signal_variances:
                cfg = KernelConfig(family=family, lengthscale_km=ls, signal_variance=sv)
                try:
                    model = fit_gp(train, cfg, noise_variance, mean_policy)
                except NumericalError:
                    continue
                lml = log_marginal_likelihood(model)["total"]
                table.append((cfg, lml))
                if lml > best_lml:
                    best, best_lml = cfg, lml
    if best is None:
        raise NumericalError("no kernel candidate produced a positive-definite covariance")
    return best, table


def export_posterior_csv(
    pg: PosteriorGrid, path: str | Path, header_lines: Sequence[str] = ()
) -> None:
    """Write one (lat, lon, prob) row per grid cell for plotting."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh)
        writer.writerow(["lat", "lon", "prob"])
        for cell, prob in zip(pg.grid.cells, pg.probs):
            writer.writerow([repr(cell.lat), repr(cell.lon), repr(float(prob))])
