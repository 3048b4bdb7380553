"""Training-data valuation: utility functions and Shapley-style estimators.

The estimators operate on an abstract value function over index subsets
(encoded as bitmasks), so they work identically for model-backed utilities
and for synthetic utility tables in tests. Dataset-level wrappers map sample
ids to indices in sorted-id order and memoize utility evaluations per subset.

Utility sign convention: utility = -RMSE, so higher is better everywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import gammaln

from .dataset import Dataset
from .errors import ConfigError, DataError, NumericalError
from .forest import ForestConfig, ForestModel, fit_forest, forest_rmse
from .geo import Location, SpatialGrid, great_circle_distance
from .isoscape import (
    KernelConfig,
    PosteriorGrid,
    fit_gp,
    forward_rmse,
    mean_posterior_rmse,
    posterior_rmse,
)

MODEL_KINDS = ("gp", "forest")
DIRECTIONS = ("forward", "backward")

# Smallest subset both model kinds can be fit on. Below this the utility
# falls back to the same baseline predictor that defines v(empty).
MIN_FIT_SIZE = 2

# Exact enumeration cap: 2^N utility evaluations.
DEFAULT_EXACT_CAP = 12

ValueFn = Callable[[int], float]


@dataclass(frozen=True)
class BetaParams:
    """Beta-distribution parameters weighting marginal contributions by cardinality."""

    alpha: float
    beta: float

    def __post_init__(self) -> None:
        if self.alpha <= 0.0 or self.beta <= 0.0:
            raise ConfigError(f"Beta parameters must be positive, got ({self.alpha}, {self.beta})")


@dataclass(eq=False)
class UtilitySpec:
    """Everything needed to score a training subset against a fixed test set.

    Forward-direction RMSEs are standardized by the training *universe's*
    per-feature standard deviations (not each subset's own), so utilities of
    different subsets are on a common scale; at the full training set this
    coincides with the module-level metric exactly.
    """

    model_kind: str
    direction: str
    train_universe: Dataset
    test: Dataset
    kernel: KernelConfig | Mapping[str, KernelConfig] | None = None
    noise_variance: float | Mapping[str, float] | None = None
    mean_policy: str | Mapping[str, float] = "train_mean"
    grid: SpatialGrid | None = None
    prior: np.ndarray | None = None
    forest_config: ForestConfig | None = None
    feature_means: dict[str, float] = field(init=False)
    feature_stds: dict[str, float] = field(init=False)
    _baseline: float | None = field(init=False, default=None, repr=False)

    def __post_init__(self) -> None:
        if self.model_kind not in MODEL_KINDS:
            raise ConfigError(f"model_kind must be one of {MODEL_KINDS}, got {self.model_kind!r}")
        if self.direction not in DIRECTIONS:
            raise ConfigError(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")
        if len(self.test) == 0:
            raise DataError("test dataset is empty")
        if len(self.train_universe) == 0:
            raise DataError("training universe is empty")
        if tuple(self.test.feature_names) != tuple(self.train_universe.feature_names):
            raise DataError("test feature schema does not match training universe")
        if self.train_universe.has_missing() or self.test.has_missing():
            raise DataError("datasets have missing values; apply a missing policy first")
        if self.model_kind == "gp":
            if self.kernel is None or self.noise_variance is None:
                raise ConfigError("gp utility requires kernel and noise_variance")
            if self.direction == "backward" and self.grid is None:
                raise ConfigError("backward gp utility requires a spatial grid")
        else:
            if self.forest_config is None:
                self.forest_config = ForestConfig()

        values = self.train_universe.feature_matrix()
        self.feature_means = {
            name: float(np.mean(values[:, j]))
            for j, name in enumerate(self.train_universe.feature_names)
        }
        self.feature_stds = {
            name: float(np.std(values[:, j]))
            for j, name in enumerate(self.train_universe.feature_names)
        }
        if self.direction == "forward":
            for name, sd in self.feature_stds.items():
                if sd <= 0.0:
                    raise NumericalError(
                        f"feature {name!r}: zero standard deviation in training universe"
                    )

    @property
    def empty_set_policy(self) -> str:
        if self.direction == "forward":
            return "constant predictor at the training-universe feature means"
        if self.model_kind == "gp":
            return "prior (uniform-over-grid) posterior"
        return "training-universe centroid predictor"

    def baseline_utility(self) -> float:
        """Utility of the baseline predictor; defines v(empty)."""
        if self._baseline is not None:
            return self._baseline
        if self.direction == "forward":
            values = self.test.feature_matrix()
            total = 0.0
            for j, name in enumerate(self.test.feature_names):
                z = (values[:, j] - self.feature_means[name]) / self.feature_stds[name]
                total += float(np.sum(z * z))
            rmse = math.sqrt(total / (len(self.test) * len(self.test.feature_names)))
        elif self.model_kind == "gp":
            prior = self.grid.cell_weight if self.prior is None else np.asarray(self.prior, float)
            pg = PosteriorGrid(grid=self.grid, probs=prior / prior.sum())
            rmse = float(
                np.mean([posterior_rmse(pg, s.location) for s in self.test.samples])
            )
        else:
            lats = self.train_universe.lat_array()
            lons = self.train_universe.lon_array()
            centroid = Location(float(lats.mean()), float(lons.mean()))
            d = [great_circle_distance(centroid, s.location) for s in self.test.samples]
            rmse = math.sqrt(float(np.mean(np.array(d) ** 2)))
        self._baseline = -rmse
        return self._baseline


def _fit_for(spec: UtilitySpec, subset: Dataset):
    if spec.model_kind == "gp":
        return fit_gp(subset, spec.kernel, spec.noise_variance, spec.mean_policy)
    return fit_forest(subset, spec.direction, spec.forest_config)


def utility(spec: UtilitySpec, subset: Dataset) -> float:
    """Utility v of a training subset: -RMSE of the fitted model on spec.test.

    Subsets smaller than MIN_FIT_SIZE (including the empty set) are scored
    with the baseline predictor described by ``spec.empty_set_policy``.
    Deterministic for fixed spec (forest randomness is seeded by its config).
    """
    if len(subset) < MIN_FIT_SIZE:
        return spec.baseline_utility()
    try:
        model = _fit_for(spec, subset)
        if spec.direction == "forward":
            if isinstance(model, ForestModel):
                return -forest_rmse(model, spec.test, stds=spec.feature_stds)
            return -forward_rmse(model, spec.test, stds=spec.feature_stds)
        if isinstance(model, ForestModel):
            return -forest_rmse(model, spec.test)
        return -mean_posterior_rmse(model, spec.test, spec.grid, spec.prior)
    except NumericalError as exc:
        ids = list(subset.ids())
        shown = ", ".join(ids[:5]) + ("..." if len(ids) > 5 else "")
        raise NumericalError(f"utility failed on subset [{shown}] (n={len(ids)}): {exc}") from exc


@dataclass(frozen=True, eq=False)
class ValuationResult:
    """Per-sample values plus estimator bookkeeping.

    ``convergence_history`` holds (iteration, max absolute value change)
    pairs in increasing iteration order; empty for non-iterative methods.
    ``permutations_used`` counts permutations (TMC) or rounds (beta); it is 0
    for exact, loo and random.
    """

    values: dict[str, float]
    method: str
    permutations_used: int
    convergence_history: tuple[tuple[int, float], ...]
    seed: int | None = None

    def ordered_ids(self, ascending: bool = True) -> list[str]:
        """Sample ids sorted by value; ties break by ascending id."""
        sign = 1.0 if ascending else -1.0
        return [k for k, _ in sorted(self.values.items(), key=lambda kv: (sign * kv[1], kv[0]))]

    def to_json_dict(self) -> dict:
        return {
            "method": self.method,
            "seed": self.seed,
            "permutations_used": self.permutations_used,
            "values": dict(sorted(self.values.items())),
            "convergence_history": [[int(t), float(c)] for t, c in self.convergence_history],
        }

    @classmethod
    def from_json_dict(cls, d: Mapping) -> "ValuationResult":
        return cls(
            values={str(k): float(v) for k, v in d["values"].items()},
            method=str(d["method"]),
            permutations_used=int(d["permutations_used"]),
            convergence_history=tuple(
                (int(t), float(c)) for t, c in d.get("convergence_history", [])
            ),
            seed=d.get("seed"),
        )


def _sorted_ids(train: Dataset) -> list[str]:
    return sorted(train.ids())


def make_subset_value_fn(train: Dataset, spec: UtilitySpec) -> tuple[list[str], ValueFn]:
    """Memoized utility over bitmask subsets of the (sorted) training ids."""
    ids = _sorted_ids(train)
    by_id = {s.id: s for s in train.samples}
    universe_ids = set(spec.train_universe.ids())
    unknown = set(ids) - universe_ids
    if unknown:
        raise DataError(f"training ids not in the utility spec's universe: {sorted(unknown)}")
    cache: dict[int, float] = {}

    def value(mask: int) -> float:
        cached = cache.get(mask)
        if cached is not None:
            return cached
        chosen = tuple(by_id[ids[i]] for i in range(len(ids)) if mask >> i & 1)
        v = utility(spec, Dataset(samples=chosen, feature_names=train.feature_names))
        cache[mask] = v
        return v

    return ids, value


def exact_shapley_values(n: int, value_fn: ValueFn) -> np.ndarray:
    """Exact Shapley values by full subset enumeration (2^n evaluations).

    phi_i = sum over subsets S not containing i of
            |S|! (n - |S| - 1)! / n!  *  (v(S + i) - v(S)).
    """
    if n < 1:
        raise ConfigError("need at least one player")
    weight = [
        math.factorial(s) * math.factorial(n - s - 1) / math.factorial(n) for s in range(n)
    ]
    values = [value_fn(mask) for mask in range(1 << n)]
    phi = np.zeros(n)
    for mask in range(1 << n):
        s = bin(mask).count("1")
        v_s = values[mask]
        for i in range(n):
            if not mask >> i & 1:
                phi[i] += weight[s] * (values[mask | 1 << i] - v_s)
    return phi


def tmc_shapley_values(
    n: int,
    value_fn: ValueFn,
    tol: float,
    max_permutations: int,
    window: int,
    rel_change: float,
    seed: int = 0,
) -> tuple[np.ndarray, int, list[tuple[int, float]]]:
    """Truncated Monte Carlo Shapley over random permutations.

    Each permutation walks the dataset in random order, keeping a running
    utility; once the running utility is within ``tol`` of the full-data
    utility the remaining positions reuse it (the marginal is recorded as 0).
    Values are the running mean of the per-position marginals. Stops when the
    mean absolute change of the value vector over the last ``window``
    permutations drops below ``rel_change`` relative to the mean absolute
    value, or at ``max_permutations``.

    Per-permutation RNG streams are pre-assigned from ``seed``, so a parallel
    driver that merges permutations in index order reproduces the serial run
    bit for bit.
    """
    if tol < 0.0:
        raise ConfigError(f"tolerance must be nonnegative, got {tol}")
    if max_permutations < 1:
        raise ConfigError("max_permutations must be >= 1")
    full_mask = (1 << n) - 1
    v_full = value_fn(full_mask)
    v_empty = value_fn(0)

    children = np.random.SeedSequence(seed).spawn(max_permutations)
    phi = np.zeros(n)
    history: list[tuple[int, float]] = []
    snapshots: list[np.ndarray] = [phi.copy()]
    t = 0
    while t < max_permutations:
        t += 1
        rng = np.random.default_rng(children[t - 1])
        perm = rng.permutation(n)
        v_prev = v_empty
        mask = 0
        for j in range(n):
            i = int(perm[j])
            mask |= 1 << i
            if abs(v_full - v_prev) < tol:
                v_j = v_prev
            else:
                v_j = value_fn(mask)
            phi[i] = (t - 1) / t * phi[i] + (v_j - v_prev) / t
            v_prev = v_j
        history.append((t, float(np.max(np.abs(phi - snapshots[-1])))))
        snapshots.append(phi.copy())
        if t >= window:
            drift = float(np.mean(np.abs(phi - snapshots[t - window])))
            scale = max(float(np.mean(np.abs(phi))), 1e-12)
            if drift / scale < rel_change:
                break
    return phi, t, history


def beta_cardinality_weights(
    n: int, params: BetaParams, paper_literal: bool = False
) -> np.ndarray:
    """Normalized per-cardinality weights for Monte Carlo Beta Shapley.

    The estimator samples the cardinality k uniformly from {1..n} and a
    subset of size k-1 uniformly; weighting the observed marginal by

        w_k = n * C(n-1, k-1) * Beta(k + beta - 1, n - k + alpha) / Beta(alpha, beta)

    makes its expectation the Beta(alpha, beta) semivalue, and alpha = beta = 1
    gives w_k = 1 identically, recovering the plain Shapley value. With
    ``paper_literal`` the binomial factor is inverted instead (exponent -1),
    which does not reduce to uniform weights at alpha = beta = 1; it is kept
    for side-by-side comparison.
    """
    a, b = params.alpha, params.beta
    log_beta_ab = gammaln(a) + gammaln(b) - gammaln(a + b)
    out = np.empty(n)
    for k in range(1, n + 1):
        log_binom = gammaln(n) - gammaln(k) - gammaln(n - k + 1)  # log C(n-1, k-1)
        log_beta_k = gammaln(k + b - 1) + gammaln(n - k + a) - gammaln(n + a + b - 1)
        log_w = math.log(n) + (-log_binom if paper_literal else log_binom) + log_beta_k - log_beta_ab
        out[k - 1] = math.exp(log_w)
    return out


def beta_shapley_values(
    n: int,
    value_fn: ValueFn,
    params: BetaParams,
    iterations: int,
    seed: int = 0,
    paper_literal_weights: bool = False,
) -> tuple[np.ndarray, list[tuple[int, float]]]:
    """Monte Carlo Beta Shapley: per round, one weighted marginal per sample.

    For each sample j a cardinality k is drawn uniformly from {1..n}, a subset
    S of D minus j with |S| = k-1 uniformly, and the weighted marginal
    w_k * (v(S + j) - v(S)) is averaged over rounds.
    """
    if iterations < 1:
        raise ConfigError("iterations must be >= 1")
    weights = beta_cardinality_weights(n, params, paper_literal_weights)
    children = np.random.SeedSequence(seed).spawn(iterations)
    psi = np.zeros(n)
    history: list[tuple[int, float]] = []
    indices = np.arange(n)
    for b in range(1, iterations + 1):
        rng = np.random.default_rng(children[b - 1])
        prev = psi.copy()
        for j in range(n):
            k = int(rng.integers(1, n + 1))
            others = indices[indices != j]
            chosen = rng.choice(others, size=k - 1, replace=False) if k > 1 else others[:0]
            mask = 0
            for i in chosen:
                mask |= 1 << int(i)
            delta = value_fn(mask | 1 << j) - value_fn(mask)
            psi[j] = (b - 1) / b * psi[j] + weights[k - 1] * delta / b
        history.append((b, float(np.max(np.abs(psi - prev)))))
    return psi, history


def exact_shapley(train: Dataset, spec: UtilitySpec, max_exact_n: int = DEFAULT_EXACT_CAP) -> ValuationResult:
    """Exact Shapley values of every training sample (memoized enumeration)."""
    n = len(train)
    if n < 1:
        raise DataError("training dataset is empty")
    if n > max_exact_n:
        raise ConfigError(
            f"exact enumeration capped at N={max_exact_n} (2^N fits); use tmc_shapley for N={n}"
        )
    ids, value_fn = make_subset_value_fn(train, spec)
    phi = exact_shapley_values(n, value_fn)
    return ValuationResult(
        values={ids[i]: float(phi[i]) for i in range(n)},
        method="exact",
        permutations_used=0,
        convergence_history=(),
    )


def tmc_shapley(
    train: Dataset,
    spec: UtilitySpec,
    tol: float | None = None,
    window: int | None = None,
    rel_change: float = 0.01,
    max_permutations: int | None = None,
    seed: int = 0,
) -> ValuationResult:
    """Truncated Monte Carlo Shapley on the dataset (defaults: tol = 1% of
    |v(D)|, window = N, budget = 3N permutations)."""
    n = len(train)
    if n < 1:
        raise DataError("training dataset is empty")
    ids, value_fn = make_subset_value_fn(train, spec)
    if tol is None:
        tol = 0.01 * abs(value_fn((1 << n) - 1))
    if max_permutations is None:
        max_permutations = 3 * n
    if window is None:
        window = n
    phi, used, history = tmc_shapley_values(
        n, value_fn, tol=tol, max_permutations=max_permutations,
        window=window, rel_change=rel_change, seed=seed,
    )
    return ValuationResult(
        values={ids[i]: float(phi[i]) for i in range(n)},
        method="tmc",
        permutations_used=used,
        convergence_history=tuple(history),
        seed=seed,
    )


def beta_shapley(
    train: Dataset,
    spec: UtilitySpec,
    params: BetaParams,
    iterations: int | None = None,
    seed: int = 0,
    paper_literal_weights: bool = False,
) -> ValuationResult:
    """Monte Carlo Beta Shapley values (default budget: 3N rounds)."""
    n = len(train)
    if n < 1:
        raise DataError("training dataset is empty")
    ids, value_fn = make_subset_value_fn(train, spec)
    if iterations is None:
        iterations = 3 * n
    psi, history = beta_shapley_values(
        n, value_fn, params, iterations=iterations, seed=seed,
        paper_literal_weights=paper_literal_weights,
    )
    return ValuationResult(
        values={ids[i]: float(psi[i]) for i in range(n)},
        method="beta",
        permutations_used=iterations,
        convergence_history=tuple(history),
        seed=seed,
    )


def loo_values(train: Dataset, spec: UtilitySpec) -> ValuationResult:
    """Leave-one-out values: v(D) - v(D minus i) for every sample."""
    n = len(train)
    if n < 2:
        raise DataError(f"leave-one-out needs at least 2 samples, got {n}")
    ids, value_fn = make_subset_value_fn(train, spec)
    full_mask = (1 << n) - 1
    v_full = value_fn(full_mask)
    values = {ids[i]: v_full - value_fn(full_mask & ~(1 << i)) for i in range(n)}
    return ValuationResult(
        values=values, method="loo", permutations_used=0, convergence_history=()
    )


def random_values(train: Dataset, seed: int = 0) -> ValuationResult:
    """IID uniform pseudo-values; drives the random-removal baseline ordering."""
    ids = _sorted_ids(train)
    rng = np.random.default_rng(seed)
    draws = rng.random(len(ids))
    return ValuationResult(
        values={ids[i]: float(draws[i]) for i in range(len(ids))},
        method="random",
        permutations_used=0,
        convergence_history=(),
        seed=seed,
    )
