"""Value-guided data selection: removal traces, strategy comparison, rank agreement.

Selection uses the one-time values computed on the full training set (no
re-valuation between removals unless explicitly requested), re-evaluating
test RMSE after every removal through the same utility as the valuation, so
step-0 RMSE equals the standalone module metric of the full model exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .dataset import Dataset
from .errors import ConfigError, DataError
from .geo import cluster_by_radius
from .valuation import (
    UtilitySpec,
    ValuationResult,
    loo_values,
    random_values,
    tmc_shapley,
    utility,
)

MODES = ("remove_low", "remove_high")


@dataclass(frozen=True)
class StopRule:
    """Stop after ``patience`` consecutive non-improving steps or after
    ``max_removals`` removed points (None: half the training set)."""

    patience: int = 5
    max_removals: int | None = None

    def __post_init__(self) -> None:
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.max_removals is not None and self.max_removals < 0:
            raise ConfigError(f"max_removals must be >= 0, got {self.max_removals}")


@dataclass(frozen=True)
class SelectionStep:
    removed_ids: tuple[str, ...]
    train_size: int
    rmse_after: float


@dataclass(frozen=True, eq=False)
class SelectionTrace:
    """Ordered removal log; step 0 is the full dataset with nothing removed."""

    steps: tuple[SelectionStep, ...]
    direction: str
    valuation_method: str
    mode: str
    cluster_radius_km: float | None = None
    stop_reason: str = ""

    def initial_rmse(self) -> float:
        return self.steps[0].rmse_after

    def best_step_index(self) -> int:
        rmses = [s.rmse_after for s in self.steps]
        return int(np.argmin(rmses))

    def best_rmse(self) -> float:
        return self.steps[self.best_step_index()].rmse_after

    def removed_at_best(self) -> int:
        best = self.best_step_index()
        return sum(len(s.removed_ids) for s in self.steps[1 : best + 1])

    def total_removed(self) -> int:
        return sum(len(s.removed_ids) for s in self.steps)

    def to_json_dict(self) -> dict:
        return {
            "direction": self.direction,
            "valuation_method": self.valuation_method,
            "mode": self.mode,
            "cluster_radius_km": self.cluster_radius_km,
            "stop_reason": self.stop_reason,
            "steps": [
                {
                    "removed_ids": list(s.removed_ids),
                    "train_size": s.train_size,
                    "rmse_after": s.rmse_after,
                }
                for s in self.steps
            ],
        }


def _removal_order(values: ValuationResult, mode: str) -> list[str]:
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    return values.ordered_ids(ascending=(mode == "remove_low"))


def _check_coverage(train: Dataset, values: ValuationResult) -> None:
    missing = set(train.ids()) - set(values.values)
    if missing:
        raise DataError(f"values missing for training ids {sorted(missing)}")


def _run_selection(
    train: Dataset,
    spec: UtilitySpec,
    values: ValuationResult,
    mode: str,
    stop: StopRule,
    radius_km: float | None,
    revalue_every: int,
    revalue_fn: Callable[[Dataset], ValuationResult] | None,
) -> SelectionTrace:
    _check_coverage(train, values)
    max_removals = stop.max_removals if stop.max_removals is not None else len(train) // 2

    remaining = list(train.ids())
    order = [i for i in _removal_order(values, mode) if i in set(remaining)]
    steps = [SelectionStep((), len(remaining), -utility(spec, train))]
    best = steps[0].rmse_after
    no_improve = 0
    removed_total = 0
    stop_reason = "order_exhausted"

    while order:
        if removed_total >= max_removals:
            stop_reason = "max_removals"
            break
        selected = order[0]
        if radius_km is None:
            cluster_ids = (selected,)
        else:
            locs = [train.by_id(i).location for i in remaining]
            members = cluster_by_radius(locs, remaining.index(selected), radius_km)
            cluster_ids = tuple(sorted(remaining[i] for i in members))
        if len(cluster_ids) >= len(remaining):
            stop_reason = "exhausted"
            break
        removed_set = set(cluster_ids)
        remaining = [i for i in remaining if i not in removed_set]
        order = [i for i in order if i not in removed_set]
        removed_total += len(cluster_ids)
        subset = train.subset(remaining)
        rmse = -utility(spec, subset)
        steps.append(SelectionStep(cluster_ids, len(remaining), rmse))
        if rmse < best:
            best = rmse
            no_improve = 0
        else:
            no_improve += 1
        if no_improve >= stop.patience:
            stop_reason = "patience"
            break
        if revalue_every > 0 and revalue_fn is not None and removed_total % revalue_every == 0:
            values = revalue_fn(subset)
            _check_coverage(subset, values)
            order = [i for i in _removal_order(values, mode) if i in set(remaining)]

    return SelectionTrace(
        steps=tuple(steps),
        direction=spec.direction,
        valuation_method=values.method,
        mode=mode,
        cluster_radius_km=radius_km,
        stop_reason=stop_reason,
    )


def iterative_select(
    train: Dataset,
    spec: UtilitySpec,
    values: ValuationResult,
    mode: str = "remove_low",
    stop: StopRule | None = None,
    revalue_every: int = 0,
    revalue_fn: Callable[[Dataset], ValuationResult] | None = None,
) -> SelectionTrace:
    """Remove one point per step in value order, tracking test RMSE.

    remove_low removes the lowest-valued remaining point each step,
    remove_high the highest-valued. Ties in value break by ascending sample
    id. Values are *not* recomputed after removals unless ``revalue_every``
    is positive and a ``revalue_fn`` is supplied.
    """
    return _run_selection(
        train, spec, values, mode, stop or StopRule(), None, revalue_every, revalue_fn
    )


def cluster_select(
    train: Dataset,
    spec: UtilitySpec,
    values: ValuationResult,
    mode: str = "remove_low",
    radius_km: float = 100.0,
    stop: StopRule | None = None,
) -> SelectionTrace:
    """Like iterative_select, but each step removes the selected point plus
    every remaining point within ``radius_km`` of it."""
    if radius_km <= 0.0:
        raise ConfigError(f"radius_km must be positive, got {radius_km}")
    return _run_selection(train, spec, values, mode, stop or StopRule(), radius_km, 0, None)


@dataclass(frozen=True)
class StrategyComparison:
    method: str
    initial_rmse: float
    best_rmse: float
    points_removed: int
    delta_rmse: float

    def to_json_dict(self) -> dict:
        return {
            "method": self.method,
            "initial_rmse": self.initial_rmse,
            "best_rmse": self.best_rmse,
            "points_removed": self.points_removed,
            "delta_rmse": self.delta_rmse,
        }


def compare_strategies(
    train: Dataset,
    spec: UtilitySpec,
    budget: int,
    seed: int = 0,
    tmc_tol: float | None = None,
    tmc_max_permutations: int | None = None,
) -> list[StrategyComparison]:
    """Remove-low traces under random, leave-one-out and TMC-Shapley values.

    Each strategy removes up to ``budget`` points (no early stopping), and
    reports initial RMSE, the best RMSE along its trace, how many points were
    removed at that best step, and the RMSE reduction.
    """
    if budget < 0:
        raise ConfigError(f"budget must be >= 0, got {budget}")
    strategies = [
        ("random", random_values(train, seed=seed)),
        ("loo", loo_values(train, spec)),
        (
            "tmc",
            tmc_shapley(
                train, spec, tol=tmc_tol, max_permutations=tmc_max_permutations, seed=seed
            ),
        ),
    ]
    stop = StopRule(patience=budget + 1, max_removals=budget)
    out = []
    for name, values in strategies:
        trace = _run_selection(train, spec, values, "remove_low", stop, None, 0, None)
        initial = trace.initial_rmse()
        best = trace.best_rmse()
        out.append(
            StrategyComparison(
                method=name,
                initial_rmse=initial,
                best_rmse=best,
                points_removed=trace.removed_at_best(),
                delta_rmse=initial - best,
            )
        )
    return out


@dataclass(frozen=True, eq=False)
class RankComparison:
    """Agreement between two rankings: top-k overlap/Jaccard curves, the
    (rank_a, rank_b) scatter pairs, and Spearman's rho."""

    overlap_curve: tuple[float, ...]
    jaccard_curve: tuple[float, ...]
    rank_pairs: tuple[tuple[int, int], ...]
    spearman: float

    def to_json_dict(self) -> dict:
        return {
            "overlap_curve": list(self.overlap_curve),
            "jaccard_curve": list(self.jaccard_curve),
            "rank_pairs": [list(p) for p in self.rank_pairs],
            "spearman": self.spearman,
        }


def rank_compare(a: ValuationResult, b: ValuationResult) -> RankComparison:
    """Compare two valuations of the same ids.

    Ranks are descending by value with ascending-id tie break (rank 1 = most
    valuable). overlap(k) = |top_k(a) & top_k(b)| / k; jaccard(k) uses the
    union instead of k. Spearman's rho is computed over the full rankings.
    """
    if set(a.values) != set(b.values):
        raise DataError("valuations cover different id sets")
    n = len(a.values)
    order_a = a.ordered_ids(ascending=False)
    order_b = b.ordered_ids(ascending=False)
    rank_a = {i: r + 1 for r, i in enumerate(order_a)}
    rank_b = {i: r + 1 for r, i in enumerate(order_b)}

    overlap = []
    jaccard = []
    top_a: set[str] = set()
    top_b: set[str] = set()
    inter = 0
    for k in range(1, n + 1):
        ia, ib = order_a[k - 1], order_b[k - 1]
        if ia == ib:
            inter += 1
        else:
            if ia in top_b:
                inter += 1
            if ib in top_a:
                inter += 1
        top_a.add(ia)
        top_b.add(ib)
        overlap.append(inter / k)
        jaccard.append(inter / (2 * k - inter))

    pairs = tuple((rank_a[i], rank_b[i]) for i in sorted(a.values))
    if n < 2:
        rho = 1.0
    else:
        d2 = sum((ra - rb) ** 2 for ra, rb in pairs)
        rho = 1.0 - 6.0 * d2 / (n * (n * n - 1))
    return RankComparison(
        overlap_curve=tuple(overlap),
        jaccard_curve=tuple(jaccard),
        rank_pairs=pairs,
        spearman=rho,
    )


@dataclass(frozen=True)
class SpeciesSummary:
    species: str
    count: int
    mean: float
    median: float
    min: float
    max: float


def species_summary(values: ValuationResult, train: Dataset) -> list[SpeciesSummary]:
    """Per-species value statistics, ordered by mean value descending."""
    missing = set(values.values) - set(train.ids())
    if missing:
        raise DataError(f"value ids not present in dataset: {sorted(missing)}")
    groups: dict[str, list[float]] = {}
    for sample_id, value in values.values.items():
        label = train.by_id(sample_id).species or "(unlabeled)"
        groups.setdefault(label, []).append(value)
    rows = [
        SpeciesSummary(
            species=label,
            count=len(vals),
            mean=float(np.mean(vals)),
            median=float(np.median(vals)),
            min=float(np.min(vals)),
            max=float(np.max(vals)),
        )
        for label, vals in groups.items()
    ]
    rows.sort(key=lambda r: (-r.mean, r.species))
    return rows
