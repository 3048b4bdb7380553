import math

import numpy as np
import pytest

from isoshap.dataset import Dataset, Sample, SyntheticConfig, default_feature_specs, generate_synthetic, split
from isoshap.errors import ConfigError, DataError
from isoshap.geo import Location, build_grid
from isoshap.isoscape import KernelConfig, fit_gp, forward_rmse
from isoshap.selection import (
    RankComparison,
    SelectionTrace,
    StopRule,
    cluster_select,
    compare_strategies,
    iterative_select,
    rank_compare,
    species_summary,
)
from isoshap.valuation import (
    UtilitySpec,
    ValuationResult,
    loo_values,
    random_values,
    utility,
)

KERNEL = KernelConfig(family="exponential", lengthscale_km=500.0, signal_variance=2.0)
BBOX = (40.0, 50.0, -10.0, 10.0)


def make_data(n_total=14, seed=0, noise_sd=0.2):
    specs = default_feature_specs(noise_sd=noise_sd)[:2]
    cfg = SyntheticConfig(n_samples=n_total, bbox=BBOX, feature_specs=specs, seed=seed)
    data, _ = generate_synthetic(cfg)
    return split(data, 0.3, seed=seed)


def gp_forward_spec(train, test):
    return UtilitySpec(
        model_kind="gp", direction="forward", train_universe=train, test=test,
        kernel=KERNEL, noise_variance=0.05,
    )


def fixed_values(ids, vals, method="random"):
    return ValuationResult(
        values=dict(zip(ids, vals)), method=method, permutations_used=0, convergence_history=()
    )


class TestIterativeSelect:
    def test_step_zero_matches_module_metric(self):
        train, test = make_data(12, seed=0)
        spec = gp_forward_spec(train, test)
        values = random_values(train, seed=0)
        trace = iterative_select(train, spec, values, stop=StopRule(patience=2, max_removals=2))
        model = fit_gp(train, KERNEL, 0.05)
        assert trace.steps[0].rmse_after == -(-forward_rmse(model, test))
        assert trace.steps[0].removed_ids == ()
        assert trace.steps[0].train_size == len(train)

    def test_equal_values_removed_in_id_order(self):
        train, test = make_data(12, seed=1)
        spec = gp_forward_spec(train, test)
        ids = sorted(train.ids())
        values = fixed_values(train.ids(), [1.0] * len(train))
        trace = iterative_select(
            train, spec, values, stop=StopRule(patience=99, max_removals=3)
        )
        removed = [s.removed_ids[0] for s in trace.steps[1:]]
        assert removed == ids[:3]

    def test_train_size_strictly_decreasing(self):
        train, test = make_data(12, seed=2)
        spec = gp_forward_spec(train, test)
        values = random_values(train, seed=1)
        trace = iterative_select(train, spec, values, stop=StopRule(patience=99, max_removals=4))
        sizes = [s.train_size for s in trace.steps]
        assert sizes == sorted(sizes, reverse=True)
        assert len(set(sizes)) == len(sizes)

    def test_monotone_transform_of_values_gives_identical_trace(self):
        train, test = make_data(12, seed=3)
        spec = gp_forward_spec(train, test)
        base = random_values(train, seed=2)
        transformed = ValuationResult(
            values={k: math.exp(3.0 * v) + 1.0 for k, v in base.values.items()},
            method=base.method, permutations_used=0, convergence_history=(),
        )
        stop = StopRule(patience=99, max_removals=4)
        t1 = iterative_select(train, spec, base, stop=stop)
        t2 = iterative_select(train, spec, transformed, stop=stop)
        assert [s.removed_ids for s in t1.steps] == [s.removed_ids for s in t2.steps]
        assert [s.rmse_after for s in t1.steps] == [s.rmse_after for s in t2.steps]

    def test_remove_high_picks_highest(self):
        train, test = make_data(12, seed=4)
        spec = gp_forward_spec(train, test)
        ids = list(train.ids())
        vals = list(np.linspace(0.0, 1.0, len(ids)))
        values = fixed_values(ids, vals)
        trace = iterative_select(
            train, spec, values, mode="remove_high", stop=StopRule(patience=99, max_removals=2)
        )
        removed = [s.removed_ids[0] for s in trace.steps[1:]]
        by_value = sorted(zip(vals, ids), reverse=True)
        assert removed == [i for _, i in by_value[:2]]

    def test_patience_stop(self):
        train, test = make_data(12, seed=5)
        spec = gp_forward_spec(train, test)
        # Remove the best points first: RMSE should not keep improving for long.
        values = loo_values(train, spec)
        trace = iterative_select(
            train, spec, values, mode="remove_high", stop=StopRule(patience=2, max_removals=99)
        )
        assert trace.stop_reason in ("patience", "max_removals", "exhausted")
        if trace.stop_reason == "patience":
            best = min(s.rmse_after for s in trace.steps)
            assert all(s.rmse_after > best - 1e-15 for s in trace.steps[-2:])

    def test_exhaustion_flagged(self):
        train, test = make_data(8, seed=6)
        train = train.subset(list(train.ids())[:3])
        spec = gp_forward_spec(train, test)
        values = random_values(train, seed=0)
        trace = iterative_select(
            train, spec, values, stop=StopRule(patience=99, max_removals=99)
        )
        assert trace.stop_reason == "exhausted"
        assert trace.steps[-1].train_size >= 1

    def test_values_must_cover_train(self):
        train, test = make_data(10, seed=7)
        spec = gp_forward_spec(train, test)
        partial = fixed_values(list(train.ids())[:-1], range(len(train) - 1))
        with pytest.raises(DataError):
            iterative_select(train, spec, partial)

    def test_revalue_every_reorders(self):
        train, test = make_data(12, seed=8)
        spec = gp_forward_spec(train, test)
        values = loo_values(train, spec)
        calls = []

        def revalue(subset):
            calls.append(len(subset))
            return loo_values(subset, spec)

        trace = iterative_select(
            train, spec, values, stop=StopRule(patience=99, max_removals=4),
            revalue_every=2, revalue_fn=revalue,
        )
        assert calls == [len(train) - 2, len(train) - 4]
        assert trace.total_removed() == 4


class TestClusterSelect:
    def test_tiny_radius_equals_iterative(self):
        train, test = make_data(12, seed=9)
        spec = gp_forward_spec(train, test)
        values = random_values(train, seed=3)
        stop = StopRule(patience=99, max_removals=4)
        pointwise = iterative_select(train, spec, values, stop=stop)
        clustered = cluster_select(train, spec, values, radius_km=1e-9, stop=stop)
        assert [s.removed_ids for s in pointwise.steps] == [s.removed_ids for s in clustered.steps]
        assert [s.rmse_after for s in pointwise.steps] == [s.rmse_after for s in clustered.steps]

    def test_colocated_points_removed_together(self):
        base, test = make_data(10, seed=10)
        twin_src = base.samples[0]
        twin = Sample("zz_twin", twin_src.location, twin_src.species, dict(twin_src.features))
        train = Dataset(samples=base.samples[:6] + (twin,), feature_names=base.feature_names)
        spec = gp_forward_spec(train, test)
        # Give the co-located pair the two lowest values.
        ids = list(train.ids())
        vals = [(-2.0 if i in (twin_src.id, "zz_twin") else float(k)) for k, i in enumerate(ids)]
        values = fixed_values(ids, vals)
        trace = cluster_select(
            train, spec, values, radius_km=1.0, stop=StopRule(patience=99, max_removals=4)
        )
        assert set(trace.steps[1].removed_ids) == {twin_src.id, "zz_twin"}

    def test_radius_must_be_positive(self):
        train, test = make_data(10, seed=11)
        spec = gp_forward_spec(train, test)
        values = random_values(train, seed=0)
        with pytest.raises(ConfigError):
            cluster_select(train, spec, values, radius_km=0.0)

    def test_cluster_emptying_stops_flagged(self):
        train, test = make_data(8, seed=12)
        train = train.subset(list(train.ids())[:3])
        spec = gp_forward_spec(train, test)
        values = random_values(train, seed=0)
        trace = cluster_select(
            train, spec, values, radius_km=30000.0, stop=StopRule(patience=99, max_removals=99)
        )
        assert trace.stop_reason == "exhausted"
        assert len(trace.steps) == 1  # nothing could be removed


class TestCompareStrategies:
    def test_budget_zero_reports_initial(self):
        train, test = make_data(10, seed=13)
        spec = gp_forward_spec(train, test)
        rows = compare_strategies(train, spec, budget=0, seed=0, tmc_max_permutations=4)
        assert [r.method for r in rows] == ["random", "loo", "tmc"]
        for r in rows:
            assert r.best_rmse == r.initial_rmse
            assert r.points_removed == 0
            assert r.delta_rmse == 0.0

    def test_delta_nonnegative_and_consistent(self):
        train, test = make_data(12, seed=14)
        spec = gp_forward_spec(train, test)
        rows = compare_strategies(train, spec, budget=3, seed=1, tmc_max_permutations=6)
        for r in rows:
            assert r.delta_rmse == pytest.approx(r.initial_rmse - r.best_rmse)
            assert r.delta_rmse >= 0.0
            assert 0 <= r.points_removed <= 3

    def test_shared_initial_rmse(self):
        train, test = make_data(10, seed=15)
        spec = gp_forward_spec(train, test)
        rows = compare_strategies(train, spec, budget=2, seed=2, tmc_max_permutations=4)
        assert len({r.initial_rmse for r in rows}) == 1


class TestRankCompare:
    def test_self_comparison(self):
        vals = fixed_values(["a", "b", "c", "d"], [0.4, 0.1, 0.9, -0.2])
        rc = rank_compare(vals, vals)
        assert all(o == 1.0 for o in rc.overlap_curve)
        assert all(j == 1.0 for j in rc.jaccard_curve)
        assert rc.spearman == 1.0

    def test_reversed_rankings(self):
        a = fixed_values(["a", "b", "c", "d"], [4.0, 3.0, 2.0, 1.0])
        b = fixed_values(["a", "b", "c", "d"], [1.0, 2.0, 3.0, 4.0])
        rc = rank_compare(a, b)
        assert rc.spearman == -1.0
        assert rc.overlap_curve[1] == 0.0  # overlap at k=2
        assert rc.overlap_curve[-1] == 1.0

    def test_full_set_always_coincides(self):
        rng = np.random.default_rng(5)
        ids = [f"s{i}" for i in range(9)]
        a = fixed_values(ids, rng.normal(size=9))
        b = fixed_values(ids, rng.normal(size=9))
        rc = rank_compare(a, b)
        assert rc.overlap_curve[-1] == 1.0
        assert rc.jaccard_curve[-1] == 1.0
        assert -1.0 <= rc.spearman <= 1.0

    def test_input_order_invariance(self):
        rng = np.random.default_rng(6)
        ids = [f"s{i}" for i in range(8)]
        vals_a = list(rng.normal(size=8))
        vals_b = list(rng.normal(size=8))
        rc1 = rank_compare(fixed_values(ids, vals_a), fixed_values(ids, vals_b))
        perm = list(rng.permutation(8))
        rc2 = rank_compare(
            fixed_values([ids[p] for p in perm], [vals_a[p] for p in perm]),
            fixed_values([ids[p] for p in perm], [vals_b[p] for p in perm]),
        )
        assert rc1.overlap_curve == rc2.overlap_curve
        assert rc1.jaccard_curve == rc2.jaccard_curve
        assert rc1.rank_pairs == rc2.rank_pairs
        assert rc1.spearman == rc2.spearman

    def test_incremental_overlap_matches_bruteforce(self):
        rng = np.random.default_rng(7)
        ids = [f"s{i}" for i in range(12)]
        a = fixed_values(ids, rng.normal(size=12))
        b = fixed_values(ids, rng.normal(size=12))
        rc = rank_compare(a, b)
        order_a = a.ordered_ids(ascending=False)
        order_b = b.ordered_ids(ascending=False)
        for k in range(1, 13):
            inter = len(set(order_a[:k]) & set(order_b[:k]))
            union = len(set(order_a[:k]) | set(order_b[:k]))
            assert rc.overlap_curve[k - 1] == pytest.approx(inter / k)
            assert rc.jaccard_curve[k - 1] == pytest.approx(inter / union)

    def test_mismatched_ids_rejected(self):
        a = fixed_values(["a", "b"], [1.0, 2.0])
        b = fixed_values(["a", "c"], [1.0, 2.0])
        with pytest.raises(DataError):
            rank_compare(a, b)


class TestSpeciesSummary:
    def make_train(self, species):
        samples = tuple(
            Sample(f"s{i}", Location(float(i), 0.0), sp, {"f": 1.0})
            for i, sp in enumerate(species)
        )
        return Dataset(samples=samples, feature_names=("f",))

    def test_single_species(self):
        train = self.make_train(["oak", "oak", "oak"])
        values = fixed_values(["s0", "s1", "s2"], [1.0, 2.0, 3.0])
        rows = species_summary(values, train)
        assert len(rows) == 1
        assert rows[0].species == "oak"
        assert rows[0].count == 3
        assert rows[0].mean == 2.0
        assert rows[0].median == 2.0

    def test_two_species_ordering(self):
        train = self.make_train(["A", "A", "B", "B"])
        values = fixed_values(["s0", "s1", "s2", "s3"], [1.0, 1.0, 3.0, 3.0])
        rows = species_summary(values, train)
        assert [r.species for r in rows] == ["B", "A"]
        assert rows[0].mean == 3.0
        assert rows[1].mean == 1.0

    def test_unlabeled_bucket(self):
        train = self.make_train(["", "oak"])
        values = fixed_values(["s0", "s1"], [1.0, 2.0])
        rows = species_summary(values, train)
        assert {r.species for r in rows} == {"(unlabeled)", "oak"}

    def test_unknown_id_rejected(self):
        train = self.make_train(["oak"])
        values = fixed_values(["s0", "nope"], [1.0, 2.0])
        with pytest.raises(DataError):
            species_summary(values, train)


class TestTraceSerialization:
    def test_trace_json_dict(self):
        train, test = make_data(10, seed=16)
        spec = gp_forward_spec(train, test)
        values = random_values(train, seed=4)
        trace = iterative_select(train, spec, values, stop=StopRule(patience=2, max_removals=2))
        d = trace.to_json_dict()
        assert d["mode"] == "remove_low"
        assert d["steps"][0]["removed_ids"] == []
        assert len(d["steps"]) == len(trace.steps)
