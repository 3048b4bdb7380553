"""Command-line surface: generate | value | select | report.

Every command is a pure function of (config file, input files, seed): outputs
are written with sorted keys, stable float formatting and no timestamps, so
reruns with the same config produce byte-identical files. All output files
carry a header block (JSON ``_meta`` / CSV ``#`` comments) with the config
hash and tool version.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.

One master seed (config ``seed``, overridable with --seed) governs all
randomness; sub-seeds are derived at fixed offsets: synthetic data +0,
train/test split +1, valuation +2, forest bagging +3.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from . import __version__
from .dataset import (
    Dataset,
    FeatureFieldSpec,
    FieldTerm,
    MissingPolicy,
    SyntheticConfig,
    apply_missing_policy,
    default_feature_specs,
    generate_synthetic,
    load_csv,
    split,
    write_csv,
)
from .errors import ConfigError, DataError, NumericalError
from .forest import ForestConfig
from .geo import build_grid
from .isoscape import KernelConfig
from .selection import (
    StopRule,
    cluster_select,
    compare_strategies,
    iterative_select,
    rank_compare,
    species_summary,
)
from .valuation import (
    BetaParams,
    UtilitySpec,
    ValuationResult,
    beta_shapley,
    exact_shapley,
    loo_values,
    random_values,
    tmc_shapley,
    utility,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


# ---------------------------------------------------------------------------
# Config plumbing
# ---------------------------------------------------------------------------

def _load_config(path: str) -> dict:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    return cfg


def _config_hash(cfg: Mapping[str, Any]) -> str:
    # The hash identifies the analytical configuration; where the files land
    # does not change what was computed.
    hashed = {k: v for k, v in cfg.items() if k != "out"}
    canonical = json.dumps(hashed, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


def _meta(cfg: Mapping[str, Any]) -> dict:
    return {"config_hash": _config_hash(cfg), "tool_version": __version__}


def _header_lines(cfg: Mapping[str, Any]) -> tuple[str, str]:
    meta = _meta(cfg)
    return (f"config_hash={meta['config_hash']}", f"tool_version={meta['tool_version']}")


def _write_json(path: Path, payload: dict, cfg: Mapping[str, Any]) -> None:
    payload = {"_meta": _meta(cfg), **payload}
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence], cfg) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        for line in _header_lines(cfg):
            fh.write(f"# {line}\n")
        writer = csv.writer(fh)
        writer.writerow(list(header))
        for row in rows:
            writer.writerow([_cell(v) for v in row])


def _cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _section(cfg: Mapping[str, Any], name: str) -> dict:
    value = cfg.get(name, {})
    if value is None:
        return {}
    if not isinstance(value, Mapping):
        raise ConfigError(f"config section {name!r} must be an object")
    return dict(value)


def _out_dir(cfg: Mapping[str, Any]) -> Path:
    out = cfg.get("out", "out")
    path = Path(out)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    return path


def _master_seed(cfg: Mapping[str, Any]) -> int:
    seed = cfg.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed must be a nonnegative integer, got {seed!r}")
    return seed


# ---------------------------------------------------------------------------
# Dataset / model assembly
# ---------------------------------------------------------------------------

def _feature_specs_from_config(section: Mapping[str, Any]) -> tuple[FeatureFieldSpec, ...]:
    features = section.get("features", "default")
    noise_sd = section.get("noise_sd", 0.3)
    if features == "default":
        if isinstance(noise_sd, Mapping):
            raise ConfigError("per-feature noise_sd requires explicit feature specs")
        return default_feature_specs(noise_sd=float(noise_sd))
    if not isinstance(features, list):
        raise ConfigError("dataset.synthetic.features must be 'default' or a list of specs")
    specs = []
    for item in features:
        try:
            terms = tuple(
                FieldTerm(
                    kind=t["kind"],
                    amplitude=float(t["amplitude"]),
                    lat_scale=float(t.get("lat_scale", 0.0)),
                    lon_scale=float(t.get("lon_scale", 0.0)),
                    phase=float(t.get("phase", 0.0)),
                )
                for t in item["terms"]
            )
            sd = item.get("noise_sd", noise_sd)
            if isinstance(sd, Mapping):
                sd = sd[item["name"]]
            specs.append(
                FeatureFieldSpec(
                    name=str(item["name"]),
                    baseline=float(item.get("baseline", 0.0)),
                    terms=terms,
                    noise_sd=float(sd),
                )
            )
        except KeyError as exc:
            raise ConfigError(f"feature spec missing key {exc}") from exc
    return tuple(specs)


def _synthetic_config(cfg: Mapping[str, Any], seed: int) -> SyntheticConfig:
    section = _section(_section(cfg, "dataset"), "synthetic")
    if not section:
        raise ConfigError("config has no dataset.synthetic section")
    if "n_samples" not in section or "bbox" not in section:
        raise ConfigError("dataset.synthetic requires n_samples and bbox")
    bbox = section["bbox"]
    if not (isinstance(bbox, list) and len(bbox) == 4):
        raise ConfigError("bbox must be [lat_min, lat_max, lon_min, lon_max]")
    return SyntheticConfig(
        n_samples=int(section["n_samples"]),
        bbox=tuple(float(v) for v in bbox),
        feature_specs=_feature_specs_from_config(section),
        corrupt_fraction=float(section.get("corrupt_fraction", 0.0)),
        corrupt_magnitude=float(section.get("corrupt_magnitude", 0.0)),
        seed=seed,
        species_labels=tuple(section.get("species_labels", ("sp_a", "sp_b"))),
        missing_fraction=float(section.get("missing_fraction", 0.0)),
    )


def _load_dataset(cfg: Mapping[str, Any], seed: int) -> Dataset:
    section = _section(cfg, "dataset")
    if section.get("csv"):
        try:
            return load_csv(section["csv"])
        except FileNotFoundError as exc:
            raise DataError(f"dataset file not found: {section['csv']}") from exc
    if section.get("synthetic"):
        data, _ = generate_synthetic(_synthetic_config(cfg, seed))
        return data
    raise ConfigError("config needs dataset.csv or dataset.synthetic")


def _prepare_splits(cfg: Mapping[str, Any], seed: int) -> tuple[Dataset, Dataset]:
    section = _section(cfg, "dataset")
    data = _load_dataset(cfg, seed)
    test_fraction = float(section.get("test_fraction", 0.2))
    train, test = split(data, test_fraction, seed=seed + 1)
    policy_name = section.get("missing_policy")
    if policy_name:
        try:
            policy = MissingPolicy(policy_name)
        except ValueError:
            raise ConfigError(
                f"unknown missing_policy {policy_name!r}; choose median_impute or listwise_delete"
            ) from None
        # Medians come from the training split only, applied to both splits.
        reference = train
        train = apply_missing_policy(train, policy, reference=reference)
        test = apply_missing_policy(test, policy, reference=reference)
    return train, test


def _grid_from_config(cfg: Mapping[str, Any], train: Dataset, test: Dataset):
    section = _section(cfg, "grid")
    resolution = float(section.get("resolution_deg", 1.0))
    bbox = section.get("bbox")
    if bbox is None:
        # Fall back to the data extent, padded by one cell.
        lats = np.concatenate([train.lat_array(), test.lat_array()])
        lons = np.concatenate([train.lon_array(), test.lon_array()])
        bbox = [
            max(-90.0, float(lats.min()) - resolution),
            min(90.0, float(lats.max()) + resolution),
            max(-180.0, float(lons.min()) - resolution),
            min(180.0, float(lons.max()) + resolution),
        ]
    if not (isinstance(bbox, list) and len(bbox) == 4):
        raise ConfigError("grid.bbox must be [lat_min, lat_max, lon_min, lon_max]")
    return build_grid(tuple(float(v) for v in bbox), resolution)


def _build_spec(cfg: Mapping[str, Any], train: Dataset, test: Dataset, seed: int) -> UtilitySpec:
    model = _section(cfg, "model")
    kind = model.get("kind", "gp")
    direction = model.get("direction", "backward")
    if kind == "gp":
        ks = _section(model, "kernel")
        kernel = KernelConfig(
            family=ks.get("family", "exponential"),
            lengthscale_km=float(ks.get("lengthscale_km", 500.0)),
            signal_variance=float(ks.get("signal_variance", 1.0)),
        )
        noise = model.get("noise_variance", 0.1)
        if isinstance(noise, Mapping):
            noise = {str(k): float(v) for k, v in noise.items()}
        else:
            noise = float(noise)
        grid = _grid_from_config(cfg, train, test) if direction == "backward" else None
        return UtilitySpec(
            model_kind="gp",
            direction=direction,
            train_universe=train,
            test=test,
            kernel=kernel,
            noise_variance=noise,
            mean_policy=model.get("mean_policy", "train_mean"),
            grid=grid,
        )
    if kind == "forest":
        fs = _section(model, "forest")
        forest_cfg = ForestConfig(
            n_trees=int(fs.get("n_trees", 200)),
            max_depth=fs.get("max_depth"),
            min_leaf=int(fs.get("min_leaf", 2)),
            features_per_split=fs.get("features_per_split", "auto"),
            seed=int(fs.get("seed", seed + 3)),
        )
        return UtilitySpec(
            model_kind="forest",
            direction=direction,
            train_universe=train,
            test=test,
            forest_config=forest_cfg,
        )
    raise ConfigError(f"unknown model.kind {kind!r}; choose gp or forest")


def _run_valuation(cfg, train: Dataset, spec: UtilitySpec, seed: int) -> ValuationResult:
    section = _section(cfg, "valuation")
    method = section.get("method", "tmc")
    if method == "exact":
        return exact_shapley(train, spec)
    if method == "tmc":
        return tmc_shapley(
            train,
            spec,
            tol=section.get("tolerance"),
            window=section.get("window"),
            rel_change=float(section.get("rel_change", 0.01)),
            max_permutations=section.get("max_permutations"),
            seed=seed + 2,
        )
    if method == "beta":
        return beta_shapley(
            train,
            spec,
            BetaParams(
                alpha=float(section.get("beta_alpha", 1.0)),
                beta=float(section.get("beta_beta", 1.0)),
            ),
            iterations=section.get("beta_iterations"),
            seed=seed + 2,
            paper_literal_weights=bool(section.get("paper_literal_weights", False)),
        )
    if method == "loo":
        return loo_values(train, spec)
    if method == "random":
        return random_values(train, seed=seed + 2)
    raise ConfigError(f"unknown valuation.method {method!r}")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_generate(cfg: Mapping[str, Any]) -> int:
    out = _out_dir(cfg)
    seed = _master_seed(cfg)
    synth = _synthetic_config(cfg, seed)
    data, corrupted = generate_synthetic(synth)
    csv_path = out / "dataset.csv"
    write_csv(data, csv_path, header_lines=_header_lines(cfg))
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(list(corrupted)) + "\n", encoding="utf-8")
    print(
        f"generated {len(data)} samples, {len(data.feature_names)} features, "
        f"{len(corrupted)} corrupted -> {csv_path}, {manifest_path}"
    )
    return EXIT_OK


def cmd_value(cfg: Mapping[str, Any]) -> int:
    out = _out_dir(cfg)
    seed = _master_seed(cfg)
    train, test = _prepare_splits(cfg, seed)
    spec = _build_spec(cfg, train, test, seed)
    result = _run_valuation(cfg, train, spec, seed)

    vals = np.array(sorted(result.values.values()))
    summary = {
        "mean_value": float(vals.mean()),
        "min_value": float(vals.min()),
        "max_value": float(vals.max()),
        "v_full": utility(spec, train),
        "v_empty": spec.baseline_utility(),
        "n_train": len(train),
        "n_test": len(test),
        "empty_set_policy": spec.empty_set_policy,
    }
    payload = result.to_json_dict()
    payload["summary"] = summary
    _write_json(out / "values.json", payload, cfg)

    bins = int(_section(cfg, "valuation").get("histogram_bins", 20))
    lo, hi = float(vals.min()), float(vals.max())
    if hi <= lo:
        hi = lo + 1e-12
    counts, edges = np.histogram(vals, bins=bins, range=(lo, hi))
    rows = [
        (float(edges[i]), float(edges[i + 1]), int(counts[i]))
        for i in range(len(counts))
    ]
    with (out / "histogram.csv").open("w", newline="", encoding="utf-8") as fh:
        for line in _header_lines(cfg):
            fh.write(f"# {line}\n")
        fh.write(f"# mean_value={summary['mean_value']!r}\n")
        writer = csv.writer(fh)
        writer.writerow(["bin_left", "bin_right", "count"])
        for row in rows:
            writer.writerow([_cell(v) for v in row])

    print(
        f"valuation method={result.method} n={len(result.values)} "
        f"permutations_used={result.permutations_used} mean={summary['mean_value']:.6f} "
        f"-> {out / 'values.json'}"
    )
    return EXIT_OK


def cmd_select(cfg: Mapping[str, Any]) -> int:
    out = _out_dir(cfg)
    seed = _master_seed(cfg)
    train, test = _prepare_splits(cfg, seed)
    spec = _build_spec(cfg, train, test, seed)
    section = _section(cfg, "selection")

    values = _run_valuation(cfg, train, spec, seed)
    stop = StopRule(
        patience=int(section.get("patience", 5)),
        max_removals=section.get("max_removals"),
    )
    mode = section.get("mode", "remove_low")
    radius = section.get("cluster_radius_km")
    if radius is not None:
        trace = cluster_select(train, spec, values, mode=mode, radius_km=float(radius), stop=stop)
    else:
        revalue_every = int(section.get("revalue_every", 0))
        revalue_fn = None
        if revalue_every > 0:
            def revalue_fn(subset: Dataset) -> ValuationResult:
                return _run_valuation(cfg, subset, spec, seed)
        trace = iterative_select(
            train, spec, values, mode=mode, stop=stop,
            revalue_every=revalue_every, revalue_fn=revalue_fn,
        )

    _write_json(out / "trace.json", trace.to_json_dict(), cfg)
    step_rows = []
    cumulative = 0
    for i, s in enumerate(trace.steps):
        cumulative += len(s.removed_ids)
        step_rows.append((i, cumulative, ";".join(s.removed_ids), s.train_size, s.rmse_after))
    _write_csv(
        out / "trace.csv",
        ["step", "removed_total", "removed_ids", "train_size", "rmse_after"],
        step_rows,
        cfg,
    )

    best = trace.best_step_index()
    removed_at_best: set[str] = set()
    for s in trace.steps[1 : best + 1]:
        removed_at_best.update(s.removed_ids)
    map_rows = [
        (s.id, s.location.lat, s.location.lon, int(s.id in removed_at_best))
        for s in train.samples
    ]
    _write_csv(out / "map.csv", ["id", "lat", "lon", "removed"], map_rows, cfg)

    lines = [
        f"selection mode={mode} steps={len(trace.steps) - 1} stop={trace.stop_reason}",
        f"initial_rmse={trace.initial_rmse():.6f} best_rmse={trace.best_rmse():.6f} "
        f"removed_at_best={trace.removed_at_best()}",
    ]

    budget = section.get("compare_budget")
    if budget is not None:
        rows = compare_strategies(
            train,
            spec,
            budget=int(budget),
            seed=seed + 2,
            tmc_tol=_section(cfg, "valuation").get("tolerance"),
            tmc_max_permutations=_section(cfg, "valuation").get("max_permutations"),
        )
        _write_json(out / "comparison.json", {"strategies": [r.to_json_dict() for r in rows]}, cfg)
        _write_csv(
            out / "comparison.csv",
            ["Method", "Initial RMSE", "Best RMSE", "Points Removed", "Delta RMSE"],
            [
                (r.method, r.initial_rmse, r.best_rmse, r.points_removed, r.delta_rmse)
                for r in rows
            ],
            cfg,
        )
        for r in rows:
            lines.append(
                f"strategy {r.method}: {r.initial_rmse:.6f} -> {r.best_rmse:.6f} "
                f"(removed {r.points_removed}, delta {r.delta_rmse:.6f})"
            )

    print("\n".join(lines))
    return EXIT_OK


def _load_values_file(path: str) -> ValuationResult:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise DataError(f"values file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"values file {path} is not valid JSON: {exc}") from exc
    try:
        return ValuationResult.from_json_dict(payload)
    except KeyError as exc:
        raise DataError(f"values file {path} missing key {exc}") from exc


def cmd_report(cfg: Mapping[str, Any]) -> int:
    out = _out_dir(cfg)
    section = _section(cfg, "report")
    values_a = section.get("values_a")
    values_b = section.get("values_b")
    dataset_csv = section.get("dataset_csv")
    if not values_a:
        raise ConfigError("report requires report.values_a")
    if not (values_b or dataset_csv):
        raise ConfigError("report needs values_b (rank comparison) or dataset_csv (species summary)")

    a = _load_values_file(values_a)
    produced = []

    if values_b:
        b = _load_values_file(values_b)
        rc = rank_compare(a, b)
        _write_json(out / "rank.json", rc.to_json_dict(), cfg)
        _write_csv(
            out / "rank_curves.csv",
            ["k", "overlap", "jaccard"],
            [
                (k + 1, rc.overlap_curve[k], rc.jaccard_curve[k])
                for k in range(len(rc.overlap_curve))
            ],
            cfg,
        )
        produced.append(f"rank comparison (spearman={rc.spearman:.4f}) -> rank.json, rank_curves.csv")

    if dataset_csv:
        try:
            data = load_csv(dataset_csv)
        except FileNotFoundError as exc:
            raise DataError(f"dataset file not found: {dataset_csv}") from exc
        rows = species_summary(a, data)
        _write_csv(
            out / "species.csv",
            ["species", "count", "mean", "median", "min", "max"],
            [(r.species, r.count, r.mean, r.median, r.min, r.max) for r in rows],
            cfg,
        )
        produced.append(f"species summary ({len(rows)} groups) -> species.csv")

    print("\n".join(produced))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

COMMANDS = {
    "generate": cmd_generate,
    "value": cmd_value,
    "select": cmd_select,
    "report": cmd_report,
}


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="isoshap",
        description="Isoscape models with Shapley-based training-data valuation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("generate", "write a synthetic dataset CSV and corruption manifest"),
        ("value", "fit the configured model and value every training sample"),
        ("select", "run value-guided removal experiments"),
        ("report", "rank-agreement and per-species reports from values files"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to JSON config")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="override output directory")
        if name == "report":
            p.add_argument("--values-a", default=None, help="override report.values_a")
            p.add_argument("--values-b", default=None, help="override report.values_b")
            p.add_argument("--dataset-csv", default=None, help="override report.dataset_csv")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = _load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.out is not None:
            cfg["out"] = args.out
        if args.command == "report":
            report = _section(cfg, "report")
            if args.values_a:
                report["values_a"] = args.values_a
            if args.values_b:
                report["values_b"] = args.values_b
            if args.dataset_csv:
                report["dataset_csv"] = args.dataset_csv
            cfg["report"] = report
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
