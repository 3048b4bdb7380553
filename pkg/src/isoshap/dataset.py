"""Sample ingestion, missing-data handling, splitting and synthetic data generation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .geo import Location

CORE_COLUMNS = ("id", "latitude", "longitude", "species")

# Feature names used by the default synthetic generator; stable-isotope ratios
# conventionally reported in per-mil.
DEFAULT_FEATURE_NAMES = ("d13C", "d2H", "d18O")


@dataclass(frozen=True)
class Sample:
    """One reference specimen: location, species label, feature measurements.

    ``features`` maps feature name to a float or None (missing measurement).
    """

    id: str
    location: Location
    species: str
    features: Mapping[str, float | None]


@dataclass(frozen=True, eq=False)
class Dataset:
    """An ordered collection of samples with a consistent feature schema.

    A Dataset may be empty: the valuation machinery uses an empty Dataset to
    represent the empty training subset. Loaders and transformations that
    would *produce* an empty dataset from real data raise instead.
    """

    samples: tuple[Sample, ...]
    feature_names: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.feature_names:
            raise DataError("dataset needs at least one feature column")
        seen: set[str] = set()
        wanted = set(self.feature_names)
        for s in self.samples:
            if s.id in seen:
                raise DataError(f"duplicate sample id {s.id!r}")
            seen.add(s.id)
            if set(s.features.keys()) != wanted:
                raise DataError(
                    f"sample {s.id!r} feature keys {sorted(s.features)} do not match "
                    f"dataset schema {list(self.feature_names)}"
                )

    def __len__(self) -> int:
        return len(self.samples)

    def ids(self) -> tuple[str, ...]:
        return tuple(s.id for s in self.samples)

    def by_id(self, sample_id: str) -> Sample:
        for s in self.samples:
            if s.id == sample_id:
                return s
        raise KeyError(sample_id)

    def subset(self, ids: Iterable[str]) -> "Dataset":
        """Sub-dataset containing ``ids``, in the original sample order."""
        wanted = set(ids)
        unknown = wanted - set(self.ids())
        if unknown:
            raise DataError(f"unknown sample ids {sorted(unknown)}")
        return Dataset(
            samples=tuple(s for s in self.samples if s.id in wanted),
            feature_names=self.feature_names,
        )

    def has_missing(self) -> bool:
        return any(v is None for s in self.samples for v in s.features.values())

    def feature_matrix(self) -> np.ndarray:
        """N x P matrix of feature values in schema order; missing becomes NaN."""
        out = np.full((len(self.samples), len(self.feature_names)), np.nan)
        for i, s in enumerate(self.samples):
            for j, name in enumerate(self.feature_names):
                v = s.features[name]
                if v is not None:
                    out[i, j] = v
        return out

    def lat_array(self) -> np.ndarray:
        return np.array([s.location.lat for s in self.samples])

    def lon_array(self) -> np.ndarray:
        return np.array([s.location.lon for s in self.samples])


class MissingPolicy(Enum):
    """Strategy for feature values that were not measured."""

    MEDIAN_IMPUTE = "median_impute"
    LISTWISE_DELETE = "listwise_delete"


def load_csv(path: str | Path, feature_names: Sequence[str] | None = None) -> Dataset:
    """Load a dataset from CSV.

    Expected header: ``id,latitude,longitude,species,<feature...>``. Empty
    cells in feature columns become missing values. Lines starting with ``#``
    before the header are skipped (output files written by the CLI carry such
    a metadata block).
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines)
    try:
        header = next(reader)
    except StopIteration:
        raise DataError(f"{path}: empty file") from None
    header = [h.strip() for h in header]
    for col in CORE_COLUMNS:
        if col not in header:
            raise DataError(f"{path}: missing required column {col!r}")
    available = [h for h in header if h not in CORE_COLUMNS]
    if feature_names is None:
        features = tuple(available)
    else:
        unknown = set(feature_names) - set(available)
        if unknown:
            raise DataError(f"{path}: requested feature columns not in header: {sorted(unknown)}")
        features = tuple(feature_names)
    if not features:
        raise DataError(f"{path}: no feature columns in header")

    idx = {name: header.index(name) for name in header}
    samples = []
    for row_no, row in enumerate(reader, start=2):
        if not row or all(cell.strip() == "" for cell in row):
            continue
        if len(row) != len(header):
            raise DataError(f"{path}: row {row_no}: expected {len(header)} cells, got {len(row)}")

        def cell(col: str) -> str:
            return row[idx[col]].strip()

        sample_id = cell("id")
        if not sample_id:
            raise DataError(f"{path}: row {row_no}: empty id")
        try:
            lat = float(cell("latitude"))
        except ValueError:
            raise DataError(f"{path}: row {row_no}: column 'latitude': not a number") from None
        try:
            lon = float(cell("longitude"))
        except ValueError:
            raise DataError(f"{path}: row {row_no}: column 'longitude': not a number") from None
        try:
            location = Location(lat, lon)
        except ValueError as exc:
            raise DataError(f"{path}: row {row_no}: {exc}") from None

        values: dict[str, float | None] = {}
        for name in features:
            raw = cell(name)
            if raw == "":
                values[name] = None
            else:
                try:
                    values[name] = float(raw)
                except ValueError:
                    raise DataError(
                        f"{path}: row {row_no}: column {name!r}: not a number"
                    ) from None
        samples.append(Sample(id=sample_id, location=location, species=cell("species"), features=values))

    if not samples:
        raise DataError(f"{path}: no data rows")
    return Dataset(samples=tuple(samples), feature_names=features)


def write_csv(dataset: Dataset, path: str | Path, header_lines: Sequence[str] = ()) -> None:
    """Write a dataset in the schema understood by :func:`load_csv`."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh)
        writer.writerow(list(CORE_COLUMNS) + list(dataset.feature_names))
        for s in dataset.samples:
            row = [s.id, repr(s.location.lat), repr(s.location.lon), s.species]
            for name in dataset.feature_names:
                v = s.features[name]
                row.append("" if v is None else repr(v))
            writer.writerow(row)


def apply_missing_policy(
    d: Dataset, policy: MissingPolicy, reference: Dataset | None = None
) -> Dataset:
    """Resolve missing feature values.

    MEDIAN_IMPUTE replaces each missing value with the per-feature median of
    the non-missing values in ``reference`` (default: ``d`` itself). Passing
    the training split as ``reference`` lets the same medians be applied to
    both splits without test leakage. LISTWISE_DELETE drops samples with any
    missing feature.
    """
    if policy is MissingPolicy.LISTWISE_DELETE:
        kept = tuple(s for s in d.samples if all(v is not None for v in s.features.values()))
        if not kept:
            raise DataError("listwise deletion removed every sample")
        return Dataset(samples=kept, feature_names=d.feature_names)

    if policy is MissingPolicy.MEDIAN_IMPUTE:
        ref = d if reference is None else reference
        medians: dict[str, float] = {}
        for name in d.feature_names:
            vals = [s.features[name] for s in ref.samples if s.features[name] is not None]
            if not vals:
                raise DataError(f"feature {name!r} has no observed values to impute from")
            medians[name] = float(np.median(vals))
        samples = tuple(
            Sample(
                id=s.id,
                location=s.location,
                species=s.species,
                features={
                    name: (medians[name] if s.features[name] is None else s.features[name])
                    for name in d.feature_names
                },
            )
            for s in d.samples
        )
        return Dataset(samples=samples, feature_names=d.feature_names)

    raise ConfigError(f"unknown missing policy {policy!r}")


def split(d: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Random disjoint train/test partition, reproducible given ``seed``.

    The test side gets floor(N * test_fraction) samples, clamped so neither
    side is empty. Sample order within each side follows the input order.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test_fraction must be in (0, 1), got {test_fraction}")
    n = len(d)
    if n < 2:
        raise DataError(f"cannot split a dataset of {n} sample(s)")
    n_test = min(n - 1, max(1, int(n * test_fraction)))
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    test_idx = set(perm[:n_test].tolist())
    train = tuple(s for i, s in enumerate(d.samples) if i not in test_idx)
    test = tuple(s for i, s in enumerate(d.samples) if i in test_idx)
    return (
        Dataset(samples=train, feature_names=d.feature_names),
        Dataset(samples=test, feature_names=d.feature_names),
    )


@dataclass(frozen=True)
class FieldTerm:
    """One additive term of a synthetic ground-truth field.

    kind "linear": amplitude * (lat_scale * lat + lon_scale * lon)
    kind "sin":    amplitude * sin(lat_scale * lat + lon_scale * lon + phase)

    with lat/lon in degrees and scales in radians per degree for "sin".
    """

    kind: str
    amplitude: float
    lat_scale: float = 0.0
    lon_scale: float = 0.0
    phase: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("linear", "sin"):
            raise ConfigError(f"unknown field term kind {self.kind!r}")

    def value(self, lat: float, lon: float) -> float:
        arg = self.lat_scale * lat + self.lon_scale * lon
        if self.kind == "linear":
            return self.amplitude * arg
        return self.amplitude * math.sin(arg + self.phase)


@dataclass(frozen=True)
class FeatureFieldSpec:
    """Smooth ground-truth field plus noise level for one synthetic feature."""

    name: str
    baseline: float
    terms: tuple[FieldTerm, ...]
    noise_sd: float

    def __post_init__(self) -> None:
        if not 2 <= len(self.terms) <= 4:
            raise ConfigError(
                f"feature {self.name!r}: fields are sums of 2-4 terms, got {len(self.terms)}"
            )
        if self.noise_sd < 0.0:
            raise ConfigError(f"feature {self.name!r}: noise_sd must be nonnegative")

    def field_value(self, lat: float, lon: float) -> float:
        return self.baseline + sum(t.value(lat, lon) for t in self.terms)


def default_feature_specs(noise_sd: float = 0.3) -> tuple[FeatureFieldSpec, ...]:
    """Three smooth, low-frequency fields loosely shaped like isotope gradients."""
    return (
        FeatureFieldSpec(
            name="d13C",
            baseline=-26.0,
            terms=(
                FieldTerm("linear", 1.0, lat_scale=0.08),
                FieldTerm("sin", 1.5, lat_scale=0.0, lon_scale=math.pi / 40.0),
            ),
            noise_sd=noise_sd,
        ),
        FeatureFieldSpec(
            name="d2H",
            baseline=-60.0,
            terms=(
                FieldTerm("linear", 1.0, lat_scale=-0.5, lon_scale=0.12),
                FieldTerm("sin", 4.0, lat_scale=math.pi / 60.0, lon_scale=0.0),
                FieldTerm("sin", 2.5, lat_scale=math.pi / 90.0, lon_scale=math.pi / 50.0, phase=0.7),
            ),
            noise_sd=noise_sd,
        ),
        FeatureFieldSpec(
            name="d18O",
            baseline=-8.0,
            terms=(
                FieldTerm("linear", 1.0, lat_scale=-0.06, lon_scale=0.02),
                FieldTerm("sin", 1.2, lat_scale=math.pi / 50.0, lon_scale=math.pi / 70.0, phase=1.3),
            ),
            noise_sd=noise_sd,
        ),
    )


@dataclass(frozen=True)
class SyntheticConfig:
    """Configuration for the synthetic reference-data generator."""

    n_samples: int
    bbox: tuple[float, float, float, float]
    feature_specs: tuple[FeatureFieldSpec, ...]
    corrupt_fraction: float = 0.0
    corrupt_magnitude: float = 0.0
    seed: int = 0
    species_labels: tuple[str, ...] = ("sp_a", "sp_b")
    missing_fraction: float = 0.0

    def __post_init__(self) -> None:
        if self.n_samples < 2:
            raise ConfigError(f"n_samples must be >= 2, got {self.n_samples}")
        lat_min, lat_max, lon_min, lon_max = self.bbox
        if not (lat_min < lat_max and lon_min < lon_max):
            raise ConfigError(f"degenerate bbox {self.bbox}")
        if not self.feature_specs:
            raise ConfigError("at least one feature spec required")
        if not 0.0 <= self.corrupt_fraction <= 1.0:
            raise ConfigError(f"corrupt_fraction must be in [0, 1], got {self.corrupt_fraction}")
        if not 0.0 <= self.missing_fraction < 1.0:
            raise ConfigError(f"missing_fraction must be in [0, 1), got {self.missing_fraction}")
        if not self.species_labels:
            raise ConfigError("at least one species label required")


def generate_synthetic(config: SyntheticConfig) -> tuple[Dataset, tuple[str, ...]]:
    """Generate a synthetic dataset plus the manifest of corrupted sample ids.

    Locations are uniform over the bbox. Each feature value is the smooth
    ground-truth field at the location plus Gaussian noise; a fixed fraction
    of samples is additionally shifted by corrupt_magnitude * noise_sd with a
    random sign per feature. Bit-reproducible for a given seed.
    """
    rng = np.random.default_rng(config.seed)
    n = config.n_samples
    lat_min, lat_max, lon_min, lon_max = config.bbox
    lats = rng.uniform(lat_min, lat_max, n)
    lons = rng.uniform(lon_min, lon_max, n)
    species = rng.choice(np.array(config.species_labels, dtype=object), size=n)

    values = np.empty((n, len(config.feature_specs)))
    for j, spec in enumerate(config.feature_specs):
        noise = rng.normal(0.0, spec.noise_sd, n) if spec.noise_sd > 0 else np.zeros(n)
        for i in range(n):
            values[i, j] = spec.field_value(lats[i], lons[i]) + noise[i]

    n_corrupt = int(round(n * config.corrupt_fraction))
    corrupt_idx = np.sort(rng.choice(n, size=n_corrupt, replace=False)) if n_corrupt else np.array([], dtype=int)
    for i in corrupt_idx:
        signs = rng.choice([-1.0, 1.0], size=len(config.feature_specs))
        for j, spec in enumerate(config.feature_specs):
            values[i, j] += signs[j] * config.corrupt_magnitude * spec.noise_sd

    missing = np.zeros((n, len(config.feature_specs)), dtype=bool)
    if config.missing_fraction > 0.0:
        missing = rng.random((n, len(config.feature_specs))) < config.missing_fraction
        # Never blank out a whole sample; imputation needs at least one value.
        for i in range(n):
            if missing[i].all():
                missing[i, int(rng.integers(len(config.feature_specs)))] = False

    width = max(4, len(str(n - 1)))
    names = tuple(spec.name for spec in config.feature_specs)
    samples = []
    for i in range(n):
        feats: dict[str, float | None] = {}
        for j, name in enumerate(names):
            feats[name] = None if missing[i, j] else float(values[i, j])
        samples.append(
            Sample(
                id=f"s{i:0{width}d}",
                location=Location(float(lats[i]), float(lons[i])),
                species=str(species[i]),
                features=feats,
            )
        )
    dataset = Dataset(samples=tuple(samples), feature_names=names)
    corrupted_ids = tuple(samples[i].id for i in corrupt_idx)
    return dataset, corrupted_ids
