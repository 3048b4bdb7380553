"""Spherical geometry primitives: locations, great-circle distance, grids, clustering."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError

# IUGG mean Earth radius. Fixed constant; all distances in this package are
# great-circle kilometers on a sphere of this radius.
EARTH_RADIUS_KM = 6371.0088

# Largest possible great-circle distance (antipodal points).
MAX_DISTANCE_KM = math.pi * EARTH_RADIUS_KM


@dataclass(frozen=True)
class Location:
    """A point on the sphere. Latitude in [-90, 90]; longitude normalized to [-180, 180)."""

    lat: float
    lon: float

    def __post_init__(self) -> None:
        lat = float(self.lat)
        lon = float(self.lon)
        if not (math.isfinite(lat) and math.isfinite(lon)):
            raise ValueError(f"non-finite coordinates ({self.lat}, {self.lon})")
        if not -90.0 <= lat <= 90.0:
            raise ValueError(f"latitude {lat} outside [-90, 90]")
        lon = ((lon + 180.0) % 360.0) - 180.0
        object.__setattr__(self, "lat", lat)
        object.__setattr__(self, "lon", lon)


def great_circle_distance(a: Location, b: Location) -> float:
    """Great-circle distance between two locations in kilometers.

    Uses the haversine formulation, which is numerically stable for nearby
    points (unlike the spherical law of cosines).
    """
    lat1 = math.radians(a.lat)
    lat2 = math.radians(b.lat)
    dlat = lat2 - lat1
    dlon = math.radians(b.lon) - math.radians(a.lon)
    h = math.sin(dlat * 0.5) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin(dlon * 0.5) ** 2
    arc = 2.0 * math.atan2(math.sqrt(h), math.sqrt(max(0.0, 1.0 - h)))
    return EARTH_RADIUS_KM * arc


def pairwise_distance_km(
    lats_a: np.ndarray, lons_a: np.ndarray, lats_b: np.ndarray, lons_b: np.ndarray
) -> np.ndarray:
    """Matrix of great-circle distances (km) between two coordinate sets.

    Returns shape (len(a), len(b)). Same haversine formulation as
    :func:`great_circle_distance`.
    """
    la = np.radians(np.asarray(lats_a, dtype=float))[:, None]
    lb = np.radians(np.asarray(lats_b, dtype=float))[None, :]
    da = np.radians(np.asarray(lons_a, dtype=float))[:, None]
    db = np.radians(np.asarray(lons_b, dtype=float))[None, :]
    h = np.sin((lb - la) * 0.5) ** 2 + np.cos(la) * np.cos(lb) * np.sin((db - da) * 0.5) ** 2
    arc = 2.0 * np.arctan2(np.sqrt(h), np.sqrt(np.maximum(0.0, 1.0 - h)))
    return EARTH_RADIUS_KM * arc


@dataclass(frozen=True, eq=False)
class SpatialGrid:
    """Discretization of a lat/lon bounding box into weighted cell centers.

    ``cell_weight`` holds per-cell area weights that are strictly positive and
    sum to 1; they stand in for the area element when integrals over the
    domain are replaced by sums over cells.
    """

    cells: tuple[Location, ...]
    cell_weight: np.ndarray
    resolution_deg: float
    _lats: np.ndarray = field(init=False, repr=False)
    _lons: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if len(self.cells) == 0:
            raise ConfigError("grid has no cells")
        w = np.asarray(self.cell_weight, dtype=float)
        if w.shape != (len(self.cells),):
            raise ConfigError("cell_weight length does not match number of cells")
        if not np.all(w > 0.0):
            raise ConfigError("cell weights must be strictly positive")
        if abs(float(w.sum()) - 1.0) > 1e-12:
            raise ConfigError("cell weights must sum to 1")
        object.__setattr__(self, "cell_weight", w)
        object.__setattr__(self, "_lats", np.array([c.lat for c in self.cells]))
        object.__setattr__(self, "_lons", np.array([c.lon for c in self.cells]))

    def __len__(self) -> int:
        return len(self.cells)

    def lat_array(self) -> np.ndarray:
        return self._lats

    def lon_array(self) -> np.ndarray:
        return self._lons


def build_grid(
    bbox: tuple[float, float, float, float], resolution_deg: float
) -> SpatialGrid:
    """Build a regular lat/lon lattice of cell centers over ``bbox``.

    ``bbox`` is (lat_min, lat_max, lon_min, lon_max). Cell centers sit at
    half-resolution offsets from the box edges; any sliver narrower than one
    cell at the top/right edge is dropped. Cell weights are proportional to
    cos(latitude) of the center and renormalized to sum to 1.
    """
    lat_min, lat_max, lon_min, lon_max = map(float, bbox)
    if resolution_deg <= 0.0:
        raise ConfigError(f"resolution_deg must be positive, got {resolution_deg}")
    if not (lat_min < lat_max and lon_min < lon_max):
        raise ConfigError(f"degenerate bbox {bbox}")
    if lat_min < -90.0 or lat_max > 90.0:
        raise ConfigError(f"bbox latitudes {lat_min}, {lat_max} outside [-90, 90]")
    if lon_min < -180.0 or lon_max > 360.0:
        raise ConfigError(f"bbox longitudes {lon_min}, {lon_max} out of range")

    n_lat = int((lat_max - lat_min) / resolution_deg + 1e-9)
    n_lon = int((lon_max - lon_min) / resolution_deg + 1e-9)
    if n_lat < 1 or n_lon < 1:
        raise ConfigError(f"bbox {bbox} smaller than one cell at resolution {resolution_deg}")

    cells = []
    weights = []
    for i in range(n_lat):
        lat = lat_min + (i + 0.5) * resolution_deg
        w = math.cos(math.radians(lat))
        for j in range(n_lon):
            lon = lon_min + (j + 0.5) * resolution_deg
            cells.append(Location(lat, lon))
            weights.append(w)
    w = np.array(weights, dtype=float)
    return SpatialGrid(cells=tuple(cells), cell_weight=w / w.sum(), resolution_deg=resolution_deg)


def cluster_by_radius(
    points: Sequence[Location], seed_index: int, radius_km: float
) -> set[int]:
    """Indices of all points within ``radius_km`` of ``points[seed_index]``.

    Always contains ``seed_index`` (distance zero). Radius 0 therefore returns
    the seed alone when all points are distinct.
    """
    if not 0 <= seed_index < len(points):
        raise IndexError(f"seed_index {seed_index} out of range for {len(points)} points")
    if radius_km < 0.0:
        raise ValueError(f"radius_km must be nonnegative, got {radius_km}")
    seed = points[seed_index]
    members = {seed_index}
    for i, p in enumerate(points):
        if great_circle_distance(seed, p) <= radius_km:
            members.add(i)
    return members
