"""Detector datasets: containers, units, CSV I/O, standardization and the
corruption / subsampling protocols used by the experiments.

Internal units are veh/h for flow, km/h for speed and veh/km/lane for
density.  Output columns are always ordered (flow, speed, density).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FLOW, SPEED, DENSITY = 0, 1, 2
DIM_NAMES = ("flow", "speed", "density")
OBSERVED_DIMS = (FLOW, SPEED)

KMH_PER_MPH = 1.609344
VEH_PER_H_PER_VEH_PER_5MIN = 12.0

_FLOW_UNITS = {"veh/h": 1.0, "veh/5min": VEH_PER_H_PER_VEH_PER_5MIN}
_SPEED_UNITS = {"km/h": 1.0, "mph": KMH_PER_MPH}
_DENSITY_UNITS = {"veh/km/lane": 1.0}

# config-file spellings
UNIT_ALIASES = {
    "veh_per_h": "veh/h",
    "veh_per_5min": "veh/5min",
    "km_per_h": "km/h",
    "kmh": "km/h",
    "veh_per_km_per_lane": "veh/km/lane",
}

DETECTOR_HEADER = ("segment", "k", "flow", "speed")


@dataclass(frozen=True)
class UnitSpec:
    flow: str = "veh/h"
    speed: str = "km/h"
    density: str = "veh/km/lane"

    def __post_init__(self):
        for attr, table in (("flow", _FLOW_UNITS), ("speed", _SPEED_UNITS),
                            ("density", _DENSITY_UNITS)):
            value = UNIT_ALIASES.get(getattr(self, attr), getattr(self, attr))
            if value not in table:
                raise ValueError(f"unknown {attr} unit {value!r}")
            object.__setattr__(self, attr, value)

    def to_internal(self) -> np.ndarray:
        """Per-column factors that multiply values in these units into internal units."""
        return np.array([_FLOW_UNITS[self.flow], _SPEED_UNITS[self.speed],
                         _DENSITY_UNITS[self.density]])


INTERNAL_UNITS = UnitSpec()
REPORT_UNITS = UnitSpec(flow="veh/5min", speed="mph")


@dataclass(frozen=True)
class Dataset:
    """Observations indexed by (segment, time step).

    ``Y`` has one column per output dimension (flow, speed, density); NaN
    marks an unobserved entry.
    """

    X: np.ndarray
    Y: np.ndarray
    units: UnitSpec = field(default=INTERNAL_UNITS)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.int64).reshape(-1, 2)
        Y = np.asarray(self.Y, dtype=float)
        if Y.ndim == 1:
            Y = Y.reshape(-1, 1)
        if Y.shape[1] < 3:
            Y = np.hstack([Y, np.full((Y.shape[0], 3 - Y.shape[1]), np.nan)])
        if X.shape[0] != Y.shape[0]:
            raise ValueError("X and Y row counts differ")
        if np.any(X < 0):
            raise ValueError("segment and time indices must be non-negative")
        if X.shape[0] and np.unique(X, axis=0).shape[0] != X.shape[0]:
            raise ValueError("duplicate (segment, k) input")
        X.setflags(write=False)
        Y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def mask(self) -> np.ndarray:
        return ~np.isnan(self.Y)

    def observed(self, dim: int) -> tuple[np.ndarray, np.ndarray]:
        keep = self.mask[:, dim]
        return self.X[keep], self.Y[keep, dim]

    def subset(self, index) -> "Dataset":
        return Dataset(self.X[index], self.Y[index], self.units)

    def with_values(self, Y: np.ndarray) -> "Dataset":
        return Dataset(self.X, Y, self.units)

    def to_units(self, units: UnitSpec) -> "Dataset":
        return Dataset(self.X, self.Y * self.units.to_internal() / units.to_internal(), units)

    def sorted(self) -> "Dataset":
        order = np.lexsort((self.X[:, 1], self.X[:, 0]))
        return self.subset(order)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def ingest_csv(path, units: UnitSpec = INTERNAL_UNITS) -> Dataset:
    """Read a detector CSV (``segment,k,flow,speed``) given in ``units``.

    Values are converted to internal units.  Empty cells are read as
    unobserved.
    """
    path = Path(path)
    rows_X, rows_Y, seen = [], [], {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != DETECTOR_HEADER:
            raise ValueError(f"{path}: header must be {','.join(DETECTOR_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            try:
                i, k = int(row[0]), int(row[1])
                q = float(row[2]) if row[2].strip() else np.nan
                v = float(row[3]) if row[3].strip() else np.nan
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: malformed row ({exc})") from None
            if i < 0 or k < 0 or q < 0 or v < 0:
                raise ValueError(f"{path}:{lineno}: negative value")
            if (i, k) in seen:
                raise ValueError(f"{path}:{lineno}: duplicate (segment, k) = ({i}, {k}), "
                                 f"first seen on line {seen[(i, k)]}")
            seen[(i, k)] = lineno
            rows_X.append((i, k))
            rows_Y.append((q, v, np.nan))
    if not rows_X:
        raise ValueError(f"{path}: no observations")
    return Dataset(np.array(rows_X), np.array(rows_Y), units).to_units(INTERNAL_UNITS)


def _fmt(x: float) -> str:
    return "" if np.isnan(x) else repr(float(x))


def export_csv(data: Dataset, path, units: UnitSpec = INTERNAL_UNITS) -> Path:
    """Write ``data`` as a detector CSV in ``units`` (full float precision)."""
    path = Path(path)
    out = data.to_units(units)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(DETECTOR_HEADER)
        for (i, k), (q, v, _) in zip(out.X, out.Y):
            writer.writerow((int(i), int(k), _fmt(q), _fmt(v)))
    return path


# ---------------------------------------------------------------------------
# Standardization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Standardization:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, Y: np.ndarray) -> np.ndarray:
        return (Y - self.mean) / self.std

    def invert(self, Z: np.ndarray) -> np.ndarray:
        return Z * self.std + self.mean


def standardize(data: Dataset, dims=None) -> tuple[Dataset, Standardization]:
    """Shift and scale each observed column to zero mean and unit variance.

    Columns with no observations keep mean 0 and scale 1.
    """
    d = data.Y.shape[1]
    dims = range(d) if dims is None else dims
    mean, std = np.zeros(d), np.ones(d)
    for j in dims:
        col = data.Y[~np.isnan(data.Y[:, j]), j]
        if col.size == 0:
            continue
        if col.size < 2:
            raise ValueError(f"{DIM_NAMES[j]}: need at least 2 observations to standardize")
        s = col.std()
        if not s > 0:
            raise ValueError(f"{DIM_NAMES[j]}: zero-variance dimension")
        mean[j], std[j] = col.mean(), s
    stats = Standardization(mean, std)
    return data.with_values(stats.apply(data.Y)), stats


def destandardize(data: Dataset, stats: Standardization) -> Dataset:
    return data.with_values(stats.invert(data.Y))


# ---------------------------------------------------------------------------
# Corruption and subsampling protocols
# ---------------------------------------------------------------------------


def inject_bias(data: Dataset, fraction: float, flow_noise_std: float,
                speed_noise_std: float, seed: int) -> Dataset:
    """Add Gaussian noise to flow and speed on a random ``floor(fraction*n)`` rows.

    Noise deviations are given in veh/5min and mph; ``data`` is in internal
    units.  Corrupted values are clamped at zero, other rows are untouched.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    n_bad = int(np.floor(fraction * data.n))
    if n_bad == 0:
        return data
    rng = np.random.default_rng(seed)
    rows = np.sort(rng.choice(data.n, size=n_bad, replace=False))
    scale = np.array([flow_noise_std * VEH_PER_H_PER_VEH_PER_5MIN,
                      speed_noise_std * KMH_PER_MPH])
    noise = rng.normal(size=(n_bad, 2)) * scale
    Y = data.Y.copy()
    Y[rows, :2] = np.maximum(Y[rows, :2] + noise, 0.0)
    return data.with_values(Y)


def subsample(data: Dataset, ratio: float, seed: int) -> Dataset:
    """Keep a uniformly random ``floor(ratio*n)`` rows, in original order."""
    if not 0.0 < ratio <= 1.0:
        raise ValueError("ratio must lie in (0, 1]")
    keep = int(np.floor(ratio * data.n))
    if keep == 0:
        raise ValueError("subsample is empty")
    if keep == data.n:
        return data
    rng = np.random.default_rng(seed)
    rows = np.sort(rng.choice(data.n, size=keep, replace=False))
    return data.subset(rows)
