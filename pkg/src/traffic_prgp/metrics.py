"""RMSE / MAPE per output dimension and the metrics report container."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, DIM_NAMES, OBSERVED_DIMS, REPORT_UNITS, UnitSpec

METRICS_HEADER = ("scenario", "method", "dimension", "rmse", "mape", "n_test", "runtime_s")


@dataclass(frozen=True)
class MetricRow:
    method: str
    dimension: str
    rmse: float
    mape: float
    n_test: int
    n_mape_excluded: int = 0
    runtime_s: float = float("nan")


@dataclass
class MetricsReport:
    scenario: str = ""
    rows: list[MetricRow] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)
    scatter: dict = field(default_factory=dict)

    def get(self, method: str, dimension: str) -> MetricRow:
        for row in self.rows:
            if row.method == method and row.dimension == dimension:
                return row
        raise KeyError((method, dimension))

    def methods(self) -> list[str]:
        return list(dict.fromkeys(r.method for r in self.rows))


def align(truth: Dataset, estimate: Dataset) -> tuple[Dataset, Dataset]:
    """Both datasets restricted to their common inputs, sorted by (segment, k)."""
    t, e = truth.sorted(), estimate.sorted()
    tk = t.X[:, 0] * (1 << 32) + t.X[:, 1]
    ek = e.X[:, 0] * (1 << 32) + e.X[:, 1]
    common, ti, ei = np.intersect1d(tk, ek, assume_unique=True, return_indices=True)
    if common.size != tk.size:
        raise ValueError("estimate does not cover every truth input")
    return t.subset(ti), e.subset(ei)


def rmse(y, f) -> float:
    y, f = np.asarray(y, float), np.asarray(f, float)
    return float(np.sqrt(np.mean((y - f) ** 2)))


def mape(y, f) -> tuple[float, int]:
    """Mean absolute percentage error and the number of zero-truth points skipped."""
    y, f = np.asarray(y, float), np.asarray(f, float)
    keep = y != 0
    if not keep.any():
        return float("nan"), int(y.size)
    return float(100.0 * np.mean(np.abs((y[keep] - f[keep]) / y[keep]))), int((~keep).sum())


def compute_metrics(truth: Dataset, estimate: Dataset, method: str = "estimate",
                    units: UnitSpec = REPORT_UNITS, dims=OBSERVED_DIMS,
                    runtime_s: float = float("nan")) -> MetricsReport:
    """Per-dimension RMSE and MAPE of ``estimate`` against ``truth`` in ``units``."""
    t, e = align(truth.to_units(units), estimate.to_units(units))
    report = MetricsReport()
    for d in dims:
        keep = ~np.isnan(t.Y[:, d])
        y, f = t.Y[keep, d], e.Y[keep, d]
        m, skipped = mape(y, f)
        report.rows.append(MetricRow(method, DIM_NAMES[d], rmse(y, f), m, int(keep.sum()),
                                     skipped, runtime_s))
    return report
