"""Writing metrics CSVs and per-method scatter files."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .data import REPORT_UNITS, UnitSpec
from .metrics import METRICS_HEADER, MetricsReport, align

SCATTER_HEADER = ("segment", "k", "flow_truth", "flow_est", "speed_truth", "speed_est")


def _num(x: float) -> str:
    return "" if x is None or np.isnan(x) else repr(float(x))


def write_metrics_csv(report: MetricsReport, path, timing: bool = False) -> Path:
    """One row per method and dimension.

    ``runtime_s`` is wall time and so differs between otherwise identical
    runs; it is left empty unless ``timing`` is set.
    """
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in report.rows:
            w.writerow((report.scenario, r.method, r.dimension, _num(r.rmse), _num(r.mape),
                        r.n_test, _num(r.runtime_s) if timing else ""))
    return path


def read_metrics_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRICS_HEADER:
            raise ValueError(f"{path}: not a metrics CSV")
        return list(reader)


def write_scatter(truth, estimate, path, units: UnitSpec = REPORT_UNITS) -> Path:
    """Truth/estimate pairs for every test input, in report units."""
    t, e = align(truth.to_units(units), estimate.to_units(units))
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCATTER_HEADER)
        for (i, k), yt, ye in zip(t.X, t.Y, e.Y):
            w.writerow((int(i), int(k), _num(yt[0]), _num(ye[0]), _num(yt[1]), _num(ye[1])))
    return path


def emit_report(report: MetricsReport, out_dir, timing: bool = False,
                units: UnitSpec = REPORT_UNITS) -> list[Path]:
    """Write ``metrics.csv``, ``scatter_<method>.csv`` files and, if any
    method failed, ``errors.txt`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [write_metrics_csv(report, out / "metrics.csv", timing)]
    for method, (truth, est) in report.scatter.items():
        written.append(write_scatter(truth, est, out / f"scatter_{method}.csv", units))
    if report.errors:
        err = out / "errors.txt"
        err.write_text("".join(f"{m}: {msg}\n" for m, msg in report.errors.items()))
        written.append(err)
    return written


def format_table(rows: list[dict]) -> str:
    """Plain-text table of metrics rows (as read by ``read_metrics_csv``)."""
    cols = ("scenario", "method", "dimension", "rmse", "mape", "n_test")
    cells = [cols] + [tuple(r[c] if c in ("scenario", "method", "dimension", "n_test")
                            else (f"{float(r[c]):.3f}" if r[c] else "") for c in cols)
                      for r in rows]
    widths = [max(len(row[j]) for row in cells) for j in range(len(cols))]
    lines = ["  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)
