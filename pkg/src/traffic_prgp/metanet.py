"""Second-order macroscopic freeway model (METANET) on a segmented corridor.

Segments are indexed ``i = 0 .. I-1`` in the driving direction; the
upstream boundary feeds segment 0 and the downstream boundary density sits
just past segment ``I-1``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import Dataset, UnitSpec, INTERNAL_UNITS

GRID_HEADER = ("i", "k", "rho", "vel", "flow", "r", "s")

PHYSICAL_NAMES = ("tau", "nu", "delta_ramp", "kappa", "v_f", "rho_cr", "alpha")


@dataclass(frozen=True, eq=False)
class MetanetParams:
    """Model parameters; defaults are the usual I-15 corridor calibration.

    ``T`` in hours, ``delta`` (segment length) in km, ``nu`` in km^2/h,
    ``kappa`` and ``rho_cr`` in veh/km/lane, ``v_f`` in km/h, ``tau`` in h.
    ``delta`` and ``lanes`` may be scalars or per-segment sequences.
    """

    T: float = 1.0 / 360.0
    delta: np.ndarray = 0.5
    lanes: np.ndarray = 4
    v_f: float = 120.0
    rho_cr: float = 36.85
    alpha: float = 1.4324
    tau: float = 0.05
    nu: float = 35.0
    delta_ramp: float = 1.4
    kappa: float = 13.0
    n_segments: int = 20

    def __post_init__(self):
        if self.n_segments < 3:
            raise ValueError("need at least 3 segments")
        for name in ("delta", "lanes"):
            arr = np.broadcast_to(np.asarray(getattr(self, name), dtype=float),
                                  (self.n_segments,)).copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        scalars = ("T",) + PHYSICAL_NAMES
        bad = [n for n in scalars if not getattr(self, n) > 0]
        if bad or np.any(self.delta <= 0) or np.any(self.lanes <= 0):
            raise ValueError(f"parameters must be strictly positive: {bad or 'delta/lanes'}")

    def replace(self, **changes) -> "MetanetParams":
        """Copy with ``changes``; a new ``n_segments`` keeps uniform lane
        counts and segment lengths."""
        if changes.get("n_segments", self.n_segments) != self.n_segments:
            for name in ("delta", "lanes"):
                arr = getattr(self, name)
                if name not in changes and np.all(arr == arr[0]):
                    changes[name] = float(arr[0])
        return replace(self, **changes)

    def physical(self) -> dict[str, float]:
        return {n: float(getattr(self, n)) for n in PHYSICAL_NAMES}


@dataclass(frozen=True)
class NoiseSpec:
    sigma_q: float = 0.0
    sigma_v: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma_q < 0 or self.sigma_v < 0:
            raise ValueError("noise deviations must be non-negative")


@dataclass(frozen=True)
class Boundary:
    """Exogenous upstream flow/speed and downstream density per time step."""

    q_up: np.ndarray
    v_up: np.ndarray
    rho_down: np.ndarray

    def __post_init__(self):
        for name in ("q_up", "v_up", "rho_down"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))

    def at(self, k: int) -> tuple[float, float, float]:
        try:
            vals = (self.q_up[k], self.v_up[k], self.rho_down[k])
        except IndexError:
            raise ValueError(f"missing boundary entry at step {k}") from None
        if not np.all(np.isfinite(vals)):
            raise ValueError(f"missing boundary entry at step {k}")
        return vals


@dataclass(frozen=True)
class Ramps:
    """On-ramp inflow ``r`` and off-ramp outflow ``s`` (veh/h), shape (I, K).

    Off-ramp flow may instead be given through a departure rate ``beta``,
    in which case ``s[i, k] = beta[i, k] * q[i-1, k]``.
    """

    r: np.ndarray | None = None
    s: np.ndarray | None = None
    beta: np.ndarray | None = None

    def __post_init__(self):
        if self.s is not None and self.beta is not None:
            raise ValueError("give either s or beta, not both")


@dataclass(frozen=True, eq=False)
class TrafficGrid:
    """Density (veh/km/lane), speed (km/h), flow (veh/h) and ramp flows, each (I, K)."""

    rho: np.ndarray
    vel: np.ndarray
    flow: np.ndarray
    r: np.ndarray
    s: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.rho.shape

    def to_csv(self, path) -> Path:
        path = Path(path)
        I, K = self.shape
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(GRID_HEADER)
            for k in range(K):
                for i in range(I):
                    w.writerow((i, k) + tuple(repr(float(a[i, k])) for a in
                                              (self.rho, self.vel, self.flow, self.r, self.s)))
        return path

    @classmethod
    def from_csv(cls, path) -> "TrafficGrid":
        path = Path(path)
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            header = tuple(next(reader))
            if header != GRID_HEADER:
                raise ValueError(f"{path}: header must be {','.join(GRID_HEADER)}")
            rows = [r for r in reader if r]
        idx = np.array([(int(r[0]), int(r[1])) for r in rows])
        vals = np.array([[float(x) for x in r[2:]] for r in rows])
        I, K = idx[:, 0].max() + 1, idx[:, 1].max() + 1
        if len(rows) != I * K:
            raise ValueError(f"{path}: grid is incomplete")
        arrays = np.zeros((5, I, K))
        arrays[:, idx[:, 0], idx[:, 1]] = vals.T
        return cls(*arrays)


def fundamental_diagram(params: MetanetParams, rho):
    """Equilibrium speed V(rho) of the exponential fundamental diagram."""
    rho_arr = np.asarray(rho, dtype=float)
    if np.any(rho_arr < 0):
        raise ValueError("negative density")
    out = params.v_f * np.exp(-(rho_arr / params.rho_cr) ** params.alpha / params.alpha)
    return float(out) if np.ndim(out) == 0 else out


def _check_cell(grid: TrafficGrid, i: int, k: int):
    I, K = grid.shape
    if not (0 <= i < I and 0 <= k and k + 1 < K):
        raise IndexError(f"cell ({i}, {k}) has no successor inside a {I}x{K} grid")


def step_density(params: MetanetParams, grid: TrafficGrid, i: int, k: int,
                 q_upstream: float | None = None) -> float:
    """Density at (i, k+1) from the conservation equation, clamped at 0.

    Segment 0 needs ``q_upstream``, the inflow at the upstream boundary.
    """
    _check_cell(grid, i, k)
    if i == 0:
        if q_upstream is None:
            raise ValueError("segment 0 needs the upstream boundary flow")
        q_in = q_upstream
    else:
        q_in = grid.flow[i - 1, k]
    coef = params.T / (params.delta[i] * params.lanes[i])
    rho = grid.rho[i, k] + coef * (q_in - grid.flow[i, k] + grid.r[i, k] - grid.s[i, k])
    return max(float(rho), 0.0)


def step_speed(params: MetanetParams, grid: TrafficGrid, i: int, k: int,
               v_upstream: float | None = None, rho_downstream: float | None = None) -> float:
    """Speed at (i, k+1) from the dynamic speed equation, clamped at 0."""
    _check_cell(grid, i, k)
    I = grid.shape[0]
    if i == 0 and v_upstream is None:
        raise ValueError("segment 0 needs the upstream boundary speed")
    if i == I - 1 and rho_downstream is None:
        raise ValueError("last segment needs the downstream boundary density")
    v_prev = v_upstream if i == 0 else grid.vel[i - 1, k]
    rho_next = rho_downstream if i == I - 1 else grid.rho[i + 1, k]
    rho, v, r = grid.rho[i, k], grid.vel[i, k], grid.r[i, k]
    T, dl, lam = params.T, params.delta[i], params.lanes[i]
    v_new = (v
             + T / params.tau * (fundamental_diagram(params, rho) - v)
             + T / dl * v * (v_prev - v)
             - params.nu * T / (params.tau * dl) * (rho_next - rho) / (rho + params.kappa)
             - params.delta_ramp * T / (dl * lam) * r * v / (rho + params.kappa))
    return max(float(v_new), 0.0)


def advance(params: MetanetParams, rho: np.ndarray, v: np.ndarray, q: np.ndarray,
            q_up: float, v_up: float, rho_down: float, r=0.0, s=0.0,
            periodic: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """One time step for every segment; ``q`` is the current flow vector.

    Returns the unclamped (rho, v) at the next step.  With ``periodic`` the
    corridor is closed into a ring and the boundary values are ignored.
    """
    if periodic:
        q_prev = np.roll(q, 1)
        v_prev = np.roll(v, 1)
        rho_next = np.roll(rho, -1)
    else:
        q_prev = np.concatenate(([q_up], q[:-1]))
        v_prev = np.concatenate(([v_up], v[:-1]))
        rho_next = np.concatenate((rho[1:], [rho_down]))
    T, dl, lam = params.T, params.delta, params.lanes
    rho_new = rho + T / (dl * lam) * (q_prev - q + r - s)
    v_new = (v
             + T / params.tau * (fundamental_diagram(params, np.maximum(rho, 0.0)) - v)
             + T / dl * v * (v_prev - v)
             - params.nu * T / (params.tau * dl) * (rho_next - rho) / (rho + params.kappa)
             - params.delta_ramp * T / (dl * lam) * r * v / (rho + params.kappa))
    return rho_new, v_new


def simulate(params: MetanetParams, rho0, v0, horizon: int,
             boundary: Boundary | None = None, ramps: Ramps | None = None,
             noise: NoiseSpec | None = None, periodic: bool = False) -> TrafficGrid:
    """Run the model for ``horizon`` time steps (columns k = 0 .. horizon-1).

    In stochastic mode (``noise`` given) each flow readout gets N(0, sigma_q^2)
    and each speed update N(0, sigma_v^2).  Density, speed and flow are
    clamped at 0 in either mode.
    """
    I = params.n_segments
    if horizon < 2:
        raise ValueError("horizon must be at least 2")
    rho = np.asarray(rho0, dtype=float).copy()
    v = np.asarray(v0, dtype=float).copy()
    if rho.shape != (I,) or v.shape != (I,):
        raise ValueError(f"initial state must have {I} segments")
    if boundary is None and not periodic:
        raise ValueError("a boundary series is required unless periodic")
    ramps = ramps or Ramps()
    r = np.zeros((I, horizon)) if ramps.r is None else np.asarray(ramps.r, dtype=float)
    if r.shape != (I, horizon):
        raise ValueError("ramp series must have shape (I, horizon)")
    s = np.zeros((I, horizon))
    if ramps.s is not None:
        s = np.asarray(ramps.s, dtype=float).copy()
        if s.shape != (I, horizon):
            raise ValueError("ramp series must have shape (I, horizon)")
    beta = None if ramps.beta is None else np.asarray(ramps.beta, dtype=float)
    rng = np.random.default_rng(noise.seed) if noise is not None else None

    R, V, Q = (np.empty((I, horizon)) for _ in range(3))
    for k in range(horizon):
        q = rho * v * params.lanes
        if rng is not None and noise.sigma_q > 0:
            q = np.maximum(q + rng.normal(0.0, noise.sigma_q, I), 0.0)
        R[:, k], V[:, k], Q[:, k] = rho, v, q
        if k == horizon - 1:
            break
        if periodic:
            q_up = v_up = rho_down = np.nan
        else:
            q_up, v_up, rho_down = boundary.at(k)
        if beta is not None:
            q_prev = np.roll(q, 1) if periodic else np.concatenate(([q_up], q[:-1]))
            s[:, k] = beta[:, k] * q_prev
        rho, v = advance(params, rho, v, q, q_up, v_up, rho_down, r[:, k], s[:, k], periodic)
        if rng is not None and noise.sigma_v > 0:
            v = v + rng.normal(0.0, noise.sigma_v, I)
        rho = np.maximum(rho, 0.0)
        v = np.maximum(v, 0.0)
    return TrafficGrid(R, V, Q, r.copy(), s)


def emit_detector_data(grid: TrafficGrid, detectors, aggregation: int = 30,
                       units: UnitSpec = INTERNAL_UNITS) -> Dataset:
    """Window-averaged flow and speed at the detector segments.

    Window ``j`` averages steps ``j*aggregation .. (j+1)*aggregation - 1``;
    a trailing partial window is dropped.  Inputs are (segment, j).
    """
    I, K = grid.shape
    detectors = [int(d) for d in detectors]
    if any(not 0 <= d < I for d in detectors):
        raise ValueError(f"detector index out of range 0..{I - 1}")
    if aggregation < 1:
        raise ValueError("aggregation must be >= 1")
    n_win = K // aggregation
    if n_win == 0:
        raise ValueError("grid shorter than one aggregation window")
    sl = slice(0, n_win * aggregation)
    q = grid.flow[detectors, sl].reshape(len(detectors), n_win, aggregation).mean(axis=2)
    v = grid.vel[detectors, sl].reshape(len(detectors), n_win, aggregation).mean(axis=2)
    X = np.array([(d, j) for d in detectors for j in range(n_win)]).reshape(-1, 2)
    Y = np.column_stack([q.ravel(), v.ravel(), np.full(q.size, np.nan)])
    return Dataset(X, Y, INTERNAL_UNITS).to_units(units)
