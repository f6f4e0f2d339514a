"""Extended Kalman filter on the stochastic METANET state.

State vector: densities of all segments, then speeds, then (optionally)
random-walk copies of ``v_f``, ``rho_cr`` and ``alpha``.  Jacobians are
taken by central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .metanet import Boundary, MetanetParams, TrafficGrid, advance

RANDOM_WALK_PARAMS = ("v_f", "rho_cr", "alpha")


@dataclass(frozen=True)
class EkfConfig:
    """Noise deviations for the filter (process, measurement, initial state).

    ``density_overrides`` maps a segment index to its own density process
    deviation (veh/km/lane) instead of the one implied by flow noise.
    """

    sigma_q_process: float = 100.0      # veh/h
    sigma_v_process: float = 11.0       # km/h
    density_overrides: dict = field(default_factory=dict)
    estimate_params: bool = False
    sigma_v_f: float = 0.5
    sigma_rho_cr: float = 0.1
    sigma_alpha: float = 0.01
    sigma_q_meas: float = 100.0         # veh/h
    sigma_v_meas: float = 10.0          # km/h
    init_rho_std: float = 5.0
    init_v_std: float = 10.0
    init_cov_scale: float = 1.0
    jacobian_step: float = 1e-6

    def __post_init__(self):
        devs = [self.sigma_q_process, self.sigma_v_process, self.sigma_v_f, self.sigma_rho_cr,
                self.sigma_alpha, self.sigma_q_meas, self.sigma_v_meas, self.init_rho_std,
                self.init_v_std, self.init_cov_scale, *self.density_overrides.values()]
        if min(devs) < 0:
            raise ValueError("deviations must be non-negative")


@dataclass(frozen=True, eq=False)
class EkfState:
    x: np.ndarray
    P: np.ndarray
    lanes: np.ndarray
    n_segments: int

    @property
    def rho(self) -> np.ndarray:
        return self.x[:self.n_segments]

    @property
    def vel(self) -> np.ndarray:
        return self.x[self.n_segments:2 * self.n_segments]

    @property
    def param_values(self) -> np.ndarray:
        return self.x[2 * self.n_segments:]


@dataclass(frozen=True)
class Measurement:
    """Detector readings; NaN marks a missing value."""

    segments: np.ndarray
    q: np.ndarray
    v: np.ndarray


def initial_state(params: MetanetParams, rho0, v0, config: EkfConfig = EkfConfig()) -> EkfState:
    I = params.n_segments
    x = np.concatenate([np.asarray(rho0, float), np.asarray(v0, float)])
    var = [config.init_rho_std ** 2] * I + [config.init_v_std ** 2] * I
    if config.estimate_params:
        x = np.concatenate([x, [getattr(params, p) for p in RANDOM_WALK_PARAMS]])
        var += [config.sigma_v_f ** 2, config.sigma_rho_cr ** 2, config.sigma_alpha ** 2]
    P = np.diag(var) * config.init_cov_scale ** 2
    return EkfState(x, P, np.asarray(params.lanes, float), I)


def process_covariance(params: MetanetParams, n_state: int, config: EkfConfig) -> np.ndarray:
    I = params.n_segments
    # flow noise enters each density update twice (inflow and outflow)
    rho_sd = np.sqrt(2.0) * params.T / (params.delta * params.lanes) * config.sigma_q_process
    for i, sd in config.density_overrides.items():
        rho_sd[int(i)] = sd
    q = np.concatenate([rho_sd ** 2, np.full(I, config.sigma_v_process ** 2)])
    if n_state > 2 * I:
        q = np.concatenate([q, [config.sigma_v_f ** 2, config.sigma_rho_cr ** 2,
                                config.sigma_alpha ** 2]])
    return np.diag(q)


def _transition(params: MetanetParams, x: np.ndarray, inputs) -> np.ndarray:
    I = params.n_segments
    rho, v = x[:I], x[I:2 * I]
    if x.size > 2 * I:
        p = x[2 * I:]
        params = params.replace(**{n: max(float(val), 1e-6)
                                   for n, val in zip(RANDOM_WALK_PARAMS, p)})
    q = rho * v * params.lanes
    rho_new, v_new = advance(params, rho, v, q, *inputs)
    out = np.concatenate([np.maximum(rho_new, 0.0), np.maximum(v_new, 0.0)])
    if x.size > 2 * I:
        out = np.concatenate([out, x[2 * I:]])
    return out


def fd_jacobian(fun, x: np.ndarray, rel_step: float = 1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    f0 = fun(x)
    J = np.empty((f0.size, x.size))
    h = rel_step * np.maximum(np.abs(x), 1.0)
    for j in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[j] += h[j]
        xm[j] -= h[j]
        J[:, j] = (fun(xp) - fun(xm)) / (2.0 * h[j])
    return J


def ekf_predict(state: EkfState, params: MetanetParams, inputs, config: EkfConfig) -> EkfState:
    """Propagate mean through one METANET step and covariance as F P F^T + Q.

    ``inputs`` is (q_up, v_up, rho_down) for the current step.
    """
    x_new = _transition(params, state.x, inputs)
    if not np.all(np.isfinite(x_new)):
        raise FloatingPointError("non-finite state after prediction")
    F = fd_jacobian(lambda z: _transition(params, z, inputs), state.x, config.jacobian_step)
    P = F @ state.P @ F.T + process_covariance(params, state.x.size, config)
    P = 0.5 * (P + P.T)
    return EkfState(x_new, P, state.lanes, state.n_segments)


def _observe(x: np.ndarray, n_segments: int, lanes: np.ndarray, segments, which) -> np.ndarray:
    rho, v = x[:n_segments][segments], x[n_segments:2 * n_segments][segments]
    return np.concatenate([(rho * v * lanes[segments])[which[0]], v[which[1]]])


def ekf_update(state: EkfState, measurement: Measurement, config: EkfConfig,
               ) -> EkfState:
    """Measurement update with h(x) = (rho*v*lanes, v) at the detector segments."""
    seg = np.asarray(measurement.segments, dtype=np.int64)
    q = np.asarray(measurement.q, dtype=float)
    v = np.asarray(measurement.v, dtype=float)
    which = (~np.isnan(q), ~np.isnan(v))
    z = np.concatenate([q[which[0]], v[which[1]]])
    if z.size == 0:
        return state
    n = state.n_segments

    def h(x):
        return _observe(x, n, state.lanes, seg, which)

    H = fd_jacobian(h, state.x, config.jacobian_step)
    R = np.diag(np.concatenate([np.full(which[0].sum(), config.sigma_q_meas ** 2),
                                np.full(which[1].sum(), config.sigma_v_meas ** 2)]))
    PHt = state.P @ H.T
    HPHt = H @ PHt
    if not np.any(HPHt):
        # no uncertainty in the measured directions: the gain is zero
        return state
    S = HPHt + R
    try:
        gain = np.linalg.solve(S, PHt.T).T
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("innovation covariance is not invertible") from exc
    x = state.x + gain @ (z - h(state.x))
    A = np.eye(x.size) - gain @ H
    P = A @ state.P @ A.T + gain @ R @ gain.T
    P = 0.5 * (P + P.T)
    x[:2 * n] = np.maximum(x[:2 * n], 0.0)
    return EkfState(x, P, state.lanes, n)


def run_filter(initial: EkfState, params: MetanetParams, boundary: Boundary, horizon: int,
               measurements: dict, config: EkfConfig = EkfConfig()) -> TrafficGrid:
    """Alternate update (if a measurement exists at step k) and prediction.

    ``measurements`` maps step index to a ``Measurement``.  Returns the
    filtered (posterior) state at every step as a grid with zero ramps.
    """
    I = initial.n_segments
    R, V = np.empty((I, horizon)), np.empty((I, horizon))
    state = initial
    for k in range(horizon):
        if k > 0:
            state = ekf_predict(state, params, boundary.at(k - 1), config)
        if k in measurements:
            state = ekf_update(state, measurements[k], config)
        R[:, k], V[:, k] = state.rho, state.vel
    Q = R * V * np.asarray(params.lanes)[:, None]
    zeros = np.zeros((I, horizon))
    return TrafficGrid(R, V, Q, zeros, zeros.copy())
