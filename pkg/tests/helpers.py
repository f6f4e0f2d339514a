"""Shared builders for tests."""

import numpy as np

from traffic_prgp.ekf import EkfConfig, Measurement
from traffic_prgp.metanet import (Boundary, MetanetParams, NoiseSpec, fundamental_diagram,
                               simulate)
from traffic_prgp.physics_residual import PseudoBatch


def peak_run(params: MetanetParams = MetanetParams(), K: int = 288, ramps=None, noise=None):
    """A zero-noise trajectory with a trapezoidal inflow peak; stays strictly positive."""
    frac = np.arange(K) / (K - 1)
    q_up = np.interp(frac, [0, 0.25, 0.45, 0.6, 1.0], [3000, 3000, 6200, 6200, 3500])
    rho_up = q_up / (params.lanes[0] * 95.0)
    rho0 = np.full(params.n_segments, rho_up[0])
    v0 = fundamental_diagram(params, rho0)
    b = Boundary(q_up, np.full(K, 95.0), np.full(K, 25.0))
    return simulate(params, rho0, v0, K, b, ramps, noise)


def interior_batch(I: int, K: int) -> PseudoBatch:
    return PseudoBatch(np.array([(i, k) for i in range(1, I - 1) for k in range(K - 1)]))


def grid_estimates(grid, inputs) -> np.ndarray:
    inputs = np.asarray(inputs)
    i, k = inputs[:, 0], inputs[:, 1]
    return np.column_stack([grid.flow[i, k], grid.vel[i, k], grid.rho[i, k]])


def small_problem(n_segments=8, K=240, aggregation=10, detectors=(0, 3, 5, 7), noise=None):
    """Detector data from a short noise-free run plus the GP-grid parameters."""
    from traffic_prgp.metanet import emit_detector_data
    from traffic_prgp.prgp import prepare_training_set

    params = MetanetParams(n_segments=n_segments)
    grid = peak_run(params, K, noise=noise)
    data = emit_detector_data(grid, detectors, aggregation)
    physical = params.replace(T=params.T * aggregation)
    return grid, data, physical, prepare_training_set(data, physical)


def deterministic_case(K=288, P=MetanetParams()):
    """The peak trajectory together with its boundary series."""
    g = peak_run(P, K)
    frac = np.arange(K) / (K - 1)
    q_up = np.interp(frac, [0, 0.25, 0.45, 0.6, 1.0], [3000, 3000, 6200, 6200, 3500])
    b = Boundary(q_up, np.full(K, 95.0), np.full(K, 25.0))
    return g, b


def noisy_case(seed=0, K=288, P=MetanetParams()):
    """Stochastic truth and detector readings whose noise matches the filter config."""
    I = P.n_segments
    _, b = deterministic_case(K, P)
    rho0 = np.full(I, 3000 / (4 * 95.0))
    truth = simulate(P, rho0, fundamental_diagram(P, rho0), K, b,
                     noise=NoiseSpec(100.0, 2.0, seed))
    rng = np.random.default_rng(seed + 100)
    seg = np.array([0, 5, 10, 15, 19])
    zq = truth.flow[seg] + rng.normal(0, 100.0, (seg.size, K))
    zv = truth.vel[seg] + rng.normal(0, 10.0, (seg.size, K))
    meas = {k: Measurement(seg, zq[:, k], zv[:, k]) for k in range(K)}
    cfg = EkfConfig(sigma_q_process=100.0, sigma_v_process=2.0, sigma_q_meas=100.0,
                    sigma_v_meas=10.0)
    return truth, b, seg, zv, meas, cfg, rho0
