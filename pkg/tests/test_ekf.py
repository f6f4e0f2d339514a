import numpy as np
import pytest

from traffic_prgp.ekf import (EkfConfig, EkfState, Measurement, _transition, ekf_predict,
                              ekf_update, fd_jacobian, initial_state, process_covariance,
                              run_filter)
from traffic_prgp.metanet import Boundary, MetanetParams, NoiseSpec, fundamental_diagram, simulate

from helpers import deterministic_case, noisy_case, peak_run

P = MetanetParams()
I = P.n_segments
ZERO_NOISE = EkfConfig(sigma_q_process=0, sigma_v_process=0, sigma_q_meas=0, sigma_v_meas=0,
                       init_rho_std=0, init_v_std=0)


def equilibrium(rho=25.0):
    v = fundamental_diagram(P, rho)
    return np.full(I, rho), np.full(I, v), (rho * v * 4.0, v, rho)


def test_config_rejects_negative():
    with pytest.raises(ValueError):
        EkfConfig(sigma_v_meas=-1.0)
    assert EkfConfig().sigma_q_process == 100.0 and EkfConfig().sigma_v_meas == 10.0


def test_predict_mean_matches_simulator_bitwise():
    g = peak_run(P, K=3)
    state = initial_state(P, g.rho[:, 0], g.vel[:, 0])
    b = Boundary([3000.0] * 3, [95.0] * 3, [25.0] * 3)
    pred = ekf_predict(state, P, b.at(0), EkfConfig())
    assert pred.rho.tobytes() == g.rho[:, 1].tobytes()
    assert pred.vel.tobytes() == g.vel[:, 1].tobytes()


def test_predict_covariance_propagation():
    rho, v, inputs = equilibrium()
    cfg = EkfConfig(sigma_q_process=0, sigma_v_process=0)
    zero = ekf_predict(EkfState(np.r_[rho, v], np.zeros((2 * I, 2 * I)), P.lanes, I), P,
                       inputs, cfg)
    assert not zero.P.any()
    state = initial_state(P, rho, v, cfg)
    F = fd_jacobian(lambda x: _transition(P, x, inputs), state.x, 1e-6)
    out = ekf_predict(state, P, inputs, cfg)
    np.testing.assert_allclose(out.P, F @ state.P @ F.T, rtol=1e-12, atol=1e-12)
    noisy = ekf_predict(state, P, inputs, EkfConfig())
    assert np.trace(noisy.P) > np.trace(out.P)


def test_process_covariance_density_overrides():
    Q = process_covariance(P, 2 * I, EkfConfig(density_overrides={11: 0.5}))
    base = np.sqrt(2) * P.T / (0.5 * 4) * 100.0
    assert Q[0, 0] == pytest.approx(base ** 2) and Q[11, 11] == 0.25
    assert Q[I, I] == 11.0 ** 2


def test_predict_non_finite_errors():
    rho, v, _ = equilibrium()
    state = initial_state(P, rho, v)
    with pytest.raises(FloatingPointError):
        ekf_predict(state, P, (np.nan, 90.0, 20.0), EkfConfig())


def test_update_zero_innovation_and_infinite_noise():
    rho, v, _ = equilibrium()
    state = initial_state(P, rho, v)
    seg = np.array([0, 7, 15])
    exact = Measurement(seg, rho[seg] * v[seg] * 4, v[seg])
    out = ekf_update(state, exact, EkfConfig())
    np.testing.assert_allclose(out.x, state.x, atol=1e-10)
    wrong = Measurement(seg, exact.q + 500, exact.v - 20)
    out = ekf_update(state, wrong, EkfConfig(sigma_q_meas=1e9, sigma_v_meas=1e9))
    np.testing.assert_allclose(out.x, state.x, atol=1e-6)
    moved = ekf_update(state, wrong, EkfConfig())
    assert np.abs(moved.x - state.x).max() > 0.1


def test_update_scalar_case():
    rho, v, _ = equilibrium()
    cfg = EkfConfig(init_v_std=4.0, sigma_v_meas=3.0)
    state = initial_state(P, rho, v, cfg)
    z = v[5] + 7.0
    out = ekf_update(state, Measurement([5], [np.nan], [z]), cfg)
    p_, r_ = 16.0, 9.0
    assert out.vel[5] == pytest.approx(v[5] + p_ / (p_ + r_) * 7.0, rel=1e-9)
    others = np.delete(np.arange(2 * I), I + 5)
    np.testing.assert_array_equal(out.x[others], state.x[others])
    assert out.P[I + 5, I + 5] == pytest.approx(p_ * r_ / (p_ + r_), rel=1e-9)


def test_update_singular_innovation():
    rho, v, _ = equilibrium()
    Pm = np.zeros((2 * I, 2 * I))
    Pm[I + 2, I + 2] = 4.0
    state = EkfState(np.r_[rho, v], Pm, P.lanes, I)
    cfg = EkfConfig(sigma_q_meas=0, sigma_v_meas=0)
    with pytest.raises(np.linalg.LinAlgError, match="innovation covariance is not invertible"):
        ekf_update(state, Measurement([2, 2], [np.nan, np.nan], [v[2] + 1, v[2] + 2]), cfg)


def test_degenerate_filter_reproduces_simulator():
    g, b = deterministic_case(120)
    seg = np.array([0, 5, 10, 15, 19])
    meas = {k: Measurement(seg, g.flow[seg, k], g.vel[seg, k]) for k in range(120)}
    state = initial_state(P, g.rho[:, 0], g.vel[:, 0], ZERO_NOISE)
    est = run_filter(state, P, b, 120, meas, ZERO_NOISE)
    assert est.rho.tobytes() == g.rho.tobytes()
    assert est.vel.tobytes() == g.vel.tobytes()


def test_filter_beats_raw_measurements_and_stays_bounded():
    truth, b, seg, zv, meas, cfg, rho0 = noisy_case()
    K = truth.shape[1]
    state = initial_state(P, rho0, fundamental_diagram(P, rho0), cfg)
    est = run_filter(state, P, b, K, meas, cfg)
    raw = np.sqrt(np.mean((zv - truth.vel[seg]) ** 2))
    filt = np.sqrt(np.mean((est.vel[seg] - truth.vel[seg]) ** 2))
    assert filt <= raw
    hidden = np.setdiff1d(np.arange(I), seg)
    err = np.sqrt(np.mean((est.vel[hidden] - truth.vel[hidden]) ** 2))
    assert np.isfinite(err) and err < 10.0
    again = run_filter(state, P, b, K, meas, cfg)
    assert again.vel.tobytes() == est.vel.tobytes()


def test_covariance_symmetric_with_nonnegative_diagonal():
    truth, b, seg, zv, meas, cfg, rho0 = noisy_case(K=40)
    state = initial_state(P, rho0, fundamental_diagram(P, rho0), cfg)
    for k in range(40):
        if k:
            state = ekf_predict(state, P, b.at(k - 1), cfg)
        state = ekf_update(state, meas[k], cfg)
        assert np.array_equal(state.P, state.P.T)
        assert np.all(np.diag(state.P) >= 0)
        assert np.all(state.x >= 0)


def test_parameter_random_walk_state():
    rho, v, inputs = equilibrium()
    cfg = EkfConfig(estimate_params=True)
    state = initial_state(P, rho, v, cfg)
    assert state.x.size == 2 * I + 3
    np.testing.assert_array_equal(state.param_values, [P.v_f, P.rho_cr, P.alpha])
    out = ekf_predict(state, P, inputs, cfg)
    np.testing.assert_array_equal(out.param_values, state.param_values)
    assert out.P.shape == (2 * I + 3, 2 * I + 3)
