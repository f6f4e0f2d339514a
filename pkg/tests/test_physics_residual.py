import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from traffic_prgp.gp_core import KernelParams, kernel_matrix
from traffic_prgp.metanet import MetanetParams, Ramps, fundamental_diagram
from traffic_prgp.physics_residual import (OpNode, PseudoBatch, ResidualGpSpec,
                                           metanet_residual_trees, metanet_residuals,
                                           physics_log_density, residual_g1, residual_g2,
                                           residual_g3, sample_pseudo_inputs,
                                           validate_operator_set)

from helpers import grid_estimates, interior_batch, peak_run

P = MetanetParams()


def est(q, v, rho):
    return np.array([[q, v, rho]], dtype=float)


def test_sample_singleton_lattice():
    b = sample_pseudo_inputs(3, 2, 1, 0)
    np.testing.assert_array_equal(b.Z, [[1, 0]])
    with pytest.raises(ValueError, match="pseudo batch larger than interior grid"):
        sample_pseudo_inputs(3, 2, 2, 0)


def test_sample_default_batch():
    b = sample_pseudo_inputs(20, 288, 10, 3)
    assert b.m == 10 and len({tuple(z) for z in b.Z}) == 10
    for Zs in (b.z00, b.z01, b.zm10, b.zp10):
        assert Zs[:, 0].min() >= 0 and Zs[:, 0].max() <= 19
        assert Zs[:, 1].min() >= 0 and Zs[:, 1].max() <= 287
    np.testing.assert_array_equal(b.z01, b.Z + [0, 1])
    np.testing.assert_array_equal(b.zm10, b.Z + [-1, 0])
    np.testing.assert_array_equal(b.zp10, b.Z + [1, 0])
    assert not b.omega.any() and b.omega.shape == (10,)
    np.testing.assert_array_equal(sample_pseudo_inputs(20, 288, 10, 3).Z, b.Z)


@given(st.integers(3, 12), st.integers(2, 15), st.integers(0, 2**31 - 1), st.data())
def test_sample_always_interior(I, K, seed, data):
    m = data.draw(st.integers(1, (I - 2) * (K - 1)))
    b = sample_pseudo_inputs(I, K, m, seed)
    assert np.all((b.Z[:, 0] >= 1) & (b.Z[:, 0] <= I - 2))
    assert np.all((b.Z[:, 1] >= 0) & (b.Z[:, 1] <= K - 2))
    assert len({tuple(z) for z in b.Z}) == m


def test_g1_hand_case_and_zero():
    p = MetanetParams(T=1 / 12)
    g = residual_g1(est(3000, 0, 40), est(0, 0, 50), est(4000, 0, 0), p, [5])
    assert g[0] == pytest.approx(10 - 41.666666666666664, abs=1e-12)
    z = np.zeros((1, 3))
    assert residual_g1(z, z, z, P, [3])[0] == 0.0


def test_g2_equilibrium_and_perturbation():
    rho = 30.0
    v = fundamental_diagram(P, rho)
    e = est(rho * v * 4, v, rho)
    assert residual_g2(e, e, e, e, P, [4])[0] == 0.0
    fwd = est(rho * v * 4, v + 1.0, rho)
    assert residual_g2(e, fwd, e, e, P, [4])[0] == pytest.approx(1.0, abs=1e-12)


def test_g3_hand_cases():
    assert residual_g3(est(4000, 100, 10), P, [0])[0] == 0.0
    assert residual_g3(est(4400, 100, 10), P, [0])[0] == 400.0


def test_annihilation_on_deterministic_trajectory():
    g = peak_run(P)
    b = interior_batch(20, 288)
    res = metanet_residuals(grid_estimates(g, b.all_inputs()), P, b)
    for r in res:
        assert np.abs(r).max() <= 1e-8


def test_ramp_absorption():
    K, I = 80, P.n_segments
    r, s = np.zeros((I, K)), np.zeros((I, K))
    r[8] = 400 + 200 * np.sin(np.arange(K) / 5)
    s[13] = 300.0
    g = peak_run(P, K, Ramps(r=r, s=s))
    b = interior_batch(I, K)
    g1 = metanet_residuals(grid_estimates(g, b.all_inputs()), P, b)[0]
    i, k = b.Z[:, 0], b.Z[:, 1]
    want = P.T / (P.delta[i] * P.lanes[i]) * (r[i, k] - s[i, k])
    np.testing.assert_allclose(g1, want, rtol=0, atol=1e-10)
    assert np.abs(want).max() > 0.5


def test_shifted_batch_matches_direct_indexing(rng):
    g = peak_run(MetanetParams(n_segments=6), K=12)
    p = MetanetParams(n_segments=6)
    b = sample_pseudo_inputs(6, 12, 15, 4)
    g1 = metanet_residuals(grid_estimates(g, b.all_inputs()), p, b)[0]
    for (i, k), val in zip(b.Z, g1):
        direct = (g.rho[i, k + 1] - g.rho[i, k]
                  - p.T / (p.delta[i] * p.lanes[i]) * (g.flow[i - 1, k] - g.flow[i, k]))
        assert val == pytest.approx(direct, abs=1e-12)


def identity_spec():
    tiny = KernelParams.from_values(1.0, 1e-3, 1e-3)  # K(Z, Z) = I for distinct Z
    return ResidualGpSpec((tiny,) * 3, nugget=0.0)


def test_log_density_zero_residuals():
    Z = np.array([[1, 0], [2, 3], [4, 1], [5, 5]])
    val = physics_log_density([np.zeros(4)] * 3, identity_spec(), Z)
    assert val == 3 * (-(4 / 2) * math.log(2 * math.pi))


def test_log_density_dense_oracle(rng):
    Z = rng.integers(0, 10, (5, 2))
    Z[:, 0] = np.arange(5)
    kernels = tuple(KernelParams.from_values(*rng.uniform(0.5, 3, 3)) for _ in range(3))
    spec = ResidualGpSpec(kernels, nugget=1e-6)
    G = [rng.normal(size=5) for _ in range(3)]
    want = 0.0
    for g, k in zip(G, kernels):
        C = kernel_matrix(k, Z, Z) + 1e-6 * k.signal_variance * np.eye(5)
        want += (-0.5 * g @ np.linalg.solve(C, g) - 0.5 * np.linalg.slogdet(C)[1]
                 - 2.5 * math.log(2 * math.pi))
    assert physics_log_density(G, spec, Z) == pytest.approx(want, abs=1e-8)


@given(st.floats(1e-3, 1e3), st.integers(0, 1000))
def test_log_density_strictly_decreasing_in_scale(scale, seed):
    rng = np.random.default_rng(seed)
    Z = np.column_stack([np.arange(6), rng.integers(0, 20, 6)])
    G = [rng.normal(size=6) + 0.1 for _ in range(3)]
    spec = ResidualGpSpec((KernelParams.from_values(1.0, 2.0, 2.0),) * 3)
    zero = physics_log_density([np.zeros(6)] * 3, spec, Z)
    a = physics_log_density([scale * g for g in G], spec, Z)
    b = physics_log_density([2 * scale * g for g in G], spec, Z)
    assert zero > a > b


def test_log_density_length_mismatch():
    with pytest.raises(ValueError):
        physics_log_density([np.zeros(3)] * 3, ResidualGpSpec(), np.zeros((4, 2)))


def test_operator_trees_admissible():
    for name, tree in metanet_residual_trees().items():
        rep = validate_operator_set(tree)
        assert rep.ok, (name, rep.violations)
        assert not rep.slack_variables and not rep.passthrough


def test_operator_violations_and_slack():
    x, y = OpNode("var", name="x"), OpNode("var", name="y")
    bad = OpNode("sub", (OpNode("abs", (x,), name="abs(x)"), y))
    rep = validate_operator_set(bad)
    assert not rep.ok and any("abs(x)" in v for v in rep.violations)
    declared = OpNode("abs", (x,), disjunction=True)
    assert validate_operator_set(declared).ok
    cmp_ = OpNode("le", (x, y), slack="s1")
    rep = validate_operator_set(cmp_)
    assert rep.ok and rep.slack_variables == ["s1"]
    assert not validate_operator_set(OpNode("le", (x, y))).ok


def test_operator_passthrough_warns():
    x = OpNode("var", name="x")
    node = OpNode("add", (OpNode("piecewise", (x,), differentiable=False, name="pw"), x))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        rep = validate_operator_set(node)
    assert rep.ok and rep.passthrough == ["pw"] and caught
    with pytest.warns(UserWarning):
        only = validate_operator_set(OpNode("piecewise", (x,), differentiable=False))
    assert not only.ok
