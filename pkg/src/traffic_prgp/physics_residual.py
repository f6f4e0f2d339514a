"""METANET residuals over GP estimates at pseudo-inputs, and the residual GP.

The residuals are evaluated on four index-shifted copies of a batch of
pseudo-inputs ``Z``: the base cell (i, k), the next time step (i, k+1),
the upstream neighbour (i-1, k) and the downstream neighbour (i+1, k).
Estimates are ``(m, 3)`` arrays with columns (flow, speed, density) in
physical units.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .data import FLOW, SPEED, DENSITY
from .gp_core import KernelParams, kernel_matrix, jittered_cholesky, LOG_2PI
from .metanet import MetanetParams, fundamental_diagram

N_EQUATIONS = 3
DENOMINATOR_GUARD = 1e-6  # veh/km/lane


@dataclass(frozen=True, eq=False)
class PseudoBatch:
    """Base pseudo-inputs ``Z`` (m, 2) and their dummy outputs (all zero)."""

    Z: np.ndarray

    def __post_init__(self):
        Z = np.asarray(self.Z, dtype=np.int64).reshape(-1, 2)
        Z.setflags(write=False)
        object.__setattr__(self, "Z", Z)

    @property
    def m(self) -> int:
        return self.Z.shape[0]

    @property
    def omega(self) -> np.ndarray:
        return np.zeros(self.m)

    def shifted(self, di: int, dk: int) -> np.ndarray:
        return self.Z + np.array([di, dk])

    @property
    def z00(self) -> np.ndarray:
        return self.Z

    @property
    def z01(self) -> np.ndarray:
        return self.shifted(0, 1)

    @property
    def zm10(self) -> np.ndarray:
        return self.shifted(-1, 0)

    @property
    def zp10(self) -> np.ndarray:
        return self.shifted(1, 0)

    def all_inputs(self) -> np.ndarray:
        """The four shifted sets stacked as (00, 01, -10, +10), shape (4m, 2)."""
        return np.vstack([self.z00, self.z01, self.zm10, self.zp10])


@dataclass(frozen=True)
class ResidualGpSpec:
    """One kernel per physics equation; ``nugget`` is relative diagonal jitter."""

    kernels: tuple[KernelParams, ...] = field(
        default_factory=lambda: (KernelParams(),) * N_EQUATIONS)
    nugget: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "kernels", tuple(self.kernels))
        if len(self.kernels) != N_EQUATIONS:
            raise ValueError(f"need exactly {N_EQUATIONS} residual kernels")


def sample_pseudo_inputs(n_segments: int, n_steps: int, m: int, seed) -> PseudoBatch:
    """Draw ``m`` distinct cells from the interior lattice {1..I-2} x {0..K-2}.

    ``seed`` is an int or a ``numpy.random.Generator``.
    """
    if n_segments < 3 or n_steps < 2 or m < 1:
        raise ValueError("need n_segments >= 3, n_steps >= 2 and m >= 1")
    width = n_steps - 1
    size = (n_segments - 2) * width
    if m > size:
        raise ValueError("pseudo batch larger than interior grid")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    flat = rng.choice(size, size=m, replace=False)
    return PseudoBatch(np.column_stack([flat // width + 1, flat % width]))


def _segment_terms(params: MetanetParams, segments):
    seg = np.asarray(segments, dtype=np.int64)
    return params.delta[seg], params.lanes[seg]


def residual_g1(center, forward, upstream, params: MetanetParams, segments) -> np.ndarray:
    """Conservation residual with ramp terms removed."""
    dl, lam = _segment_terms(params, segments)
    return (forward[:, DENSITY] - center[:, DENSITY]
            - params.T / (dl * lam) * (upstream[:, FLOW] - center[:, FLOW]))


def residual_g2(center, forward, upstream, downstream, params: MetanetParams,
                segments) -> np.ndarray:
    """Speed-dynamics residual with the on-ramp merge term removed."""
    dl, _ = _segment_terms(params, segments)
    T, tau = params.T, params.tau
    rho, v = center[:, DENSITY], center[:, SPEED]
    eq_speed = fundamental_diagram(params, np.maximum(rho, 0.0))
    return (forward[:, SPEED] - v
            - T / tau * (eq_speed - v)
            - T / dl * v * (upstream[:, SPEED] - v)
            + params.nu * T / (tau * dl) * (downstream[:, DENSITY] - rho)
            / (rho + params.kappa + DENOMINATOR_GUARD))


def residual_g3(center, params: MetanetParams, segments) -> np.ndarray:
    """Flow identity residual q - rho*v*lanes."""
    _, lam = _segment_terms(params, segments)
    return center[:, FLOW] - center[:, DENSITY] * center[:, SPEED] * lam


def metanet_residuals(estimates, params: MetanetParams, batch: PseudoBatch) -> list[np.ndarray]:
    """All three residuals from estimates stacked as in ``PseudoBatch.all_inputs``."""
    m = batch.m
    est = np.asarray(estimates, dtype=float).reshape(4, m, 3)
    center, forward, upstream, downstream = est
    seg = batch.Z[:, 0]
    return [residual_g1(center, forward, upstream, params, seg),
            residual_g2(center, forward, upstream, downstream, params, seg),
            residual_g3(center, params, seg)]


def physics_log_density(residuals, spec: ResidualGpSpec, Z) -> float:
    """Sum over equations of log N(G_w | 0, K_gw(Z, Z) + nugget)."""
    Z = np.asarray(Z, dtype=float).reshape(-1, 2)
    total = 0.0
    for G, kernel in zip(residuals, spec.kernels):
        G = np.asarray(G, dtype=float)
        if G.shape != (Z.shape[0],):
            raise ValueError("residual length does not match Z")
        K = kernel_matrix(kernel, Z, Z)
        if spec.nugget:
            K[np.diag_indices_from(K)] += spec.nugget * kernel.signal_variance
        L, _ = jittered_cholesky(K)
        a = sla.solve_triangular(L, G, lower=True)
        total += -0.5 * a @ a - np.log(np.diag(L)).sum() - 0.5 * G.size * LOG_2PI
    return float(total)


# ---------------------------------------------------------------------------
# Operator admissibility
# ---------------------------------------------------------------------------

ARITHMETIC = frozenset({"add", "sub", "mul", "div", "neg"})
SMOOTH = frozenset({"exp", "pow"})
DIFFERENCE = frozenset({"diff"})
COMPARISON = frozenset({"lt", "le", "gt", "ge"})
DISJUNCTION = frozenset({"piecewise"})
LEAVES = frozenset({"var", "const"})


@dataclass(frozen=True)
class OpNode:
    """A node of a residual expression tree.

    ``slack`` names the slack/surplus variable that turns a comparison into
    an equation; ``disjunction`` declares a node as a finite set of smooth
    segments; ``differentiable=False`` requests a pass-through gradient.
    """

    kind: str
    children: tuple["OpNode", ...] = ()
    name: str = ""
    slack: str | None = None
    disjunction: bool = False
    differentiable: bool = True

    def walk(self):
        yield self
        for c in self.children:
            yield from c.walk()


@dataclass
class OperatorReport:
    violations: list[str] = field(default_factory=list)
    slack_variables: list[str] = field(default_factory=list)
    passthrough: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_operator_set(tree: OpNode) -> OperatorReport:
    """Check that a residual only uses operators that keep the objective differentiable.

    Admissible: arithmetic, exp/pow, differences, comparisons carrying a
    slack variable and declared disjunctions.  Non-differentiable nodes are
    tolerated with a pass-through gradient unless every operator is one.
    """
    report = OperatorReport()
    operators = 0
    for node in tree.walk():
        label = node.name or node.kind
        if node.kind in LEAVES:
            continue
        operators += 1
        if node.kind in COMPARISON:
            if node.slack:
                report.slack_variables.append(node.slack)
            else:
                report.violations.append(f"{label}: comparison without slack variable")
        elif node.kind in DISJUNCTION or node.disjunction:
            pass
        elif node.kind not in ARITHMETIC | SMOOTH | DIFFERENCE:
            report.violations.append(f"{label}: operator {node.kind!r} is not admissible")
        if not node.differentiable:
            report.passthrough.append(label)
            warnings.warn(f"{label}: non-differentiable, gradient passed through as 1",
                          stacklevel=2)
    if operators and len(report.passthrough) == operators:
        report.violations.append("every operator is non-differentiable")
    return report


def _v(name):
    return OpNode("var", name=name)


def _c(name):
    return OpNode("const", name=name)


def _op(kind, *children, **kw):
    return OpNode(kind, tuple(children), **kw)


def metanet_residual_trees() -> dict[str, OpNode]:
    """Expression trees of the three encoded METANET residuals."""
    coef1 = _op("div", _c("T"), _op("mul", _c("delta"), _c("lanes")))
    g1 = _op("sub", _op("diff", _v("rho[i,k+1]"), _v("rho[i,k]")),
             _op("mul", coef1, _op("diff", _v("q[i-1,k]"), _v("q[i,k]"))), name="G1")
    V = _op("mul", _c("v_f"), _op("exp", _op("neg", _op(
        "div", _op("pow", _op("div", _v("rho[i,k]"), _c("rho_cr")), _c("alpha")), _c("alpha")))))
    relax = _op("mul", _op("div", _c("T"), _c("tau")), _op("sub", V, _v("v[i,k]")))
    convect = _op("mul", _op("div", _c("T"), _c("delta")),
                  _op("mul", _v("v[i,k]"), _op("diff", _v("v[i-1,k]"), _v("v[i,k]"))))
    anticip = _op("mul", _op("div", _op("mul", _c("nu"), _c("T")), _op("mul", _c("tau"), _c("delta"))),
                  _op("div", _op("diff", _v("rho[i+1,k]"), _v("rho[i,k]")),
                      _op("add", _op("add", _v("rho[i,k]"), _c("kappa")), _c("eps"))))
    g2 = _op("add", _op("sub", _op("sub", _op("diff", _v("v[i,k+1]"), _v("v[i,k]")), relax),
                        convect), anticip, name="G2")
    g3 = _op("sub", _v("q[i,k]"), _op("mul", _op("mul", _v("rho[i,k]"), _v("v[i,k]")), _c("lanes")),
             name="G3")
    return {"G1": g1, "G2": g2, "G3": g3}
