"""Experiment scenarios: synthetic ground truth, train/test split, the four
estimation methods and their evaluation on a clean test set."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import (Dataset, INTERNAL_UNITS, UnitSpec, FLOW, SPEED, ingest_csv,
                   inject_bias, subsample)
from .ekf import EkfConfig, Measurement, initial_state, run_filter
from .metanet import (Boundary, MetanetParams, NoiseSpec, Ramps, TrafficGrid,
                      emit_detector_data, fundamental_diagram, simulate)
from .metrics import MetricsReport, compute_metrics
from .prgp import TrainConfig, initial_params, predict, prepare_training_set, train

log = logging.getLogger(__name__)

METHODS = ("metanet", "metanet-ekf", "pure-gp", "prgp")

# Generating parameters of the synthetic corridor.  They deliberately differ
# from the MetanetParams defaults so the physics baselines run uncalibrated.
TRUE_PHYSICAL = dict(v_f=102.0, rho_cr=33.5, alpha=1.867, tau=18.0 / 3600.0, nu=60.0,
                     kappa=40.0, delta_ramp=0.0122)


@dataclass(frozen=True)
class SyntheticConfig:
    n_segments: int = 20
    seg_len: float = 0.5
    lanes: float = 4.0
    T: float = 1.0 / 360.0
    n_windows: int = 288
    aggregation: int = 30
    n_detectors: int = 5
    detectors: tuple | None = None
    demand_knots: tuple = ((0.0, 1800.0), (0.22, 2500.0), (0.30, 6600.0), (0.40, 6600.0),
                           (0.50, 4500.0), (0.66, 5000.0), (0.72, 6200.0), (0.80, 6000.0),
                           (0.90, 3000.0), (1.0, 1800.0))
    onramp_segment: int = 12
    onramp_peak: float = 900.0
    offramp_segment: int = 6
    offramp_rate: float = 0.08
    bottleneck: tuple = (0.32, 0.42, 60.0)   # start, end (horizon fractions), density
    process_sigma_q: float = 0.0
    process_sigma_v: float = 1.0
    meas_sigma_q: float = 60.0
    meas_sigma_v: float = 1.5

    def __post_init__(self):
        for seg in (self.onramp_segment, self.offramp_segment, *self.detector_segments()):
            if not 0 <= seg < self.n_segments:
                raise ValueError(f"segment {seg} outside 0..{self.n_segments - 1}")

    @property
    def horizon(self) -> int:
        return self.n_windows * self.aggregation

    def detector_segments(self) -> tuple[int, ...]:
        if self.detectors is not None:
            return tuple(int(d) for d in self.detectors)
        return tuple(int(round(x)) for x in np.linspace(0, self.n_segments - 1, self.n_detectors))

    def true_params(self) -> MetanetParams:
        return MetanetParams(T=self.T, delta=self.seg_len, lanes=self.lanes,
                             n_segments=self.n_segments, **TRUE_PHYSICAL)


@dataclass(frozen=True, eq=False)
class SyntheticTruth:
    grid: TrafficGrid
    boundary: Boundary
    params: MetanetParams
    rho0: np.ndarray
    v0: np.ndarray
    detectors: tuple
    clean: Dataset          # detector measurements, internal units


def free_flow_density(params: MetanetParams, q, lanes: float) -> np.ndarray:
    """Density on the uncongested branch carrying flow ``q`` (bisection)."""
    q = np.atleast_1d(np.asarray(q, dtype=float))
    lo, hi = np.zeros_like(q), np.full_like(q, params.rho_cr)
    cap = params.rho_cr * fundamental_diagram(params, params.rho_cr) * lanes
    target = np.minimum(q, cap)
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        below = mid * fundamental_diagram(params, mid) * lanes < target
        lo, hi = np.where(below, mid, lo), np.where(below, hi, mid)
    return 0.5 * (lo + hi)


def synthetic_truth(cfg: SyntheticConfig, seed: int) -> SyntheticTruth:
    """Stochastic METANET run with unmeasured ramps and a downstream bottleneck,
    plus noisy detector readings aggregated over ``cfg.aggregation`` steps."""
    params = cfg.true_params()
    K, I = cfg.horizon, cfg.n_segments
    frac = np.arange(K) / max(K - 1, 1)
    knots = np.array(cfg.demand_knots)
    q_up = np.interp(frac, knots[:, 0], knots[:, 1])
    rho_up = free_flow_density(params, q_up, cfg.lanes)
    v_up = fundamental_diagram(params, rho_up)
    start, end, rho_jam = cfg.bottleneck
    bump = np.clip(np.minimum(frac - start, end - frac) / 0.03, 0.0, 1.0)
    rho_down = rho_up + bump * np.maximum(rho_jam - rho_up, 0.0)
    ramp_shape = np.interp(frac, knots[:, 0], knots[:, 1]) / knots[:, 1].max()
    r = np.zeros((I, K))
    r[cfg.onramp_segment] = cfg.onramp_peak * ramp_shape
    beta = np.zeros((I, K))
    beta[cfg.offramp_segment] = cfg.offramp_rate
    rho0 = np.full(I, rho_up[0])
    v0 = np.full(I, v_up[0])
    boundary = Boundary(q_up, v_up, rho_down)
    grid = simulate(params, rho0, v0, K, boundary, Ramps(r=r, beta=beta),
                    NoiseSpec(cfg.process_sigma_q, cfg.process_sigma_v, seed))
    detectors = cfg.detector_segments()
    data = emit_detector_data(grid, detectors, cfg.aggregation)
    rng = np.random.default_rng([seed, 1])
    Y = data.Y.copy()
    Y[:, FLOW] = np.maximum(Y[:, FLOW] + rng.normal(0.0, cfg.meas_sigma_q, data.n), 0.0)
    Y[:, SPEED] = np.maximum(Y[:, SPEED] + rng.normal(0.0, cfg.meas_sigma_v, data.n), 0.0)
    return SyntheticTruth(grid, boundary, params, rho0, v0, detectors, data.with_values(Y))


@dataclass(frozen=True)
class SplitConfig:
    holdout_detectors: tuple | None = None   # default: the middle detector
    n_test_columns: int = 72
    time_holdout: str = "random"             # or "final"


def split(data: Dataset, cfg: SplitConfig, seed: int) -> tuple[Dataset, Dataset]:
    """Hold out whole detector rows plus a set of time columns at the others."""
    segs = np.unique(data.X[:, 0])
    held = (np.array(cfg.holdout_detectors) if cfg.holdout_detectors is not None
            else segs[[len(segs) // 2]])
    steps = np.unique(data.X[:, 1])
    n_cols = min(cfg.n_test_columns, steps.size - 1)
    if cfg.time_holdout == "final":
        cols = steps[steps.size - n_cols:]
    elif cfg.time_holdout == "random":
        cols = np.sort(np.random.default_rng([seed, 2]).choice(steps, n_cols, replace=False))
    else:
        raise ValueError("time_holdout must be 'random' or 'final'")
    test = np.isin(data.X[:, 0], held) | np.isin(data.X[:, 1], cols)
    return data.subset(np.flatnonzero(~test)), data.subset(np.flatnonzero(test))


@dataclass(frozen=True)
class Scenario:
    name: str = "scenario"
    source: str = "synthetic"               # or a detector CSV path
    source_units: UnitSpec = INTERNAL_UNITS
    sample_ratio: float = 1.0
    bias_fraction: float = 0.0
    bias_flow_std: float = 100.0            # veh/5min
    bias_speed_std: float = 5.0             # mph
    methods: tuple = METHODS
    seed: int = 0
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    model: MetanetParams = field(default_factory=MetanetParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    ekf: EkfConfig = field(default_factory=EkfConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    report_units: UnitSpec = UnitSpec(flow="veh/5min", speed="mph")

    def __post_init__(self):
        if not 0.0 <= self.bias_fraction <= 1.0:
            raise ValueError("bias fraction must lie in [0, 1]")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}")


@dataclass(frozen=True, eq=False)
class PreparedData:
    train: Dataset
    test: Dataset
    truth: SyntheticTruth | None
    n_steps: int
    n_segments: int
    aggregation: int


def prepare(sc: Scenario) -> PreparedData:
    if sc.source == "synthetic":
        truth = synthetic_truth(sc.synthetic, sc.seed)
        data = truth.clean
        n_segments, agg = sc.synthetic.n_segments, sc.synthetic.aggregation
    else:
        truth = None
        data = ingest_csv(sc.source, sc.source_units)
        n_segments, agg = sc.model.n_segments, sc.synthetic.aggregation
    n_steps = int(data.X[:, 1].max()) + 1
    train_set, test_set = split(data, sc.split, sc.seed)
    train_set = subsample(train_set, sc.sample_ratio, sc.seed + 101)
    train_set = inject_bias(train_set, sc.bias_fraction, sc.bias_flow_std, sc.bias_speed_std,
                            sc.seed + 202)
    return PreparedData(train_set, test_set, truth, n_steps, n_segments, agg)


def gp_physical(sc: Scenario, prep: PreparedData) -> MetanetParams:
    """Model parameters on the detector grid: one time index is one aggregation window."""
    return sc.model.replace(T=sc.model.T * prep.aggregation, n_segments=prep.n_segments)


def _grid_at(grid: TrafficGrid, X: np.ndarray, aggregation: int) -> Dataset:
    segs = np.unique(X[:, 0])
    est = emit_detector_data(grid, segs, aggregation)
    lookup = {(int(i), int(k)): j for j, (i, k) in enumerate(est.X)}
    rows = [lookup[(int(i), int(k))] for i, k in X]
    return Dataset(X, est.Y[rows])


def run_metanet(sc: Scenario, prep: PreparedData) -> Dataset:
    truth = prep.truth
    if truth is None:
        raise ValueError("metanet needs a synthetic source with boundary series")
    grid = simulate(sc.model, truth.rho0, truth.v0, truth.grid.shape[1], truth.boundary)
    return _grid_at(grid, prep.test.X, prep.aggregation)


def run_ekf(sc: Scenario, prep: PreparedData) -> Dataset:
    truth = prep.truth
    if truth is None:
        raise ValueError("metanet-ekf needs a synthetic source with boundary series")
    a = prep.aggregation
    by_step: dict[int, list] = {}
    for (i, j), (q, v, _) in zip(prep.train.X, prep.train.Y):
        by_step.setdefault((int(j) + 1) * a - 1, []).append((int(i), q, v))
    meas = {k: Measurement(*map(np.array, zip(*rows))) for k, rows in by_step.items()}
    state = initial_state(sc.model, truth.rho0, truth.v0, sc.ekf)
    grid = run_filter(state, sc.model, truth.boundary, truth.grid.shape[1], meas, sc.ekf)
    return _grid_at(grid, prep.test.X, a)


def run_gp(sc: Scenario, prep: PreparedData, physics: bool):
    physical = gp_physical(sc, prep)
    training = prepare_training_set(prep.train, physical, prep.n_steps)
    params0 = initial_params(physical, training, seed=sc.seed, m=sc.train.m)
    cfg = sc.train if physics else replace(sc.train, phi_g=0.0)
    model, trace = train(params0, training, cfg)
    pred = predict(model, prep.test.X)
    return pred.to_dataset(), model, trace


def run_scenario(sc: Scenario, prep: PreparedData | None = None) -> MetricsReport:
    """Run every requested method and score it on the uncorrupted test set.

    A failing method is recorded in ``report.errors`` and the rest continue.
    """
    prep = prepare(sc) if prep is None else prep
    report = MetricsReport(scenario=sc.name,
                           config={"seed": sc.seed, "n_train": prep.train.n,
                                   "n_test": prep.test.n})
    for method in sc.methods:
        t0 = time.perf_counter()
        try:
            if method == "metanet":
                est = run_metanet(sc, prep)
            elif method == "metanet-ekf":
                est = run_ekf(sc, prep)
            else:
                est, _, _ = run_gp(sc, prep, physics=(method == "prgp"))
        except Exception as exc:  # noqa: BLE001 - recorded, scenario continues
            log.warning("%s failed: %s", method, exc)
            report.errors[method] = f"{type(exc).__name__}: {exc}"
            continue
        runtime = time.perf_counter() - t0
        part = compute_metrics(prep.test, est, method, sc.report_units, runtime_s=runtime)
        report.rows.extend(part.rows)
        report.scatter[method] = (prep.test, est)
        log.info("%s done in %.1fs", method, runtime)
    return report
