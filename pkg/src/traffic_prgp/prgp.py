"""Physics regularized GP estimator.

The training objective has a data term, the GP log evidence of the
observed flow and speed columns, and a physics term, the log density of the
METANET residuals at random pseudo-inputs under the residual GP.  Both are
ascended jointly; each term gets its own step size (and its own ADAM
moments) so the regularization strength is set by ``phi_g`` alone.

Density is a third GP output that is never observed directly.  It is
conditioned on the density implied by each observed (flow, speed) pair,
``q / (lanes * v)``, and its hyperparameters are trained only through the
physics term.
"""

from __future__ import annotations

import configparser
import hashlib
import math
import time
from collections import OrderedDict
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .data import (Dataset, Standardization, FLOW, SPEED, DENSITY, DIM_NAMES,
                   OBSERVED_DIMS, standardize)
from .gp_core import (GpSpec, KernelParams, axis_eigh, fit_dimension, fit_dimension_grid,
                      grid_axes, jittered_cholesky, log_marginal_likelihood)
from .metanet import MetanetParams, PHYSICAL_NAMES
from .optim import Adam, gradient_fd
from .physics_residual import (PseudoBatch, ResidualGpSpec, N_EQUATIONS, metanet_residuals,
                               physics_log_density, sample_pseudo_inputs)

GP_DIMS = (FLOW, SPEED, DENSITY)
KERNEL_FIELDS = ("log_signal_variance", "log_lengthscale_space", "log_lengthscale_time")
EQUATION_NAMES = ("g1", "g2", "g3")


# ---------------------------------------------------------------------------
# Parameters and the flat theta layout
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PrgpParams:
    gp: GpSpec
    residual_gp: ResidualGpSpec
    physical: MetanetParams


class ThetaLayout:
    """Ordered map between a flat unconstrained vector and ``PrgpParams``.

    Every entry is the logarithm of a positive quantity.
    """

    def __init__(self):
        names = []
        for d in GP_DIMS:
            names += [f"gp.{DIM_NAMES[d]}.{f}" for f in KERNEL_FIELDS]
            names.append(f"gp.{DIM_NAMES[d]}.log_noise_precision")
        for w in EQUATION_NAMES:
            names += [f"residual.{w}.{f}" for f in KERNEL_FIELDS]
        names += [f"physical.log_{p}" for p in PHYSICAL_NAMES]
        self.names = tuple(names)
        self._index = {n: j for j, n in enumerate(self.names)}

    def __len__(self):
        return len(self.names)

    def index(self, name: str) -> int:
        return self._index[name]

    def gp_coords(self, dim: int) -> list[int]:
        return [j for j, n in enumerate(self.names) if n.startswith(f"gp.{DIM_NAMES[dim]}.")]

    def residual_coords(self) -> list[int]:
        return [j for j, n in enumerate(self.names) if n.startswith("residual.")]

    def physical_coords(self) -> list[int]:
        return [j for j, n in enumerate(self.names) if n.startswith("physical.")]

    def pack(self, params: PrgpParams) -> np.ndarray:
        theta = []
        for d in GP_DIMS:
            theta += list(params.gp.kernels[d].as_array())
            theta.append(math.log(params.gp.noise_precision[d]))
        for k in params.residual_gp.kernels:
            theta += list(k.as_array())
        theta += [math.log(getattr(params.physical, p)) for p in PHYSICAL_NAMES]
        return np.array(theta, dtype=float)

    def unpack(self, theta, template: PrgpParams) -> PrgpParams:
        """Rebuild parameters from ``theta``; fixed quantities come from ``template``."""
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (len(self),):
            raise ValueError(f"theta must have {len(self)} entries")
        kernels, precisions = [], []
        for n, d in enumerate(GP_DIMS):
            block = theta[4 * n:4 * n + 4]
            kernels.append(KernelParams(*map(float, block[:3])))
            precisions.append(math.exp(block[3]))
        off = 4 * len(GP_DIMS)
        res = [KernelParams(*map(float, theta[off + 3 * w:off + 3 * w + 3]))
               for w in range(N_EQUATIONS)]
        off += 3 * N_EQUATIONS
        phys = {p: math.exp(theta[off + j]) for j, p in enumerate(PHYSICAL_NAMES)}
        return PrgpParams(
            GpSpec(kernels, precisions, template.gp.prior_mean),
            ResidualGpSpec(res, template.residual_gp.nugget),
            template.physical.replace(**phys))


LAYOUT = ThetaLayout()


# ---------------------------------------------------------------------------
# Training data
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TrainingSet:
    """Standardized observations with the derived density column filled in."""

    data: Dataset
    stats: Standardization
    n_segments: int
    n_steps: int


def derive_density(data: Dataset, lanes) -> Dataset:
    """Fill the density column with ``q / (lanes * v)`` where both are observed."""
    lanes = np.asarray(lanes, dtype=float)
    q, v = data.Y[:, FLOW], data.Y[:, SPEED]
    with np.errstate(divide="ignore", invalid="ignore"):
        rho = np.where(v > 0, q / (lanes[data.X[:, 0]] * v), np.nan)
    Y = data.Y.copy()
    Y[:, DENSITY] = rho
    return data.with_values(Y)


def prepare_training_set(raw: Dataset, physical: MetanetParams, n_steps: int | None = None,
                         stats: Standardization | None = None) -> TrainingSet:
    """Derive density and standardize; ``raw`` must be in internal units."""
    if raw.n == 0:
        raise ValueError("no training data")
    full = derive_density(raw, physical.lanes)
    if stats is None:
        std_data, stats = standardize(full)
    else:
        std_data = full.with_values(stats.apply(full.Y))
    n_steps = int(raw.X[:, 1].max()) + 1 if n_steps is None else int(n_steps)
    if raw.X[:, 0].max() >= physical.n_segments:
        raise ValueError("data refers to a segment outside the corridor")
    return TrainingSet(std_data, stats, physical.n_segments, n_steps)


# ---------------------------------------------------------------------------
# Objective terms
# ---------------------------------------------------------------------------


def elbo_data_term(params: PrgpParams, data: Dataset) -> float:
    """GP log evidence summed over the observed dimensions (standardized data)."""
    return float(sum(log_marginal_likelihood(params.gp, data, d)
                     for d in OBSERVED_DIMS if data.mask[:, d].any()))


class PrgpObjective:
    """Evaluates both objective terms at flat parameter vectors.

    Per-dimension GP factorizations are memoized on that dimension's slice
    of theta, so probing one coordinate refactorizes one dimension only.
    When a dimension's training inputs form a complete segment x time grid
    the exact fit goes through the Kronecker eigensystem instead of a dense
    Cholesky factor.
    """

    def __init__(self, training: TrainingSet, template: PrgpParams, cache_size: int = 20):
        self.training = training
        self.template = template
        self._cache: OrderedDict = OrderedDict()
        self._cache_size = cache_size
        self._slices = {d: LAYOUT.gp_coords(d) for d in GP_DIMS}
        self._axes = {d: grid_axes(training.data.observed(d)[0]) for d in GP_DIMS}
        self._eig: OrderedDict = OrderedDict()
        self._means: OrderedDict = OrderedDict()

    def _axis_eig(self, coords: np.ndarray, log_lengthscale: float):
        key = (coords.tobytes(), float(log_lengthscale))
        hit = self._eig.get(key)
        if hit is None:
            hit = self._eig[key] = axis_eigh(coords, math.exp(log_lengthscale))
            if len(self._eig) > 4 * self._cache_size:
                self._eig.popitem(last=False)
        return hit

    def fitted(self, dim: int, theta: np.ndarray):
        block = theta[self._slices[dim]]
        key = (dim, block.tobytes())
        hit = self._cache.get(key)
        if hit is not None:
            self._cache.move_to_end(key)
            return hit
        X, y = self.training.data.observed(dim)
        if y.size == 0:
            raise ValueError(f"unobserved dimension has no posterior ({DIM_NAMES[dim]})")
        kernel = KernelParams(*map(float, block[:3]))
        args = (kernel, math.exp(block[3]), self.template.gp.prior_mean[dim], X, y)
        axes = self._axes[dim]
        if axes is None:
            fit = fit_dimension(*args)
        else:
            fit = fit_dimension_grid(*args, axes, self._axis_eig(axes[0], block[1]),
                                     self._axis_eig(axes[1], block[2]))
        self._cache[key] = fit
        if len(self._cache) > self._cache_size:
            self._cache.popitem(last=False)
        return fit

    def _mean(self, dim: int, theta: np.ndarray, inputs: np.ndarray) -> np.ndarray:
        key = (dim, theta[self._slices[dim]].tobytes(), inputs.tobytes())
        hit = self._means.get(key)
        if hit is None:
            hit = self._means[key] = self.fitted(dim, theta).mean(inputs)
            if len(self._means) > 4 * self._cache_size:
                self._means.popitem(last=False)
        return hit

    def data_term(self, theta: np.ndarray) -> float:
        return float(sum(self.fitted(d, theta).log_marginal_likelihood for d in OBSERVED_DIMS
                         if self.training.data.mask[:, d].any()))

    def estimates(self, theta: np.ndarray, inputs: np.ndarray, eps=None) -> np.ndarray:
        """Physical-unit posterior estimates at ``inputs``, shape (n, 3) or (S, n, 3)."""
        stats = self.training.stats
        if eps is None:
            out = np.column_stack([self._mean(d, theta, inputs) for d in GP_DIMS])
            return stats.invert(out)
        samples = np.empty((eps.shape[0], inputs.shape[0], len(GP_DIMS)))
        for d in GP_DIMS:
            mean, cov = self.fitted(d, theta).predict_cov(inputs)
            L, _ = jittered_cholesky(cov + 1e-10 * np.eye(cov.shape[0]))
            samples[:, :, d] = mean + eps[:, d, :] @ L.T
        return stats.invert(samples)

    def physics_term(self, theta: np.ndarray, batch: PseudoBatch, eps=None) -> float:
        params = LAYOUT.unpack(theta, self.template)
        inputs = batch.all_inputs()
        est = self.estimates(theta, inputs, eps)
        if eps is None:
            res = metanet_residuals(est, params.physical, batch)
            return physics_log_density(res, params.residual_gp, batch.Z)
        vals = [physics_log_density(metanet_residuals(e, params.physical, batch),
                                    params.residual_gp, batch.Z) for e in est]
        return float(np.mean(vals))

    def terms(self, theta: np.ndarray, batch: PseudoBatch, eps=None) -> np.ndarray:
        return np.array([self.data_term(theta), self.physics_term(theta, batch, eps)])


def elbo_physics_term(params: PrgpParams, training: TrainingSet, batch: PseudoBatch,
                      eps=None) -> float:
    """Physics log density of the residuals of the posterior-mean estimates at ``batch``."""
    return PrgpObjective(training, params).physics_term(LAYOUT.pack(params), batch, eps)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 500
    learning_rate: float = 0.01
    phi_f: float | None = None
    phi_g: float | None = None
    m: int = 10
    seed: int = 0
    plateau_patience: int = 20
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    posterior_samples: int = 0
    fd_step: float = 1e-5
    max_recoveries: int = 10

    def __post_init__(self):
        if self.iterations < 1 or self.m < 1:
            raise ValueError("iterations and m must be >= 1")
        if self.step_f < 0 or self.step_g < 0:
            raise ValueError("step sizes must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")

    @property
    def step_f(self) -> float:
        return self.learning_rate if self.phi_f is None else self.phi_f

    @property
    def step_g(self) -> float:
        return self.learning_rate if self.phi_g is None else self.phi_g


@dataclass(frozen=True)
class TrainRecord:
    iteration: int
    L_f: float
    L_g: float
    theta_hash: str
    wall_time: float


@dataclass
class TrainTrace:
    records: list[TrainRecord] = field(default_factory=list)
    recoveries: int = 0
    stop_reason: str = ""

    def signature(self) -> list[tuple]:
        """Everything except wall time, for reproducibility checks."""
        return [(r.iteration, r.L_f, r.L_g, r.theta_hash) for r in self.records]


@dataclass(frozen=True, eq=False)
class Prediction:
    X: np.ndarray
    mean: np.ndarray
    var: np.ndarray

    @property
    def q(self):
        return self.mean[:, FLOW]

    @property
    def v(self):
        return self.mean[:, SPEED]

    @property
    def rho(self):
        return self.mean[:, DENSITY]

    def to_dataset(self) -> Dataset:
        return Dataset(self.X, self.mean)


@dataclass(frozen=True, eq=False)
class PrgpModel:
    params: PrgpParams
    training: TrainingSet

    def predict(self, Xs) -> Prediction:
        return predict(self, Xs)


def theta_hash(theta: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(theta).tobytes()).hexdigest()[:16]


def initial_params(physical: MetanetParams, training: TrainingSet, lengthscale_space=2.0,
                   lengthscale_time=3.0, noise_precision=10.0, seed: int = 0,
                   n_batches: int = 5, m: int = 10) -> PrgpParams:
    """Starting point: unit-variance kernels on standardized outputs, and
    residual kernels scaled to the residuals these GPs produce."""
    k = KernelParams.from_values(1.0, lengthscale_space, lengthscale_time)
    gp = GpSpec((k,) * 3, (noise_precision,) * 3)
    params = PrgpParams(gp, ResidualGpSpec(), physical)
    obj = PrgpObjective(training, params)
    theta = LAYOUT.pack(params)
    rng = np.random.default_rng(seed)
    sq = np.zeros(N_EQUATIONS)
    for _ in range(n_batches):
        batch = sample_pseudo_inputs(training.n_segments, training.n_steps, m, rng)
        est = obj.estimates(theta, batch.all_inputs())
        sq += [np.mean(g ** 2) for g in metanet_residuals(est, physical, batch)]
    scale = np.maximum(sq / n_batches, 1e-12)
    res = ResidualGpSpec([KernelParams.from_values(s, 1.0, 1.0) for s in scale])
    return PrgpParams(gp, res, physical)


def train(params0: PrgpParams, training: TrainingSet, config: TrainConfig = TrainConfig(),
          callback=None) -> tuple[PrgpModel, TrainTrace]:
    """Alternating stochastic ascent on the data and physics terms.

    Each iteration draws a pseudo batch, evaluates both terms and their
    finite-difference gradients with the batch held fixed, and moves theta
    by ``phi_f * d_f + phi_g * d_g`` where ``d`` is the ADAM direction (or the
    raw gradient with ``optimizer='sgd'``).
    """
    theta = LAYOUT.pack(params0)
    obj = PrgpObjective(training, params0)
    rng = np.random.default_rng(config.seed)
    phi_f, phi_g = config.step_f, config.step_g
    use_g = phi_g > 0
    adam_f = Adam(theta.size, config.beta1, config.beta2, config.adam_eps)
    adam_g = Adam(theta.size, config.beta1, config.beta2, config.adam_eps)
    f_coords = [j for d in OBSERVED_DIMS for j in LAYOUT.gp_coords(d)]
    trace = TrainTrace()
    t0 = time.perf_counter()
    prev_lf, flat_run, consecutive = None, 0, 0
    trace.stop_reason = "iterations"

    for it in range(config.iterations):
        batch = sample_pseudo_inputs(training.n_segments, training.n_steps, config.m, rng)
        eps = (rng.standard_normal((config.posterior_samples, len(GP_DIMS), 4 * config.m))
               if config.posterior_samples else None)
        lf, lg = obj.terms(theta, batch, eps)
        if not (np.isfinite(lf) and np.isfinite(lg)):
            raise RuntimeError(f"non-finite objective at iteration {it}: L_f={lf}, L_g={lg}")
        trace.records.append(TrainRecord(it, float(lf), float(lg), theta_hash(theta),
                                         time.perf_counter() - t0))
        if callback is not None:
            callback(it, theta, lf, lg)
        if prev_lf is not None:
            flat_run = flat_run + 1 if lf - prev_lf == 0 else 0
            if flat_run >= config.plateau_patience:
                trace.stop_reason = "plateau"
                break
        prev_lf = lf

        if use_g:
            jac = gradient_fd(lambda th: obj.terms(th, batch, eps), theta,
                              rel_step=config.fd_step)
            grad_f, grad_g = jac[0], jac[1]
        else:
            grad_f = gradient_fd(obj.data_term, theta, coords=f_coords, rel_step=config.fd_step)
            grad_g = np.zeros_like(theta)
        if config.optimizer == "adam":
            update = phi_f * adam_f.direction(grad_f)
            if use_g:
                update = update + phi_g * adam_g.direction(grad_g)
        else:
            update = phi_f * grad_f + phi_g * grad_g

        scale = 1.0
        while True:
            candidate = theta + scale * update
            try:
                ok = np.isfinite(obj.data_term(candidate)) and (
                    not use_g or np.isfinite(obj.physics_term(candidate, batch, eps)))
            except (np.linalg.LinAlgError, ValueError, FloatingPointError):
                ok = False
            if ok:
                consecutive = 0
                break
            trace.recoveries += 1
            consecutive += 1
            if consecutive > config.max_recoveries:
                raise RuntimeError(
                    f"aborting at iteration {it}: {consecutive} consecutive non-finite steps; "
                    f"largest update component {np.max(np.abs(update)):.3g} on "
                    f"{LAYOUT.names[int(np.argmax(np.abs(update)))]}")
            scale *= 0.5
        theta = candidate

    params = LAYOUT.unpack(theta, params0)
    return PrgpModel(params, training), trace


def predict(model: PrgpModel, Xs) -> Prediction:
    """Posterior mean and variance per output dimension, in physical units."""
    Xs = np.asarray(Xs, dtype=np.int64).reshape(-1, 2)
    obj = PrgpObjective(model.training, model.params)
    theta = LAYOUT.pack(model.params)
    means, vars_ = [], []
    for d in GP_DIMS:
        mu, var = obj.fitted(d, theta).predict(Xs)
        means.append(mu)
        vars_.append(var)
    stats = model.training.stats
    mean = stats.invert(np.column_stack(means))
    var = np.column_stack(vars_) * stats.std ** 2
    return Prediction(Xs, mean, var)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: PrgpModel, path, config: TrainConfig | None = None) -> Path:
    """Plain-text key/value checkpoint; floats are written with ``repr`` so
    the round trip is exact."""
    path = Path(path)
    cp = configparser.ConfigParser()
    cp.optionxform = str
    theta = LAYOUT.pack(model.params)
    cp["theta"] = {n: repr(float(x)) for n, x in zip(LAYOUT.names, theta)}
    stats = model.training.stats
    cp["stats"] = {}
    for d, name in enumerate(DIM_NAMES):
        cp["stats"][f"{name}.mean"] = repr(float(stats.mean[d]))
        cp["stats"][f"{name}.std"] = repr(float(stats.std[d]))
    phys = model.params.physical
    cp["fixed"] = {
        "T": repr(float(phys.T)),
        "delta": " ".join(repr(float(x)) for x in phys.delta),
        "lanes": " ".join(repr(float(x)) for x in phys.lanes),
        "n_segments": str(phys.n_segments),
        "n_steps": str(model.training.n_steps),
        "prior_mean": " ".join(repr(x) for x in model.params.gp.prior_mean),
        "nugget": repr(model.params.residual_gp.nugget),
    }
    if config is not None:
        cp["config"] = {k: repr(v) for k, v in asdict(config).items()}
    with path.open("w") as fh:
        cp.write(fh)
    return path


@dataclass(frozen=True, eq=False)
class Checkpoint:
    params: PrgpParams
    stats: Standardization
    n_steps: int
    config: dict


def load_checkpoint(path) -> Checkpoint:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    if not cp.read(path):
        raise FileNotFoundError(path)
    fixed = cp["fixed"]
    floats = lambda s: [float(x) for x in s.split()]  # noqa: E731
    physical = MetanetParams(T=float(fixed["T"]), delta=floats(fixed["delta"]),
                             lanes=floats(fixed["lanes"]), n_segments=int(fixed["n_segments"]))
    template = PrgpParams(
        GpSpec((KernelParams(),) * 3, (1.0,) * 3, tuple(floats(fixed["prior_mean"]))),
        ResidualGpSpec(nugget=float(fixed["nugget"])), physical)
    theta = np.array([float(cp["theta"][n]) for n in LAYOUT.names])
    stats = Standardization(
        np.array([float(cp["stats"][f"{n}.mean"]) for n in DIM_NAMES]),
        np.array([float(cp["stats"][f"{n}.std"]) for n in DIM_NAMES]))
    config = dict(cp["config"]) if cp.has_section("config") else {}
    return Checkpoint(LAYOUT.unpack(theta, template), stats, int(fixed["n_steps"]), config)


def model_from_checkpoint(ckpt: Checkpoint, raw: Dataset) -> PrgpModel:
    training = prepare_training_set(raw, ckpt.params.physical, ckpt.n_steps, ckpt.stats)
    return PrgpModel(ckpt.params, training)
