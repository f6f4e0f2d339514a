"""Exact Gaussian-process regression over (segment, time) inputs.

One independent GP per output dimension, each with an anisotropic
squared-exponential kernel.  All routines are pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg as sla

from .data import Dataset, DIM_NAMES

LOG_2PI = math.log(2.0 * math.pi)

JITTER_START = 1e-8
JITTER_MAX = 1e-2


@dataclass(frozen=True)
class KernelParams:
    """Squared-exponential kernel hyperparameters, stored as logarithms."""

    log_signal_variance: float = 0.0
    log_lengthscale_space: float = 0.0
    log_lengthscale_time: float = 0.0

    @classmethod
    def from_values(cls, signal_variance: float, lengthscale_space: float,
                    lengthscale_time: float) -> "KernelParams":
        vals = (signal_variance, lengthscale_space, lengthscale_time)
        if min(vals) <= 0:
            raise ValueError("kernel parameters must be strictly positive")
        return cls(*(math.log(v) for v in vals))

    @property
    def signal_variance(self) -> float:
        return math.exp(self.log_signal_variance)

    @property
    def lengthscale_space(self) -> float:
        return math.exp(self.log_lengthscale_space)

    @property
    def lengthscale_time(self) -> float:
        return math.exp(self.log_lengthscale_time)

    def as_array(self) -> np.ndarray:
        return np.array([self.log_signal_variance, self.log_lengthscale_space,
                         self.log_lengthscale_time])


@dataclass(frozen=True)
class GpSpec:
    """Per-dimension kernels, noise precisions and prior means."""

    kernels: tuple[KernelParams, ...]
    noise_precision: tuple[float, ...]
    prior_mean: tuple[float, ...] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "kernels", tuple(self.kernels))
        object.__setattr__(self, "noise_precision", tuple(float(t) for t in self.noise_precision))
        object.__setattr__(self, "prior_mean", tuple(float(m) for m in self.prior_mean))
        d = len(self.kernels)
        if len(self.noise_precision) != d or len(self.prior_mean) != d:
            raise ValueError("kernels, noise_precision and prior_mean lengths differ")
        if min(self.noise_precision) <= 0:
            raise ValueError("noise precision must be positive")


def kernel_eval(params: KernelParams, x, x2) -> float:
    di = float(x[0]) - float(x2[0])
    dk = float(x[1]) - float(x2[1])
    return params.signal_variance * math.exp(
        -0.5 * di * di / params.lengthscale_space ** 2
        - 0.5 * dk * dk / params.lengthscale_time ** 2)


def kernel_matrix(params: KernelParams, A, B) -> np.ndarray:
    """Covariance matrix with entry (p, q) = K(A[p], B[q])."""
    A = np.asarray(A, dtype=float).reshape(-1, 2)
    B = np.asarray(B, dtype=float).reshape(-1, 2)
    if A.shape[0] == 0 or B.shape[0] == 0:
        raise ValueError("empty input set")
    di = (A[:, None, 0] - B[None, :, 0]) / params.lengthscale_space
    dk = (A[:, None, 1] - B[None, :, 1]) / params.lengthscale_time
    return params.signal_variance * np.exp(-0.5 * (di * di + dk * dk))


def jittered_cholesky(M: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``M``, adding diagonal jitter on failure.

    Returns the factor and the jitter that was added (0.0 if none).
    """
    M = np.asarray(M, dtype=float)
    try:
        return sla.cholesky(M, lower=True, check_finite=True), 0.0
    except (np.linalg.LinAlgError, sla.LinAlgError):
        pass
    except ValueError as exc:
        raise np.linalg.LinAlgError("matrix not positive definite") from exc
    scale = float(np.mean(np.diag(M)))
    if not scale > 0:
        raise np.linalg.LinAlgError("matrix not positive definite")
    jitter = JITTER_START * scale
    eye = np.eye(M.shape[0])
    while jitter <= JITTER_MAX * scale * (1 + 1e-12):
        try:
            return sla.cholesky(M + jitter * eye, lower=True), jitter
        except (np.linalg.LinAlgError, sla.LinAlgError):
            jitter *= 10.0
    raise np.linalg.LinAlgError("matrix not positive definite")


def jittered_cholesky_solve(M: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError("M must be square")
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape[0] != M.shape[0]:
        raise ValueError("rhs rows do not match M")
    L, _ = jittered_cholesky(M)
    return sla.cho_solve((L, True), rhs)


@dataclass(frozen=True)
class FittedDimension:
    """A GP conditioned on the observations of one output dimension."""

    kernel: KernelParams
    noise_precision: float
    prior_mean: float
    X: np.ndarray
    y: np.ndarray
    chol: np.ndarray
    alpha: np.ndarray

    @property
    def log_marginal_likelihood(self) -> float:
        r = self.y - self.prior_mean
        n = r.size
        return float(-0.5 * r @ self.alpha - np.log(np.diag(self.chol)).sum() - 0.5 * n * LOG_2PI)

    def mean(self, Xs) -> np.ndarray:
        Ks = kernel_matrix(self.kernel, self.X, Xs)
        return self.prior_mean + Ks.T @ self.alpha

    def predict(self, Xs) -> tuple[np.ndarray, np.ndarray]:
        Ks = kernel_matrix(self.kernel, self.X, Xs)
        mean = self.prior_mean + Ks.T @ self.alpha
        V = sla.solve_triangular(self.chol, Ks, lower=True)
        var = self.kernel.signal_variance - np.einsum("ij,ij->j", V, V)
        # cancellation can leave tiny negatives
        return mean, np.maximum(var, 0.0)

    def predict_cov(self, Xs) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and full covariance at ``Xs``."""
        Ks = kernel_matrix(self.kernel, self.X, Xs)
        V = sla.solve_triangular(self.chol, Ks, lower=True)
        cov = kernel_matrix(self.kernel, Xs, Xs) - V.T @ V
        return self.prior_mean + Ks.T @ self.alpha, 0.5 * (cov + cov.T)


def fit_dimension(kernel: KernelParams, noise_precision: float, prior_mean: float,
                  X: np.ndarray, y: np.ndarray) -> FittedDimension:
    X = np.asarray(X, dtype=float).reshape(-1, 2)
    y = np.asarray(y, dtype=float)
    K = kernel_matrix(kernel, X, X)
    K[np.diag_indices_from(K)] += 1.0 / noise_precision
    L, _ = jittered_cholesky(K)
    alpha = sla.cho_solve((L, True), y - prior_mean)
    return FittedDimension(kernel, float(noise_precision), float(prior_mean), X, y, L, alpha)


def condition(spec: GpSpec, data: Dataset, dim: int) -> FittedDimension:
    X, y = data.observed(dim)
    if y.size == 0:
        raise ValueError(f"unobserved dimension has no posterior ({DIM_NAMES[dim]})")
    return fit_dimension(spec.kernels[dim], spec.noise_precision[dim], spec.prior_mean[dim], X, y)


def gp_posterior(spec: GpSpec, data: Dataset, dim: int, Xs) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and variance of the noise-free function at ``Xs``."""
    return condition(spec, data, dim).predict(Xs)


def log_marginal_likelihood(spec: GpSpec, data: Dataset, dim: int) -> float:
    return condition(spec, data, dim).log_marginal_likelihood


def lml_gradient(kernel: KernelParams, noise_precision: float, prior_mean: float,
                 X, y) -> np.ndarray:
    """Analytic gradient of the log evidence with respect to (log signal
    variance, log space lengthscale, log time lengthscale, log noise precision).

    Uses d/dp = 0.5 a^T dK a - 0.5 tr(K^{-1} dK) with a = K^{-1}(y - m).  Kept
    as an independent check on the finite-difference gradients.
    """
    X = np.asarray(X, dtype=float).reshape(-1, 2)
    fit = fit_dimension(kernel, noise_precision, prior_mean, X, y)
    C = kernel_matrix(kernel, X, X)
    di = (X[:, None, 0] - X[None, :, 0]) ** 2 / kernel.lengthscale_space ** 2
    dk = (X[:, None, 1] - X[None, :, 1]) ** 2 / kernel.lengthscale_time ** 2
    Kinv = sla.cho_solve((fit.chol, True), np.eye(X.shape[0]))
    a = fit.alpha
    derivs = (C, C * di, C * dk, -np.eye(X.shape[0]) / noise_precision)
    return np.array([0.5 * a @ D @ a - 0.5 * np.sum(Kinv * D) for D in derivs])


# ---------------------------------------------------------------------------
# Structured solve for inputs on a complete segment x time grid
# ---------------------------------------------------------------------------


def _axis_kernel(coords: np.ndarray, lengthscale: float) -> np.ndarray:
    d = (coords[:, None] - coords[None, :]) / lengthscale
    return np.exp(-0.5 * d * d)


def axis_eigh(coords, lengthscale: float) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of the unit-variance 1-D kernel on ``coords``."""
    lam, Q = np.linalg.eigh(_axis_kernel(np.asarray(coords, dtype=float), lengthscale))
    return np.maximum(lam, 0.0), Q


def grid_axes(X: np.ndarray):
    """Sorted unique segments and times, plus the row order that arranges
    ``X`` segment-major on that grid; None when ``X`` is not a complete grid."""
    X = np.asarray(X).reshape(-1, 2)
    segs, times = np.unique(X[:, 0]), np.unique(X[:, 1])
    if segs.size * times.size != X.shape[0]:
        return None
    order = np.lexsort((X[:, 1], X[:, 0]))
    expected = np.stack(np.meshgrid(segs, times, indexing="ij"), axis=-1).reshape(-1, 2)
    if not np.array_equal(X[order], expected):
        return None
    return segs, times, order


@dataclass(frozen=True)
class GridFittedDimension:
    """Same interface as ``FittedDimension``, for training inputs forming a
    complete grid.  The covariance factorizes as a Kronecker product of the
    space and time kernels, so everything goes through two small eigensystems.
    """

    kernel: KernelParams
    noise_precision: float
    prior_mean: float
    X: np.ndarray           # original row order
    y: np.ndarray
    order: np.ndarray       # X[order] is segment-major
    eig_space: tuple
    eig_time: tuple
    alpha: np.ndarray       # K^{-1}(y - m) in original row order

    @property
    def _spectrum(self) -> np.ndarray:
        lam = np.outer(self.eig_space[0], self.eig_time[0])
        return self.kernel.signal_variance * lam + 1.0 / self.noise_precision

    def _rotate(self, G: np.ndarray, transpose: bool) -> np.ndarray:
        """(Qs kron Qt)^T vec(G) if ``transpose`` else (Qs kron Qt) vec(G), per trailing column."""
        Qs, Qt = self.eig_space[1], self.eig_time[1]
        if transpose:
            Qs, Qt = Qs.T, Qt.T
        tmp = np.tensordot(Qs, G, axes=(1, 0))
        return np.moveaxis(np.tensordot(Qt, tmp, axes=(1, 1)), 0, 1)

    def _solve_grid(self, R: np.ndarray) -> np.ndarray:
        """K^{-1} R for R with leading axes (segments, times)."""
        spec = self._spectrum
        spec = spec.reshape(spec.shape + (1,) * (R.ndim - 2))
        return self._rotate(self._rotate(R, True) / spec, False)

    def _to_grid(self, v: np.ndarray) -> np.ndarray:
        ns, nt = self.eig_space[0].size, self.eig_time[0].size
        return v[self.order].reshape((ns, nt) + v.shape[1:])

    def _from_grid(self, G: np.ndarray) -> np.ndarray:
        out = np.empty((G.shape[0] * G.shape[1],) + G.shape[2:])
        out[self.order] = G.reshape((-1,) + G.shape[2:])
        return out

    @property
    def log_marginal_likelihood(self) -> float:
        r = self.y - self.prior_mean
        return float(-0.5 * r @ self.alpha - 0.5 * np.log(self._spectrum).sum()
                     - 0.5 * r.size * LOG_2PI)

    def mean(self, Xs) -> np.ndarray:
        Ks = kernel_matrix(self.kernel, self.X, Xs)
        return self.prior_mean + Ks.T @ self.alpha

    def predict_cov(self, Xs) -> tuple[np.ndarray, np.ndarray]:
        Ks = kernel_matrix(self.kernel, self.X, Xs)
        W = self._from_grid(self._solve_grid(self._to_grid(Ks)))
        cov = kernel_matrix(self.kernel, Xs, Xs) - Ks.T @ W
        return self.prior_mean + Ks.T @ self.alpha, 0.5 * (cov + cov.T)

    def predict(self, Xs) -> tuple[np.ndarray, np.ndarray]:
        Ks = kernel_matrix(self.kernel, self.X, Xs)
        W = self._from_grid(self._solve_grid(self._to_grid(Ks)))
        var = self.kernel.signal_variance - np.einsum("ij,ij->j", Ks, W)
        return self.prior_mean + Ks.T @ self.alpha, np.maximum(var, 0.0)


def fit_dimension_grid(kernel: KernelParams, noise_precision: float, prior_mean: float,
                       X: np.ndarray, y: np.ndarray, axes=None, eig_space=None,
                       eig_time=None) -> GridFittedDimension:
    """Exact fit for grid-structured inputs; ``axes`` is ``grid_axes(X)``.

    Precomputed axis eigensystems may be passed in to skip the decompositions.
    """
    X = np.asarray(X, dtype=float).reshape(-1, 2)
    y = np.asarray(y, dtype=float)
    axes = grid_axes(X) if axes is None else axes
    if axes is None:
        raise ValueError("inputs do not form a complete grid")
    segs, times, order = axes
    eig_space = axis_eigh(segs, kernel.lengthscale_space) if eig_space is None else eig_space
    eig_time = axis_eigh(times, kernel.lengthscale_time) if eig_time is None else eig_time
    fit = GridFittedDimension(kernel, float(noise_precision), float(prior_mean), X, y, order,
                              eig_space, eig_time, np.empty(0))
    alpha = fit._from_grid(fit._solve_grid(fit._to_grid(y - prior_mean)))
    return replace(fit, alpha=alpha)
