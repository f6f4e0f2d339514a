"""Finite-difference gradients and an ADAM ascent direction."""

from __future__ import annotations

import numpy as np


class GradientError(RuntimeError):
    """Objective evaluation failed at a finite-difference probe."""

    def __init__(self, index: int, cause: BaseException):
        super().__init__(f"objective evaluation failed while probing coordinate {index}: {cause}")
        self.index = index


def fd_steps(theta: np.ndarray, rel_step: float = 1e-5) -> np.ndarray:
    return rel_step * np.maximum(np.abs(theta), 1.0)


def gradient_fd(objective, theta, coords=None, rel_step: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of ``objective`` at ``theta``.

    ``objective`` may return a scalar or a 1-D array; in the latter case the
    result has one column per coordinate (a Jacobian).  Coordinates not in
    ``coords`` get a zero derivative without being probed.  Probes run in
    fixed coordinate order so results are reproducible.
    """
    theta = np.asarray(theta, dtype=float)
    coords = range(theta.size) if coords is None else coords
    h = fd_steps(theta, rel_step)
    out = None
    for j in coords:
        probe = theta.copy()
        try:
            probe[j] = theta[j] + h[j]
            hi = np.asarray(objective(probe), dtype=float)
            probe[j] = theta[j] - h[j]
            lo = np.asarray(objective(probe), dtype=float)
        except Exception as exc:  # noqa: BLE001 - re-raised with the coordinate
            raise GradientError(j, exc) from exc
        if not (np.all(np.isfinite(hi)) and np.all(np.isfinite(lo))):
            raise GradientError(j, FloatingPointError("non-finite objective"))
        if out is None:
            out = np.zeros(hi.shape + theta.shape)
        out[..., j] = (hi - lo) / (2.0 * h[j])
    if out is None:
        out = np.zeros(np.shape(objective(theta)) + theta.shape)
    return out


class Adam:
    """ADAM moment estimates turning a gradient into an ascent direction.

    ``direction`` returns the bias-corrected ``m / (sqrt(v) + eps)``; the
    caller applies the step size.
    """

    def __init__(self, size: int, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def direction(self, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return m_hat / (np.sqrt(v_hat) + self.eps)
