"""Moving-average curvature tracking and positive-definite regularization."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import GainSchedule, make_gains
from .estimators import HessianSample

logger = logging.getLogger(__name__)

DEFAULT_CONDITION_CEILING = 1e8


class ShapingError(RuntimeError):
    """Both factorization routes failed to meet the reconstruction tolerance."""


def update_moving_average(hbar: np.ndarray, sample: np.ndarray, w: float) -> np.ndarray:
    """Convex combination (1 - w) * hbar + w * sample."""
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"weight must lie in [0, 1], got {w}")
    return (1.0 - w) * hbar + w * sample


def regularize(
    hbar: np.ndarray,
    eps: float,
    condition_ceiling: float = DEFAULT_CONDITION_CEILING,
) -> np.ndarray:
    """Map a symmetric matrix to the PD square root of (hbar^T hbar + eps I).

    In the eigenbasis of hbar the result has eigenvalues sqrt(lam_i^2 + eps),
    so the output is symmetric positive definite with smallest eigenvalue at
    least sqrt(eps).  Eigenvalues below max / condition_ceiling are lifted to
    keep the downstream triangular factorization stable; that guard is logged
    because it acts only outside the intended operating regime.
    """
    if not eps > 0:
        raise ValueError("regularization weight must be positive")
    lam, Q = np.linalg.eigh(hbar)
    vals = np.sqrt(lam**2 + eps)
    floor = vals.max() / condition_ceiling
    if vals.min() < floor:
        logger.warning(
            "condition ceiling engaged: lifting eigenvalues below %.3e", floor
        )
        vals = np.maximum(vals, floor)
    hhat = (Q * vals) @ Q.T
    return 0.5 * (hhat + hhat.T)


def shaping_factor(hhat: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    """Factor C with C C^T = hhat^-1, for covariance-shaped sampling.

    Tries the triangular (Cholesky-of-inverse) route first and falls back to
    the eigendecomposition square root; either result must reconstruct the
    identity, ||C C^T hhat - I|| <= tol in spectral norm.
    """
    identity = np.eye(hhat.shape[0])

    def residual(C):
        return float(np.linalg.norm(C @ C.T @ hhat - identity, 2))

    try:
        inv = np.linalg.inv(hhat)
        C = np.linalg.cholesky(0.5 * (inv + inv.T))
        if residual(C) <= tol:
            return C
    except np.linalg.LinAlgError:
        pass
    lam, Q = np.linalg.eigh(hhat)
    if lam.min() <= 0:
        raise ShapingError("shaping requires a positive definite matrix")
    C = (Q / np.sqrt(lam)) @ Q.T
    r = residual(C)
    if r > tol:
        raise ShapingError(f"factor reconstruction residual {r:.3e} exceeds {tol:.1e}")
    return C


@dataclass
class HessianTracker:
    """The pair (moving average, regularized estimate) plus its shaping factor.

    Both matrices start at the identity.  ``step`` folds one curvature sample
    into the moving average with the schedule's weight at the current
    iteration, re-regularizes with the next iteration's weight, and refreshes
    the sampling factor.
    """

    dimension: int
    schedule: GainSchedule
    condition_ceiling: float = DEFAULT_CONDITION_CEILING
    hbar: np.ndarray = field(init=False)
    hhat: np.ndarray = field(init=False)
    factor: np.ndarray = field(init=False)
    iteration: int = field(init=False, default=0)

    def __post_init__(self):
        self.hbar = np.eye(self.dimension)
        self.hhat = np.eye(self.dimension)
        self.factor = np.eye(self.dimension)

    def step(self, sample: HessianSample) -> None:
        gains = make_gains(self.schedule, self.iteration)
        self.hbar = update_moving_average(self.hbar, sample.matrix, gains.w)
        eps_next = make_gains(self.schedule, self.iteration + 1).eps
        self.hhat = regularize(self.hbar, eps_next, self.condition_ceiling)
        self.factor = shaping_factor(self.hhat)
        self.iteration += 1
