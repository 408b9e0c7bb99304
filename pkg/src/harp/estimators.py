"""Two-query gradient estimates, four-query curvature samples, diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import DivergenceError
from .perturbation import PerturbationDraw, PerturbationScheme
from .problems import NoiseHandle, StochasticProblem


@dataclass(frozen=True)
class GradientEstimate:
    """Central-difference gradient estimate from one perturbation pair."""

    ghat: np.ndarray
    loss_plus: float
    loss_minus: float
    queries_used: int = 2


@dataclass(frozen=True)
class HessianSample:
    """Rank-two symmetric curvature sample from one extra perturbation.

    ``queries_used`` counts only the two new queries; the two gradient-phase
    losses are reused, so a full iteration costs four queries.
    """

    matrix: np.ndarray
    lbar: float
    queries_used: int = 2


@dataclass(frozen=True)
class BiasNoiseDiagnostic:
    """Monte-Carlo decomposition of a gradient estimator at a fixed point."""

    bias_estimate: np.ndarray
    noise_second_moment: float
    n_samples: int


def _require_finite(value: float, what: str, iteration: int | None = None) -> float:
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite {what}: {value!r}", iteration=iteration)
    return value


def estimate_gradient(
    problem: StochasticProblem,
    theta: np.ndarray,
    c: float,
    draw: PerturbationDraw,
    handle: NoiseHandle,
    rng: np.random.Generator,
) -> GradientEstimate:
    """Estimate the gradient from two queries at theta +- c * delta."""
    if not c > 0:
        raise ValueError("differencing magnitude must be positive")
    step = c * draw.delta
    loss_plus = _require_finite(problem.noisy_query(theta + step, handle, rng), "loss")
    loss_minus = _require_finite(problem.noisy_query(theta - step, handle, rng), "loss")
    ghat = ((loss_plus - loss_minus) / (2.0 * c)) * draw.mapped
    return GradientEstimate(ghat=ghat, loss_plus=loss_plus, loss_minus=loss_minus)


def sample_hessian(
    problem: StochasticProblem,
    theta: np.ndarray,
    c: float,
    ctilde: float,
    draw: PerturbationDraw,
    draw_tilde: PerturbationDraw,
    handle: NoiseHandle,
    rng: np.random.Generator,
    loss_plus: float,
    loss_minus: float,
) -> HessianSample:
    """Form the symmetric curvature sample from two additional queries.

    ``loss_plus`` and ``loss_minus`` are the gradient-phase observations at
    theta +- c * delta; the two new queries perturb those points by
    ctilde * delta_tilde, and the four values combine into a second
    difference that annihilates affine losses.
    """
    if not (c > 0 and ctilde > 0):
        raise ValueError("differencing magnitudes must be positive")
    step = c * draw.delta
    tilt = ctilde * draw_tilde.delta
    loss_pp = _require_finite(problem.noisy_query(theta + step + tilt, handle, rng), "loss")
    loss_mp = _require_finite(problem.noisy_query(theta - step + tilt, handle, rng), "loss")
    lbar = loss_pp - loss_plus - loss_mp + loss_minus
    outer = np.outer(draw_tilde.mapped, draw.mapped)
    matrix = (outer + outer.T) * (lbar / (4.0 * c * ctilde))
    return HessianSample(matrix=matrix, lbar=lbar)


def diagnose_bias_noise(
    problem: StochasticProblem,
    theta: np.ndarray,
    c: float,
    scheme: PerturbationScheme,
    n_samples: int,
    rng: np.random.Generator,
) -> BiasNoiseDiagnostic:
    """Measure estimator bias and noise second moment at a fixed point.

    Draws ``n_samples`` independent gradient estimates (fresh perturbation
    and fresh noise handle each), then reports mean(ghat) - g(theta) and the
    centered second moment mean ||ghat - mean(ghat)||^2.
    """
    if problem.gradient is None:
        raise ValueError("bias diagnostic requires an analytic gradient")
    if n_samples < 1000:
        raise ValueError("diagnostic needs at least 1000 samples")
    theta = np.asarray(theta, dtype=float)
    total = np.zeros(problem.dimension)
    total_sq = 0.0
    for _ in range(n_samples):
        draw = scheme.draw(rng)
        handle = problem.new_handle(rng)
        est = estimate_gradient(problem, theta, c, draw, handle, rng)
        total += est.ghat
        total_sq += float(est.ghat @ est.ghat)
    mean = total / n_samples
    second_moment = max(total_sq / n_samples - float(mean @ mean), 0.0)
    return BiasNoiseDiagnostic(
        bias_estimate=mean - problem.gradient(theta),
        noise_second_moment=second_moment,
        n_samples=n_samples,
    )
