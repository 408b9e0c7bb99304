"""Limit-law predictions and the empirical estimators that confront them.

Closed-form side: the mean system and Lyapunov covariance equation of the
scaled limit law k^(tau/2) (theta_k - theta*) -> N(mu, B), the bias vector
driving mu, the per-scheme covariance traces, and iteration/query
complexities.  Empirical side: rate fits of log RMS distance against log k
and scaled terminal covariances across replicates.

Rate-exponent indicators such as [alpha = 1] and [alpha = 6 gamma] are
evaluated exactly on rationals; pass ``Fraction`` (or strings like "1/6")
when an indicator is meant to fire, since float arithmetic may not hit the
equality.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .algorithms import BatchRunResult
from .core import RunRecord
from .hessian import shaping_factor
from .perturbation import PerturbationKind, PerturbationScheme
from .problems import StochasticProblem


class StabilityError(ValueError):
    """The mean-dynamics matrix is not stable for the requested scaling."""


def as_fraction(x) -> Fraction:
    """Exact rational value of an int, float, Fraction, or '1/6'-style string."""
    if isinstance(x, str):
        return Fraction(x)
    return Fraction(x)


@dataclass(frozen=True)
class AsymptoticsSpec:
    """Scaling exponents and limit matrices for one problem/schedule pair."""

    a: float
    c: float
    alpha: Fraction
    gamma: Fraction
    hessian_at_opt: np.ndarray
    sigma_matrix: np.ndarray
    var_at_opt: float

    @classmethod
    def build(cls, a, c, alpha, gamma, hessian_at_opt, sigma_matrix, var_at_opt):
        return cls(
            a=float(a),
            c=float(c),
            alpha=as_fraction(alpha),
            gamma=as_fraction(gamma),
            hessian_at_opt=np.asarray(hessian_at_opt, dtype=float),
            sigma_matrix=np.asarray(sigma_matrix, dtype=float),
            var_at_opt=float(var_at_opt),
        )

    @property
    def tau(self) -> float:
        return float(self.alpha - 2 * self.gamma)

    @property
    def tau_plus(self) -> float:
        return self.tau if self.alpha == 1 else 0.0

    @property
    def alpha_plus(self) -> float:
        return float(self.alpha) if self.alpha == 1 else 0.0

    @property
    def gamma_matrix(self) -> np.ndarray:
        return self.a * self.hessian_at_opt

    @property
    def stability_threshold(self) -> float:
        """Smallest admissible step numerator, tau_plus / (2 lambda_min)."""
        lam_min = float(np.linalg.eigvalsh(self.hessian_at_opt).min())
        if lam_min <= 0:
            raise StabilityError("curvature at the optimum must be positive definite")
        return self.tau_plus / (2.0 * lam_min)


@dataclass(frozen=True)
class AsymptoticsResult:
    """Limit mean, limit covariance, and the rate exponent they refer to."""

    mu: np.ndarray
    B: np.ndarray
    tau: float


def _check_square_symmetric(M: np.ndarray, what: str) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"{what} must be square")
    scale = max(1.0, float(np.abs(M).max()))
    if np.abs(M - M.T).max() > 1e-10 * scale:
        raise ValueError(f"{what} must be symmetric")
    return M


def solve_lyapunov(Gamma: np.ndarray, tau_plus: float, rhs: np.ndarray) -> np.ndarray:
    """Solve (Gamma - tau_plus I / 2) B + B (Gamma - tau_plus I / 2)^T = rhs.

    ``Gamma`` must be symmetric (curvature of a minimization problem times a
    positive scalar), so the equation diagonalizes in its eigenbasis and the
    solution is an elementwise quotient there.  Raises ``StabilityError``
    when some eigenvalue of the shifted matrix is not positive.
    """
    Gamma = _check_square_symmetric(Gamma, "Gamma")
    rhs = _check_square_symmetric(rhs, "right-hand side")
    A = Gamma - 0.5 * tau_plus * np.eye(Gamma.shape[0])
    lam, Q = np.linalg.eigh(A)
    if lam.min() <= 0:
        raise StabilityError(
            f"shifted mean-dynamics eigenvalue {lam.min():.6g} is not positive; "
            f"the step numerator must exceed tau_plus / (2 lambda_min)"
        )
    rhs_t = Q.T @ rhs @ Q
    B = Q @ (rhs_t / np.add.outer(lam, lam)) @ Q.T
    B = 0.5 * (B + B.T)
    rhs_norm = np.linalg.norm(rhs, 2)
    residual = np.linalg.norm(A @ B + B @ A.T - rhs, 2)
    if residual > 1e-10 * max(rhs_norm, 1e-300):
        raise RuntimeError(f"Lyapunov residual {residual:.3e} exceeds tolerance")
    return B


def asymptotic_mean(Gamma: np.ndarray, tau_plus: float, t: np.ndarray) -> np.ndarray:
    """Solve (Gamma - tau_plus I / 2) mu = t for the limit mean."""
    Gamma = _check_square_symmetric(Gamma, "Gamma")
    t = np.asarray(t, dtype=float)
    A = Gamma - 0.5 * tau_plus * np.eye(Gamma.shape[0])
    try:
        mu = np.linalg.solve(A, t)
    except np.linalg.LinAlgError as err:
        raise StabilityError(f"mean system is singular: {err}") from err
    if np.linalg.norm(A @ mu - t) > 1e-12 * max(1.0, np.linalg.norm(t)):
        raise RuntimeError("mean system solved to insufficient accuracy")
    return mu


@dataclass(frozen=True)
class BiasVectorEstimate:
    """Monte-Carlo value of the limit bias vector with its standard error."""

    value: np.ndarray
    standard_error: np.ndarray
    n_samples: int
    indicator_active: bool


def compute_bias_vector(
    problem: StochasticProblem,
    sigma_matrix: np.ndarray,
    a: float,
    c: float,
    alpha,
    gamma,
    n_samples: int,
    rng: np.random.Generator,
    scheme: PerturbationScheme | None = None,
) -> BiasVectorEstimate:
    """Monte-Carlo estimate of the bias vector feeding the mean system.

    The vector is -(a c^2 / 6) [alpha = 6 gamma] E[s(delta) m(delta)] where
    s applies the third derivative of the loss at the optimum to
    (delta, delta, delta) and delta has zero mean and covariance
    sigma_matrix^-1.  The default sampling scheme is the shaped Gaussian;
    the indicator is checked exactly on rationals, so the vector is
    identically zero whenever alpha != 6 gamma.
    """
    if problem.third_action is None:
        raise ValueError("bias vector requires an analytic third derivative")
    d = problem.dimension
    active = as_fraction(alpha) == 6 * as_fraction(gamma)
    if not active:
        zero = np.zeros(d)
        return BiasVectorEstimate(zero, zero.copy(), 0, indicator_active=False)
    if scheme is None:
        sigma_matrix = _check_square_symmetric(sigma_matrix, "sigma_matrix")
        scheme = PerturbationScheme.shaped(shaping_factor(sigma_matrix), sigma_matrix)
    star = problem.theta_star
    total = np.zeros(d)
    total_sq = np.zeros(d)
    chunk = 65536
    done = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        deltas, mapped = scheme.draw_batch(m, rng)
        for i in range(m):
            u = deltas[i]
            sample = problem.third_action(star, u, u, u) * mapped[i]
            total += sample
            total_sq += sample * sample
        done += m
    mean = total / n_samples
    var = np.maximum(total_sq / n_samples - mean**2, 0.0)
    scale = a * c**2 / 6.0
    return BiasVectorEstimate(
        value=-scale * mean,
        standard_error=scale * np.sqrt(var / n_samples),
        n_samples=n_samples,
        indicator_active=True,
    )


def iid_covariance_rhs(
    a: float, c: float, var_at_opt: float, sigma_matrix: np.ndarray
) -> np.ndarray:
    """Right-hand side of the covariance equation under independent noise."""
    if not c > 0:
        raise ValueError("differencing numerator must be positive")
    if var_at_opt < 0:
        raise ValueError("noise variance must be nonnegative")
    return (a**2 * var_at_opt / (2.0 * c**2)) * np.asarray(sigma_matrix, dtype=float)


@dataclass(frozen=True)
class CrnMomentEstimate:
    """Monte-Carlo estimate of the pathwise-gradient moment matrix.

    Diagonal entries hold the full squared norm E||grad ell(theta*, w)||^2
    (every diagonal entry is the same expectation); off-diagonal entries hold
    the cross moments E[grad_i grad_j].
    """

    matrix: np.ndarray
    standard_error: np.ndarray
    n_samples: int


def crn_covariance_rhs(
    problem: StochasticProblem, n_samples: int, rng: np.random.Generator
) -> CrnMomentEstimate:
    """Estimate the CRN moment matrix by sampling pathwise gradients."""
    if problem.noisy_gradient is None:
        raise ValueError("CRN moment matrix requires a pathwise-gradient sampler")
    d = problem.dimension
    star = problem.theta_star
    S = np.zeros((d, d))
    S2 = np.zeros((d, d))
    q_sum = 0.0
    q_sq = 0.0
    for _ in range(n_samples):
        g = problem.noisy_gradient(star, problem.new_handle(rng))
        outer = np.outer(g, g)
        S += outer
        S2 += outer * outer
        q = float(g @ g)
        q_sum += q
        q_sq += q * q
    S /= n_samples
    S2 /= n_samples
    mean_q = q_sum / n_samples
    var_q = max(q_sq / n_samples - mean_q**2, 0.0)
    matrix = S.copy()
    np.fill_diagonal(matrix, mean_q)
    stderr = np.sqrt(np.maximum(S2 - S * S, 0.0) / n_samples)
    np.fill_diagonal(stderr, np.sqrt(var_q / n_samples))
    return CrnMomentEstimate(matrix=matrix, standard_error=stderr, n_samples=n_samples)


def _check_trace_inputs(a, c, var, eigenvalues):
    eigenvalues = np.asarray(eigenvalues, dtype=float)
    if not (a > 0 and c > 0):
        raise ValueError("a and c must be positive")
    if var < 0:
        raise ValueError("noise variance must be nonnegative")
    if eigenvalues.min() <= 0:
        raise StabilityError("curvature eigenvalues must be positive")
    return eigenvalues


def trace_identity_cov(
    a: float, c: float, var_at_opt: float, tau_plus: float, eigenvalues
) -> float:
    """Covariance trace for unit-covariance perturbations.

    (a^2 var / 2 c^2) * sum_i 1 / (2 a lam_i - tau_plus).
    """
    lam = _check_trace_inputs(a, c, var_at_opt, eigenvalues)
    denom = 2.0 * a * lam - tau_plus
    if denom.min() <= 0:
        raise StabilityError(
            f"2 a lambda - tau_plus = {denom.min():.6g} <= 0; "
            f"need a > {tau_plus / (2 * lam.min()):.6g}"
        )
    return float(a**2 * var_at_opt / (2.0 * c**2) * np.sum(1.0 / denom))


def trace_harp_cov(
    a: float, c: float, var_at_opt: float, tau_plus: float, eigenvalues
) -> float:
    """Covariance trace when the perturbation covariance tracks the curvature.

    (a^2 var / 2 c^2) * sum_i 1 / (2 a - tau_plus / lam_i).
    """
    lam = _check_trace_inputs(a, c, var_at_opt, eigenvalues)
    denom = 2.0 * a - tau_plus / lam
    if denom.min() <= 0:
        raise StabilityError(
            f"2 a - tau_plus / lambda = {denom.min():.6g} <= 0; "
            f"need a > {tau_plus / (2 * lam.min()):.6g}"
        )
    return float(a**2 * var_at_opt / (2.0 * c**2) * np.sum(1.0 / denom))


def trace_comparison(
    a: float, c: float, var_at_opt: float, tau_plus: float, eigenvalues
) -> tuple[float, float]:
    """Return (identity trace, curvature-shaped trace) for one spectrum."""
    return (
        trace_identity_cov(a, c, var_at_opt, tau_plus, eigenvalues),
        trace_harp_cov(a, c, var_at_opt, tau_plus, eigenvalues),
    )


def complexity(
    eps: float, tau_star: float, mu: np.ndarray, B: np.ndarray, q: int
) -> tuple[float, float]:
    """Average iteration and query counts to reach RMS accuracy ``eps``.

    iterations = ((||mu||^2 + tr(B)) / eps)^(2 / tau_star) and
    queries = 2 q ((||mu||^2 + tr(B / q)) / eps)^(2 / tau_star).
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    if not tau_star > 0:
        raise ValueError("tau_star must be positive")
    mu = np.asarray(mu, dtype=float)
    B = np.asarray(B, dtype=float)
    mu_sq = float(mu @ mu)
    iterations = ((mu_sq + float(np.trace(B))) / eps) ** (2.0 / tau_star)
    queries = 2.0 * q * ((mu_sq + float(np.trace(B)) / q) / eps) ** (2.0 / tau_star)
    return iterations, queries


@dataclass(frozen=True)
class RateFit:
    """Least-squares slope of log RMS distance against log iteration."""

    slope: float
    standard_error: float
    n_points: int


def _distance_table(records) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(records, BatchRunResult):
        return records.record_iterations, records.distances
    records = list(records)
    ks = records[0].iteration
    for r in records:
        if not np.array_equal(r.iteration, ks):
            raise ValueError("records must share one iteration grid")
    return ks, np.stack([r.distance for r in records])


def empirical_rate(records, window: tuple[int, int]) -> RateFit:
    """Fit the decay exponent of the cross-replicate RMS distance.

    ``records`` is a sequence of run records on a common iteration grid (or
    one batch result); the fit runs over grid points with
    window[0] <= k <= window[1], k >= 1.
    """
    ks, dist = _distance_table(records)
    if dist.shape[0] < 2:
        raise ValueError("rate fit needs at least 2 replicates")
    lo, hi = window
    if lo < 1 or hi <= lo:
        raise ValueError(f"window must satisfy 1 <= lo < hi, got {window}")
    mask = (ks >= lo) & (ks <= hi)
    if mask.sum() < 3:
        raise ValueError("window selects fewer than 3 grid points")
    rms = np.sqrt(np.mean(dist[:, mask] ** 2, axis=0))
    if not np.all(np.isfinite(rms)) or np.any(rms <= 0):
        raise ValueError("RMS distances must be positive and finite in the window")
    x = np.log(ks[mask].astype(float))
    y = np.log(rms)
    x_c = x - x.mean()
    sxx = float(x_c @ x_c)
    slope = float(x_c @ y) / sxx
    resid = y - y.mean() - slope * x_c
    dof = len(x) - 2
    stderr = float(np.sqrt((resid @ resid) / dof / sxx)) if dof > 0 else 0.0
    return RateFit(slope=slope, standard_error=stderr, n_points=int(mask.sum()))


def empirical_scaled_covariance(
    terminal_thetas: np.ndarray,
    theta_star: np.ndarray,
    iterations: int,
    tau: float,
) -> np.ndarray:
    """Sample covariance of K^(tau/2) (terminal - theta*) across replicates."""
    T = np.asarray(terminal_thetas, dtype=float)
    if T.ndim != 2 or T.shape[0] < 100:
        raise ValueError("scaled covariance needs at least 100 replicates")
    scaled = iterations ** (tau / 2.0) * (T - np.asarray(theta_star, dtype=float))
    cov = np.cov(scaled, rowvar=False, ddof=1)
    cov = np.atleast_2d(cov)
    return 0.5 * (cov + cov.T)
