"""Stochastic problem oracles: true losses, noisy queries, analytic derivatives.

A problem owns its noise semantics.  Under CRN every query issued with one
NoiseHandle sees the same noise realization; under IID each query draws
fresh noise and the handle is inert.  Problems with closed-form losses also
expose batch oracles operating on (n, d) arrays for vectorized replicate
studies.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np
import scipy.optimize

from .core import NoiseMode


@dataclass
class NoiseHandle:
    """Opaque token binding the queries of one iteration to one realization.

    ``omega`` is None under IID (fresh noise per query) and holds the shared
    realization under CRN.
    """

    omega: Any = None


@dataclass
class StochasticProblem:
    """A noisy zeroth-order oracle plus optional analytic ground truth."""

    name: str
    dimension: int
    noise_mode: NoiseMode
    theta_star: np.ndarray
    true_loss: Callable[[np.ndarray], float]
    _query: Callable[[np.ndarray, NoiseHandle, np.random.Generator], float]
    _make_handle: Callable[[np.random.Generator], NoiseHandle]
    gradient: Callable[[np.ndarray], np.ndarray] | None = None
    hessian: Callable[[np.ndarray], np.ndarray] | None = None
    third_action: Callable[..., float] | None = None
    noise_variance_at_optimum: float | None = None
    # CRN extras: sampler for the pathwise gradient d ell / d theta and the
    # matrix with E||grad ell(theta*, omega)||^2 on the diagonal and the
    # cross-moments E[grad_i grad_j] off it (when known in closed form).
    noisy_gradient: Callable[[np.ndarray, NoiseHandle], np.ndarray] | None = None
    crn_gradient_moments: np.ndarray | None = None
    # optional decomposition of the loss into named terms (finite-sum:
    # regularizer magnitude and mean component value)
    loss_terms: Callable[[np.ndarray], dict[str, float]] | None = None
    # optional batch oracles on (n, d) arrays
    batch_true_loss: Callable[[np.ndarray], np.ndarray] | None = None
    _batch_query: Callable | None = None
    _batch_make_handle: Callable | None = None

    def new_handle(self, rng: np.random.Generator) -> NoiseHandle:
        return self._make_handle(rng)

    def noisy_query(
        self, theta: np.ndarray, handle: NoiseHandle, rng: np.random.Generator
    ) -> float:
        return self._query(theta, handle, rng)

    @property
    def supports_batch(self) -> bool:
        return self._batch_query is not None

    def new_batch_handle(self, n: int, rng: np.random.Generator) -> NoiseHandle:
        return self._batch_make_handle(n, rng)

    def batch_noisy_query(
        self, thetas: np.ndarray, handle: NoiseHandle, rng: np.random.Generator
    ) -> np.ndarray:
        return self._batch_query(thetas, handle, rng)

    def hessian_at_optimum(self) -> np.ndarray:
        if self.hessian is None:
            raise ValueError(f"problem {self.name!r} has no analytic Hessian")
        return self.hessian(self.theta_star)


def _check_spd(H: np.ndarray) -> np.ndarray:
    H = np.asarray(H, dtype=float)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise ValueError("Hessian must be a square matrix")
    if not np.allclose(H, H.T, rtol=0, atol=1e-12):
        raise ValueError("Hessian must be symmetric")
    if np.linalg.eigvalsh(H).min() <= 0:
        raise ValueError("Hessian must be positive definite")
    return H


def make_quadratic(
    H: np.ndarray,
    noise_mode: NoiseMode = NoiseMode.IID,
    sigma: float = 0.0,
    noise_law: str | None = None,
) -> StochasticProblem:
    """Quadratic bowl L(theta) = theta^T H theta / 2 with optimum at zero.

    Noise laws:
      * ``offset``: ell(theta, omega) = L(theta) + omega with scalar
        omega ~ N(0, sigma^2).  Under CRN the offset is shared per handle and
        cancels exactly in central differences.
      * ``linear``: ell(theta, omega) = L(theta) + omega^T theta with
        omega ~ N(0, sigma^2 I), so the pathwise gradient is
        H theta + omega.  CRN only; this is the oracle whose limiting
        covariance is known in closed form.

    Defaults: ``offset`` under IID, ``linear`` under CRN.
    """
    H = _check_spd(H)
    d = H.shape[0]
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if noise_law is None:
        noise_law = "linear" if noise_mode is NoiseMode.CRN else "offset"
    if noise_law not in ("offset", "linear"):
        raise ValueError(f"unknown noise law {noise_law!r}")
    if noise_law == "linear" and noise_mode is not NoiseMode.CRN:
        raise ValueError("the linear noise law is defined for CRN mode only")

    def true_loss(theta):
        return 0.5 * float(theta @ H @ theta)

    def batch_true_loss(thetas):
        return 0.5 * np.einsum("ij,jk,ik->i", thetas, H, thetas)

    crn = noise_mode is NoiseMode.CRN
    if noise_law == "offset":

        def make_handle(rng):
            return NoiseHandle(omega=sigma * rng.standard_normal() if crn else None)

        def query(theta, handle, rng):
            eps = handle.omega if crn else sigma * rng.standard_normal()
            return true_loss(theta) + eps

        def batch_make_handle(n, rng):
            return NoiseHandle(omega=sigma * rng.standard_normal(n) if crn else None)

        def batch_query(thetas, handle, rng):
            n = thetas.shape[0]
            eps = handle.omega if crn else sigma * rng.standard_normal(n)
            return batch_true_loss(thetas) + eps

        noisy_gradient = (lambda theta, handle: H @ theta) if crn else None
        moments = np.zeros((d, d)) if crn else None
    else:  # linear, CRN

        def make_handle(rng):
            return NoiseHandle(omega=sigma * rng.standard_normal(d))

        def query(theta, handle, rng):
            return true_loss(theta) + float(handle.omega @ theta)

        def batch_make_handle(n, rng):
            return NoiseHandle(omega=sigma * rng.standard_normal((n, d)))

        def batch_query(thetas, handle, rng):
            return batch_true_loss(thetas) + np.einsum("ij,ij->i", handle.omega, thetas)

        def noisy_gradient(theta, handle):
            return H @ theta + handle.omega

        # at the optimum the pathwise gradient is omega itself
        moments = d * sigma**2 * np.eye(d)

    # Var[ell(theta*, omega)]: sigma^2 for the offset law, 0 for the linear
    # law (the noise term vanishes at theta* = 0).
    var_at_opt = sigma**2 if noise_law == "offset" else 0.0

    return StochasticProblem(
        name="quadratic",
        dimension=d,
        noise_mode=noise_mode,
        theta_star=np.zeros(d),
        true_loss=true_loss,
        _query=query,
        _make_handle=make_handle,
        gradient=lambda theta: H @ theta,
        hessian=lambda theta: H.copy(),
        third_action=lambda theta, u, v, w: 0.0,
        noise_variance_at_optimum=var_at_opt,
        noisy_gradient=noisy_gradient,
        crn_gradient_moments=moments,
        batch_true_loss=batch_true_loss,
        _batch_query=batch_query,
        _batch_make_handle=batch_make_handle,
    )


def skew_matrix(dimension: int) -> np.ndarray:
    """Upper-triangular matrix of ones divided by the dimension."""
    return np.triu(np.ones((dimension, dimension))) / dimension


def skew_quartic(theta: np.ndarray, B: np.ndarray | None = None) -> float | np.ndarray:
    """Skewed quartic loss with one dominant Hessian eigenvalue.

    L(theta) = theta^T B^T B theta + 0.1 sum (B theta)_i^3
             + 0.01 sum (B theta)_i^4.

    Accepts a single vector or an (n, d) batch.
    """
    theta = np.asarray(theta, dtype=float)
    if B is None:
        B = skew_matrix(theta.shape[-1])
    y = theta @ B.T
    val = np.sum(y**2 + 0.1 * y**3 + 0.01 * y**4, axis=-1)
    return float(val) if theta.ndim == 1 else val


def skew_quartic_gradient(theta: np.ndarray, B: np.ndarray | None = None) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if B is None:
        B = skew_matrix(theta.shape[-1])
    y = B @ theta
    return B.T @ (2.0 * y + 0.3 * y**2 + 0.04 * y**3)


def skew_quartic_hessian(theta: np.ndarray, B: np.ndarray | None = None) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if B is None:
        B = skew_matrix(theta.shape[-1])
    y = B @ theta
    return B.T @ ((2.0 + 0.6 * y + 0.12 * y**2)[:, None] * B)


def skew_quartic_third_action(
    theta: np.ndarray,
    u: np.ndarray,
    v: np.ndarray,
    w: np.ndarray,
    B: np.ndarray | None = None,
) -> float:
    """Third derivative of the skewed quartic applied to (u, v, w)."""
    theta = np.asarray(theta, dtype=float)
    if B is None:
        B = skew_matrix(theta.shape[-1])
    y = B @ theta
    return float(np.sum((0.6 + 0.24 * y) * (B @ u) * (B @ v) * (B @ w)))


def make_skew_quartic(
    dimension: int,
    noise_mode: NoiseMode = NoiseMode.IID,
    sigma: float = 0.0,
) -> StochasticProblem:
    """Skewed quartic with additive N(0, sigma^2) observation noise."""
    if dimension < 1:
        raise ValueError("dimension must be >= 1")
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    B = skew_matrix(dimension)
    crn = noise_mode is NoiseMode.CRN

    def true_loss(theta):
        return skew_quartic(theta, B)

    def make_handle(rng):
        return NoiseHandle(omega=sigma * rng.standard_normal() if crn else None)

    def query(theta, handle, rng):
        eps = handle.omega if crn else sigma * rng.standard_normal()
        return skew_quartic(theta, B) + eps

    def batch_make_handle(n, rng):
        return NoiseHandle(omega=sigma * rng.standard_normal(n) if crn else None)

    def batch_query(thetas, handle, rng):
        eps = handle.omega if crn else sigma * rng.standard_normal(thetas.shape[0])
        return skew_quartic(thetas, B) + eps

    return StochasticProblem(
        name="skew_quartic",
        dimension=dimension,
        noise_mode=noise_mode,
        theta_star=np.zeros(dimension),
        true_loss=true_loss,
        _query=query,
        _make_handle=make_handle,
        gradient=lambda theta: skew_quartic_gradient(theta, B),
        hessian=lambda theta: skew_quartic_hessian(theta, B),
        third_action=lambda theta, u, v, w: skew_quartic_third_action(theta, u, v, w, B),
        noise_variance_at_optimum=sigma**2,
        noisy_gradient=(lambda theta, handle: skew_quartic_gradient(theta, B)) if crn else None,
        crn_gradient_moments=np.zeros((dimension, dimension)) if crn else None,
        batch_true_loss=lambda thetas: skew_quartic(thetas, B),
        _batch_query=batch_query,
        _batch_make_handle=batch_make_handle,
    )


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(frozen=True)
class ComponentSet:
    """Smooth per-item losses for the finite-sum problem.

    Item i contributes
        loss_i(theta) = (theta - center_i)^T A (theta - center_i) / 2
                        + soft_weight * log(1 + exp(slope_i^T theta + offset_i))
    with a shared curvature matrix A.
    """

    curvature: np.ndarray  # (d, d) symmetric PSD, shared
    centers: np.ndarray  # (I, d)
    slopes: np.ndarray  # (I, d)
    offsets: np.ndarray  # (I,)
    soft_weight: float = 1.0

    @property
    def count(self) -> int:
        return self.centers.shape[0]

    @property
    def dimension(self) -> int:
        return self.centers.shape[1]

    def member_values(self, theta: np.ndarray, index: np.ndarray) -> np.ndarray:
        diff = theta[None, :] - self.centers[index]
        quad = 0.5 * np.einsum("ij,jk,ik->i", diff, self.curvature, diff)
        soft = np.logaddexp(0.0, self.slopes[index] @ theta + self.offsets[index])
        return quad + self.soft_weight * soft

    def mean_value(self, theta: np.ndarray) -> float:
        return float(np.mean(self.member_values(theta, np.arange(self.count))))

    def mean_gradient(self, theta: np.ndarray) -> np.ndarray:
        diff = theta[None, :] - self.centers
        x = self.slopes @ theta + self.offsets
        grad = diff @ self.curvature + self.soft_weight * _sigmoid(x)[:, None] * self.slopes
        return grad.mean(axis=0)

    def mean_hessian(self, theta: np.ndarray) -> np.ndarray:
        x = self.slopes @ theta + self.offsets
        s = _sigmoid(x)
        soft = (self.soft_weight * s * (1.0 - s) / self.count) * self.slopes.T @ self.slopes
        return self.curvature + soft

    def mean_third_action(self, theta, u, v, w) -> float:
        x = self.slopes @ theta + self.offsets
        s = _sigmoid(x)
        coeff = self.soft_weight * s * (1.0 - s) * (1.0 - 2.0 * s)
        return float(
            np.mean(coeff * (self.slopes @ u) * (self.slopes @ v) * (self.slopes @ w))
        )


def make_synthetic_components(
    n_components: int,
    dimension: int,
    rng: np.random.Generator,
    quad_scale: float = 4.0,
    center_spread: float = 2.0,
    soft_weight: float = 1.0,
) -> ComponentSet:
    """Randomized smooth components with a shared ill-conditioned curvature.

    The shared curvature reuses the skewed-quartic structure (one dominant
    eigenvalue, many near-zero ones) so subsampled queries exercise both
    finite-sum noise and poor conditioning.
    """
    B = skew_matrix(dimension)
    curvature = quad_scale * 2.0 * B.T @ B
    centers = center_spread * rng.standard_normal((n_components, dimension))
    slopes = rng.standard_normal((n_components, dimension)) / np.sqrt(dimension)
    offsets = rng.standard_normal(n_components)
    return ComponentSet(
        curvature=curvature,
        centers=centers,
        slopes=slopes,
        offsets=offsets,
        soft_weight=soft_weight,
    )


def make_finite_sum(
    components: ComponentSet,
    batch_size: int,
    kappa: float,
    noise_mode: NoiseMode = NoiseMode.IID,
) -> StochasticProblem:
    """Regularized finite-sum problem with subsampling noise.

    L(theta) = kappa ||theta||^2 + mean_i loss_i(theta).  A noisy query
    averages ``batch_size`` components drawn uniformly without replacement;
    a full batch reproduces L exactly.  The optimum is located numerically
    at construction time.
    """
    I = components.count
    d = components.dimension
    if not 1 <= batch_size <= I:
        raise ValueError(f"batch size must lie in [1, {I}], got {batch_size}")
    if kappa < 0:
        raise ValueError("kappa must be nonnegative")
    crn = noise_mode is NoiseMode.CRN
    full = np.arange(I)

    def true_loss(theta):
        return kappa * float(theta @ theta) + components.mean_value(theta)

    def gradient(theta):
        return 2.0 * kappa * theta + components.mean_gradient(theta)

    def hessian(theta):
        return 2.0 * kappa * np.eye(d) + components.mean_hessian(theta)

    res = scipy.optimize.minimize(
        true_loss, np.zeros(d), jac=gradient, method="BFGS", options={"gtol": 1e-12}
    )
    theta_star = res.x

    def pick(rng):
        if batch_size == I:
            return full
        return rng.choice(I, size=batch_size, replace=False)

    def make_handle(rng):
        return NoiseHandle(omega=pick(rng) if crn else None)

    def query(theta, handle, rng):
        index = handle.omega if crn else pick(rng)
        return kappa * float(theta @ theta) + float(
            components.member_values(theta, index).mean()
        )

    # variance of a without-replacement sample mean of the member values
    values = components.member_values(theta_star, full)
    pop_var = float(np.var(values))
    var_at_opt = 0.0 if I == 1 else pop_var / batch_size * (I - batch_size) / (I - 1)

    def loss_terms(theta):
        return {
            "magnitude": kappa * float(theta @ theta),
            "component": components.mean_value(theta),
        }

    return StochasticProblem(
        name="finite_sum",
        dimension=d,
        noise_mode=noise_mode,
        theta_star=theta_star,
        true_loss=true_loss,
        _query=query,
        _make_handle=make_handle,
        gradient=gradient,
        hessian=hessian,
        third_action=components.mean_third_action,
        noise_variance_at_optimum=var_at_opt,
        loss_terms=loss_terms,
    )


@dataclass(frozen=True)
class ProblemSpec:
    """Declarative problem description; rebuildable in worker processes."""

    name: str
    params: dict = field(default_factory=dict)


def build_problem(spec: ProblemSpec) -> StochasticProblem:
    """Instantiate a problem from its declarative spec."""
    p = dict(spec.params)
    noise_mode = NoiseMode(p.pop("noise", "iid"))
    if spec.name == "quadratic":
        if "hessian" in p:
            H = np.asarray(p.pop("hessian"), dtype=float)
        else:
            H = np.diag(np.asarray(p.pop("hessian_diag"), dtype=float))
        return make_quadratic(
            H, noise_mode, sigma=float(p.pop("sigma", 0.0)), noise_law=p.pop("law", None)
        )
    if spec.name == "skew_quartic":
        return make_skew_quartic(
            int(p.pop("dimension")), noise_mode, sigma=float(p.pop("sigma", 0.0))
        )
    if spec.name == "finite_sum":
        from .core import spawn_rng

        comp_rng = spawn_rng(int(p.pop("component_seed", 0)), 0, "components")
        components = make_synthetic_components(
            int(p.pop("components")),
            int(p.pop("dimension")),
            comp_rng,
            quad_scale=float(p.pop("quad_scale", 4.0)),
        )
        return make_finite_sum(
            components,
            batch_size=int(p.pop("batch", 1)),
            kappa=float(p.pop("kappa", 0.1)),
            noise_mode=noise_mode,
        )
    raise ValueError(f"unknown problem {spec.name!r}")
