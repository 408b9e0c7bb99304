"""Zeroth-order stochastic optimization with Hessian-shaped perturbations.

The package bundles the shaped-perturbation optimizer, classical
unit-covariance baselines, stochastic problem oracles, estimator
diagnostics, and the limit-law toolkit that predicts and verifies
convergence rates and asymptotic covariances.
"""

from .algorithms import (
    BatchRunResult,
    OptimizerState,
    run_baseline,
    run_baseline_batch,
    run_harp,
    sa_step,
    uniform_initializer,
)
from .asymptotics import (
    AsymptoticsResult,
    AsymptoticsSpec,
    BiasVectorEstimate,
    CrnMomentEstimate,
    RateFit,
    StabilityError,
    asymptotic_mean,
    complexity,
    compute_bias_vector,
    crn_covariance_rhs,
    empirical_rate,
    empirical_scaled_covariance,
    iid_covariance_rhs,
    solve_lyapunov,
    trace_comparison,
    trace_harp_cov,
    trace_identity_cov,
)
from .core import (
    DivergenceError,
    GainSchedule,
    Gains,
    NoiseMode,
    RunConfig,
    RunRecord,
    gain_arrays,
    make_gains,
    spawn_rng,
)
from .estimators import (
    BiasNoiseDiagnostic,
    GradientEstimate,
    HessianSample,
    diagnose_bias_noise,
    estimate_gradient,
    sample_hessian,
)
from .hessian import (
    HessianTracker,
    ShapingError,
    regularize,
    shaping_factor,
    update_moving_average,
)
from .perturbation import (
    PerturbationDraw,
    PerturbationKind,
    PerturbationScheme,
    draw_harp,
    draw_rdsa,
    draw_sfsa,
    draw_spsa,
)
from .problems import (
    ComponentSet,
    NoiseHandle,
    ProblemSpec,
    StochasticProblem,
    build_problem,
    make_finite_sum,
    make_quadratic,
    make_skew_quartic,
    make_synthetic_components,
    skew_quartic,
    skew_quartic_gradient,
    skew_quartic_hessian,
    skew_quartic_third_action,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
