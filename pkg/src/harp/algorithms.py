"""Complete optimizer loops with exact query accounting.

``run_harp`` implements the four-query loop: a covariance-shaped gradient
phase, the parameter update, then a curvature phase that feeds the moving
average whose regularized value shapes the next iteration's perturbations.
``run_baseline`` runs the classical unit-covariance schemes, optionally
averaging two estimates per iteration so query budgets align with the
four-query loop.  ``run_baseline_batch`` advances all replicates at once as
(R, d) arrays for large Monte-Carlo studies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    DivergenceError,
    GainSchedule,
    RunConfig,
    RunRecord,
    gain_arrays,
    spawn_rng,
)
from .estimators import estimate_gradient, sample_hessian
from .hessian import HessianTracker
from .perturbation import PerturbationKind, PerturbationScheme, harp_from_normal
from .problems import StochasticProblem


@dataclass
class OptimizerState:
    """Mutable per-run state: the iterate, counters, and any curvature tracker."""

    theta: np.ndarray
    iteration: int = 0
    queries: int = 0
    tracker: HessianTracker | None = None


def sa_step(theta: np.ndarray, a: float, ghat: np.ndarray) -> np.ndarray:
    """One stochastic-approximation update theta - a * ghat."""
    return theta - a * ghat


def _resolve_theta0(theta0, rng: np.random.Generator, dimension: int) -> np.ndarray:
    theta = theta0(rng) if callable(theta0) else np.asarray(theta0, dtype=float)
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if theta.shape != (dimension,):
        raise ValueError(f"starting point must have shape ({dimension},), got {theta.shape}")
    return theta.copy()


def uniform_initializer(low: float, high: float, dimension: int):
    """Starting points drawn uniformly from [low, high]^dimension."""

    def init(rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(low, high, size=dimension)

    return init


class _Recorder:
    def __init__(self, problem, config, theta0, algorithm, replicate):
        n = config.iterations + 1
        self.problem = problem
        self.loss = np.empty(n)
        self.distance = np.empty(n)
        self.queries = np.empty(n, dtype=np.int64)
        self.q = config.queries_per_iteration
        self.algorithm = algorithm
        self.replicate = replicate
        self.terms = None
        if problem.loss_terms is not None:
            names = sorted(problem.loss_terms(problem.theta_star))
            self.terms = {name: np.empty(n) for name in names}
        self.observe(0, theta0)

    def observe(self, k: int, theta: np.ndarray) -> None:
        self.loss[k] = self.problem.true_loss(theta)
        self.distance[k] = np.linalg.norm(theta - self.problem.theta_star)
        self.queries[k] = self.q * k
        if self.terms is not None:
            for name, value in self.problem.loss_terms(theta).items():
                self.terms[name][k] = value

    def finish(self, theta: np.ndarray) -> RunRecord:
        n = len(self.loss)
        denom = self.distance[0] if self.distance[0] > 0 else np.nan
        return RunRecord(
            iteration=np.arange(n, dtype=np.int64),
            queries=self.queries,
            loss=self.loss,
            distance=self.distance,
            normalized_distance=self.distance / denom,
            terminal_theta=theta.copy(),
            algorithm=self.algorithm,
            replicate=self.replicate,
            terms=self.terms,
        )


def _check_setup(problem: StochasticProblem, config: RunConfig) -> None:
    if problem.dimension != config.dimension:
        raise ValueError(
            f"problem dimension {problem.dimension} != config dimension {config.dimension}"
        )
    if problem.noise_mode is not config.noise_mode:
        raise ValueError("problem and config disagree on the noise mode")


def run_harp(
    problem: StochasticProblem,
    schedule: GainSchedule,
    config: RunConfig,
    theta0,
    replicate: int = 0,
    freeze_hessian: bool = False,
) -> RunRecord:
    """Run the shaped-perturbation loop for ``config.iterations`` updates.

    Each iteration draws both perturbations from a normal distribution with
    covariance hhat^-1, spends two queries on the gradient estimate, updates
    the iterate, spends two more queries on the curvature sample, and folds
    it into the tracker.  With ``freeze_hessian`` the tracker stays at the
    identity (queries are still collected), which reduces the gradient phase
    exactly to the Gaussian unit-covariance scheme.
    """
    _check_setup(problem, config)
    if config.queries_per_iteration != 4:
        raise ValueError("the shaped four-query loop requires queries_per_iteration = 4")
    d = config.dimension
    seed = config.master_seed
    init_rng = spawn_rng(seed, replicate, "init")
    pert_rng = spawn_rng(seed, replicate, "perturbation")
    pert_tilde_rng = spawn_rng(seed, replicate, "perturbation_tilde")
    noise_rng = spawn_rng(seed, replicate, "noise")
    noise_tilde_rng = spawn_rng(seed, replicate, "noise_tilde")

    state = OptimizerState(
        theta=_resolve_theta0(theta0, init_rng, d),
        tracker=HessianTracker(d, schedule),
    )
    gains = gain_arrays(schedule, config.iterations)
    rec = _Recorder(problem, config, state.theta, "harp", replicate)

    for k in range(config.iterations):
        a_k, c_k, ct_k = gains["a"][k], gains["c"][k], gains["ctilde"][k]
        tracker = state.tracker
        handle = problem.new_handle(noise_rng)
        try:
            draw = harp_from_normal(tracker.factor, tracker.hhat, pert_rng.standard_normal(d))
            est = estimate_gradient(problem, state.theta, c_k, draw, handle, noise_rng)
            theta_next = sa_step(state.theta, a_k, est.ghat)
            if not np.isfinite(theta_next).all():
                raise DivergenceError("non-finite iterate", iteration=k)
            draw_tilde = harp_from_normal(
                tracker.factor, tracker.hhat, pert_tilde_rng.standard_normal(d)
            )
            hs = sample_hessian(
                problem,
                state.theta,
                c_k,
                ct_k,
                draw,
                draw_tilde,
                handle,
                noise_tilde_rng,
                est.loss_plus,
                est.loss_minus,
            )
        except DivergenceError as err:
            err.iteration = k if err.iteration is None else err.iteration
            raise
        if not freeze_hessian:
            tracker.step(hs)
        state.theta = theta_next
        state.iteration = k + 1
        state.queries += 4
        rec.observe(k + 1, state.theta)
    record = rec.finish(state.theta)
    record.final_hbar = state.tracker.hbar.copy()
    record.final_hhat = state.tracker.hhat.copy()
    return record


def run_baseline(
    kind: PerturbationKind,
    problem: StochasticProblem,
    schedule: GainSchedule,
    config: RunConfig,
    theta0,
    replicate: int = 0,
) -> RunRecord:
    """Run a unit-covariance scheme; with queries_per_iteration = 4 each
    iteration averages two independent two-query estimates."""
    _check_setup(problem, config)
    if kind is PerturbationKind.HARP:
        raise ValueError("use run_harp for the shaped scheme")
    query_matched = config.queries_per_iteration == 4
    d = config.dimension
    seed = config.master_seed
    init_rng = spawn_rng(seed, replicate, "init")
    pert_rng = spawn_rng(seed, replicate, "perturbation")
    noise_rng = spawn_rng(seed, replicate, "noise")
    scheme = PerturbationScheme.unit(kind, d)

    state = OptimizerState(theta=_resolve_theta0(theta0, init_rng, d))
    gains = gain_arrays(schedule, config.iterations)
    rec = _Recorder(problem, config, state.theta, kind.value, replicate)

    for k in range(config.iterations):
        a_k, c_k = gains["a"][k], gains["c"][k]
        handle = problem.new_handle(noise_rng)
        try:
            est = estimate_gradient(
                problem, state.theta, c_k, scheme.draw(pert_rng), handle, noise_rng
            )
            ghat = est.ghat
            if query_matched:
                second = estimate_gradient(
                    problem, state.theta, c_k, scheme.draw(pert_rng), handle, noise_rng
                )
                ghat = 0.5 * (ghat + second.ghat)
            theta_next = sa_step(state.theta, a_k, ghat)
            if not np.isfinite(theta_next).all():
                raise DivergenceError("non-finite iterate", iteration=k)
        except DivergenceError as err:
            err.iteration = k if err.iteration is None else err.iteration
            raise
        state.theta = theta_next
        state.iteration = k + 1
        state.queries += config.queries_per_iteration
        rec.observe(k + 1, state.theta)
    return rec.finish(state.theta)


@dataclass
class BatchRunResult:
    """Distance curves and terminal iterates for a block of replicates."""

    algorithm: str
    record_iterations: np.ndarray  # (n_records,)
    distances: np.ndarray  # (replicates, n_records)
    terminal_thetas: np.ndarray  # (replicates, d)
    diverged: np.ndarray  # (replicates,) bool
    queries_per_iteration: int
    iterations: int

    @property
    def record_queries(self) -> np.ndarray:
        return self.record_iterations * self.queries_per_iteration


def run_baseline_batch(
    kind: PerturbationKind,
    problem: StochasticProblem,
    schedule: GainSchedule,
    config: RunConfig,
    theta0,
    record_every: int = 1,
) -> BatchRunResult:
    """Advance ``config.replicates`` independent baseline runs in lock step.

    Requires a problem with batch oracles.  Distances to the optimum are
    recorded every ``record_every`` iterations (plus the endpoints).
    Replicates that overflow simply propagate non-finite values and are
    flagged in ``diverged`` rather than aborting the block.
    """
    _check_setup(problem, config)
    if kind is PerturbationKind.HARP:
        raise ValueError("the batch runner covers unit-covariance schemes only")
    if not problem.supports_batch:
        raise ValueError(f"problem {problem.name!r} does not provide batch oracles")
    query_matched = config.queries_per_iteration == 4
    R, d, K = config.replicates, config.dimension, config.iterations
    seed = config.master_seed
    init_rng = spawn_rng(seed, 0, "batch_init")
    pert_rng = spawn_rng(seed, 0, "batch_perturbation")
    noise_rng = spawn_rng(seed, 0, "batch_noise")
    scheme = PerturbationScheme.unit(kind, d)

    if callable(theta0):
        thetas = np.stack([_resolve_theta0(theta0, init_rng, d) for _ in range(R)])
    else:
        theta0 = np.asarray(theta0, dtype=float)
        thetas = theta0.copy() if theta0.shape == (R, d) else np.tile(theta0, (R, 1))
    if thetas.shape != (R, d):
        raise ValueError(f"batch starting points must have shape ({R}, {d})")

    record_every = max(int(record_every), 1)
    ks = np.unique(np.r_[np.arange(0, K + 1, record_every), K])
    distances = np.empty((R, len(ks)))
    star = problem.theta_star
    distances[:, 0] = np.linalg.norm(thetas - star, axis=1)
    next_slot = 1

    gains = gain_arrays(schedule, K)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(K):
            a_k, c_k = gains["a"][k], gains["c"][k]
            handle = problem.new_batch_handle(R, noise_rng)
            deltas, mapped = scheme.draw_batch(R, pert_rng)
            lp = problem.batch_noisy_query(thetas + c_k * deltas, handle, noise_rng)
            lm = problem.batch_noisy_query(thetas - c_k * deltas, handle, noise_rng)
            ghat = ((lp - lm) / (2.0 * c_k))[:, None] * mapped
            if query_matched:
                deltas2, mapped2 = scheme.draw_batch(R, pert_rng)
                lp2 = problem.batch_noisy_query(thetas + c_k * deltas2, handle, noise_rng)
                lm2 = problem.batch_noisy_query(thetas - c_k * deltas2, handle, noise_rng)
                ghat = 0.5 * (ghat + ((lp2 - lm2) / (2.0 * c_k))[:, None] * mapped2)
            thetas = thetas - a_k * ghat
            if next_slot < len(ks) and k + 1 == ks[next_slot]:
                distances[:, next_slot] = np.linalg.norm(thetas - star, axis=1)
                next_slot += 1

    return BatchRunResult(
        algorithm=kind.value,
        record_iterations=ks,
        distances=distances,
        terminal_thetas=thetas,
        diverged=~np.isfinite(thetas).all(axis=1),
        queries_per_iteration=config.queries_per_iteration,
        iterations=K,
    )
