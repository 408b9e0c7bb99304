"""Experiment runner: config parsing, replicated runs, CSV reports.

Configs are INI files with one section per algorithm; every key can be
overridden on the command line as ``section.key=value``.  Verbs:

    harp run <config> [overrides...]       replicated runs + CSV reports
    harp predict <config> [overrides...]   limit-law predictions
    harp rate-fit <replicates.csv>         decay-exponent fit from a CSV

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .algorithms import run_baseline, run_harp, uniform_initializer
from .asymptotics import (
    AsymptoticsSpec,
    StabilityError,
    asymptotic_mean,
    complexity,
    compute_bias_vector,
    empirical_rate,
    iid_covariance_rhs,
    solve_lyapunov,
    trace_identity_cov,
    trace_harp_cov,
)
from .core import (
    DivergenceError,
    GainSchedule,
    NoiseMode,
    RunConfig,
    RunRecord,
    spawn_rng,
)
from .perturbation import PerturbationKind
from .problems import ProblemSpec, StochasticProblem, build_problem

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

OUTPUT_DIR_ENV = "HARP_OUTPUT_DIR"
DEFAULT_OUTPUT_DIR = "harp_output"

REPLICATE_COLUMNS = (
    "replicate",
    "iteration",
    "cumulative_queries",
    "loss",
    "distance",
    "normalized_distance",
)
CURVE_COLUMNS = ("algorithm", "iteration", "cumulative_queries", "mean_normalized_distance")
SUMMARY_COLUMNS = (
    "algorithm",
    "replicates",
    "diverged",
    "mean_terminal_loss",
    "std_terminal_loss",
    "mean_terminal_magnitude",
    "mean_terminal_component",
    "mean_terminal_normalized_distance",
    "total_queries",
)


class ConfigError(Exception):
    """Invalid or inconsistent experiment configuration."""


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


@dataclass(frozen=True)
class AlgorithmConfig:
    name: str
    kind: PerturbationKind
    schedule: GainSchedule
    queries_per_iteration: int
    alpha_exact: Fraction
    gamma_exact: Fraction


@dataclass(frozen=True)
class InitSpec:
    kind: str = "zeros"
    low: float = -1.0
    high: float = 1.0
    point: tuple = ()

    def initializer(self, dimension: int):
        if self.kind == "zeros":
            return np.zeros(dimension)
        if self.kind == "point":
            if len(self.point) != dimension:
                raise ConfigError(
                    f"init point has {len(self.point)} entries, problem needs {dimension}"
                )
            return np.asarray(self.point, dtype=float)
        if self.kind == "uniform":
            return uniform_initializer(self.low, self.high, dimension)
        raise ConfigError(f"unknown init kind {self.kind!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    problem: ProblemSpec
    algorithms: tuple[AlgorithmConfig, ...]
    iterations: int
    replicates: int
    seed: int
    workers: int = 1
    init: InitSpec = field(default_factory=InitSpec)
    output_dir: str | None = None
    rate_window: tuple[int, int] | None = None
    predict_eps: float = 0.01
    bias_samples: int = 200_000

    def resolve_output_dir(self) -> str:
        if self.output_dir:
            return self.output_dir
        return os.environ.get(OUTPUT_DIR_ENV, DEFAULT_OUTPUT_DIR)


def _exact_fraction(raw: str) -> Fraction:
    raw = raw.strip()
    return Fraction(raw) if "/" in raw else Fraction(float(raw))


def _parse_floats(raw: str) -> tuple[float, ...]:
    return tuple(float(tok) for tok in raw.replace(",", " ").split())


def _section_get(section, key, convert, default=None, required=False):
    if key not in section:
        if required:
            raise ConfigError(f"[{section.name}] is missing required key {key!r}")
        return default
    raw = section[key]
    try:
        return convert(raw)
    except (ValueError, ZeroDivisionError) as err:
        raise ConfigError(f"[{section.name}] {key} = {raw!r}: {err}") from err


def _parse_algorithm(section) -> AlgorithmConfig:
    label = section.name.split(None, 1)[1] if " " in section.name else section.name
    kind_raw = _section_get(section, "kind", str, default=label).strip().lower()
    try:
        kind = PerturbationKind(kind_raw)
    except ValueError as err:
        raise ConfigError(f"[{section.name}] unknown algorithm kind {kind_raw!r}") from err
    alpha = _section_get(section, "alpha", _exact_fraction, default=Fraction(1))
    gamma = _section_get(section, "gamma", _exact_fraction, default=Fraction(1, 6))
    try:
        schedule = GainSchedule(
            a=_section_get(section, "a", float, required=True),
            c=_section_get(section, "c", float, required=True),
            alpha=float(alpha),
            gamma=float(gamma),
            A=_section_get(section, "A", float, default=0.0),
            ctilde_ratio=_section_get(section, "ctilde_ratio", float, default=1.0),
            w_exponent=_section_get(section, "w_exponent", float, default=1.0),
            eps0=_section_get(section, "eps0", float, default=1e-5),
            eps_exponent=_section_get(section, "eps_exponent", float, default=0.5),
        )
    except ValueError as err:
        raise ConfigError(f"[{section.name}]: {err}") from err
    if kind is PerturbationKind.HARP:
        q = 4
    else:
        q = _section_get(section, "queries", int, default=4)
        if q not in (2, 4):
            raise ConfigError(f"[{section.name}] queries must be 2 or 4, got {q}")
    return AlgorithmConfig(
        name=label,
        kind=kind,
        schedule=schedule,
        queries_per_iteration=q,
        alpha_exact=alpha,
        gamma_exact=gamma,
    )


def _parse_problem(section) -> ProblemSpec:
    name = _section_get(section, "name", str, required=True).strip().lower()
    params: dict = {"noise": _section_get(section, "noise", str, default="iid").lower()}
    if name == "quadratic":
        params["hessian_diag"] = _section_get(section, "hessian_diag", _parse_floats, required=True)
        params["sigma"] = _section_get(section, "sigma", float, default=0.0)
        law = _section_get(section, "law", str)
        if law:
            params["law"] = law.strip().lower()
    elif name == "skew_quartic":
        params["dimension"] = _section_get(section, "dimension", int, required=True)
        params["sigma"] = _section_get(section, "sigma", float, default=0.0)
    elif name == "finite_sum":
        params["dimension"] = _section_get(section, "dimension", int, required=True)
        params["components"] = _section_get(section, "components", int, required=True)
        params["batch"] = _section_get(section, "batch", int, default=1)
        params["kappa"] = _section_get(section, "kappa", float, default=0.1)
        params["component_seed"] = _section_get(section, "component_seed", int, default=0)
        params["quad_scale"] = _section_get(section, "quad_scale", float, default=4.0)
    else:
        raise ConfigError(f"unknown problem {name!r}")
    return ProblemSpec(name=name, params=params)


def parse_config(path: str, overrides: list[str] | None = None) -> ExperimentConfig:
    """Parse an INI experiment config plus ``section.key=value`` overrides."""
    parser = configparser.ConfigParser(interpolation=None)
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path!r}")
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        target, value = item.split("=", 1)
        section, key = target.split(".", 1)
        if not parser.has_section(section):
            raise ConfigError(f"override names unknown section [{section}]")
        parser[section][key] = value

    if not parser.has_section("problem"):
        raise ConfigError("config requires a [problem] section")
    if not parser.has_section("run"):
        raise ConfigError("config requires a [run] section")
    problem_spec = _parse_problem(parser["problem"])

    run = parser["run"]
    iterations = _section_get(run, "iterations", int, required=True)
    replicates = _section_get(run, "replicates", int, default=1)
    if iterations < 1 or replicates < 1:
        raise ConfigError("iterations and replicates must be >= 1")

    algo_sections = [s for s in parser.sections() if s == "algorithm" or s.startswith("algorithm ")]
    if not algo_sections:
        raise ConfigError("config requires at least one [algorithm <name>] section")
    algorithms = tuple(_parse_algorithm(parser[s]) for s in algo_sections)
    names = [a.name for a in algorithms]
    if len(set(names)) != len(names):
        raise ConfigError(f"algorithm names must be unique, got {names}")

    init = InitSpec()
    if parser.has_section("init"):
        sec = parser["init"]
        init = InitSpec(
            kind=_section_get(sec, "kind", str, default="zeros").strip().lower(),
            low=_section_get(sec, "low", float, default=-1.0),
            high=_section_get(sec, "high", float, default=1.0),
            point=_section_get(sec, "point", _parse_floats, default=()),
        )
        if init.kind not in ("zeros", "uniform", "point"):
            raise ConfigError(f"unknown init kind {init.kind!r}")

    rate_window = None
    predict_eps = 0.01
    bias_samples = 200_000
    if parser.has_section("report"):
        rep = parser["report"]
        if "rate_window" in rep:
            lo, hi = (int(v) for v in _parse_floats(rep["rate_window"]))
            rate_window = (lo, hi)
        predict_eps = _section_get(rep, "predict_eps", float, default=0.01)
        bias_samples = _section_get(rep, "bias_samples", int, default=200_000)

    return ExperimentConfig(
        problem=problem_spec,
        algorithms=algorithms,
        iterations=iterations,
        replicates=replicates,
        seed=_section_get(run, "seed", int, default=0),
        workers=_section_get(run, "workers", int, default=1),
        init=init,
        output_dir=_section_get(run, "output", str),
        rate_window=rate_window,
        predict_eps=predict_eps,
        bias_samples=bias_samples,
    )


def _run_config_for(config: ExperimentConfig, algo: AlgorithmConfig, problem) -> RunConfig:
    return RunConfig(
        dimension=problem.dimension,
        iterations=config.iterations,
        replicates=config.replicates,
        queries_per_iteration=algo.queries_per_iteration,
        master_seed=config.seed,
        noise_mode=problem.noise_mode,
    )


def _run_one_replicate(task) -> RunRecord | tuple[int, int]:
    """Run one replicate; returns the record, or (replicate, failed_at)."""
    config, algo, replicate, problem = task
    if problem is None:
        problem = build_problem(config.problem)
    run_config = _run_config_for(config, algo, problem)
    theta0 = config.init.initializer(problem.dimension)
    try:
        if algo.kind is PerturbationKind.HARP:
            return run_harp(problem, algo.schedule, run_config, theta0, replicate=replicate)
        return run_baseline(
            algo.kind, problem, algo.schedule, run_config, theta0, replicate=replicate
        )
    except DivergenceError as err:
        return (replicate, err.iteration if err.iteration is not None else 0)


def _pool_task(args):
    config, algo, replicate = args
    return _run_one_replicate((config, algo, replicate, None))


def run_algorithm(
    config: ExperimentConfig, algo: AlgorithmConfig, problem: StochasticProblem | None = None
) -> list:
    """All replicates of one algorithm, merged in replicate order."""
    replicates = range(config.replicates)
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            return list(pool.map(_pool_task, [(config, algo, r) for r in replicates]))
    if problem is None:
        problem = build_problem(config.problem)
    return [_run_one_replicate((config, algo, r, problem)) for r in replicates]


def _write_csv(path: str, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _replicate_rows(results, term_names):
    for res in results:
        if not isinstance(res, RunRecord):
            continue
        terms = [res.terms[name] for name in term_names] if term_names else []
        for i in range(len(res.iteration)):
            row = [
                str(res.replicate),
                str(res.iteration[i]),
                str(res.queries[i]),
                _fmt(res.loss[i]),
                _fmt(res.distance[i]),
                _fmt(res.normalized_distance[i]),
            ]
            row.extend(_fmt(t[i]) for t in terms)
            yield row


def _summary_row(algo: AlgorithmConfig, config: ExperimentConfig, results) -> list[str]:
    records = [r for r in results if isinstance(r, RunRecord)]
    failures = [r for r in results if not isinstance(r, RunRecord)]
    n_ok = len(records)
    terminal_loss = np.array([r.loss[-1] for r in records])
    terminal_norm = np.array([r.normalized_distance[-1] for r in records])
    total_queries = sum(int(r.queries[-1]) for r in records)
    total_queries += sum(algo.queries_per_iteration * failed_at for _, failed_at in failures)
    has_terms = bool(records) and records[0].terms is not None
    mean_mag = np.mean([r.terms["magnitude"][-1] for r in records]) if has_terms else None
    mean_comp = np.mean([r.terms["component"][-1] for r in records]) if has_terms else None
    return [
        algo.name,
        str(config.replicates),
        str(len(failures)),
        _fmt(terminal_loss.mean()) if n_ok else "",
        _fmt(terminal_loss.std(ddof=1)) if n_ok >= 2 else "",
        _fmt(mean_mag) if mean_mag is not None else "",
        _fmt(mean_comp) if mean_comp is not None else "",
        _fmt(terminal_norm.mean()) if n_ok else "",
        str(total_queries),
    ]


def run_experiment(config: ExperimentConfig, stream=None) -> int:
    """Run every configured algorithm and write the CSV reports."""
    stream = stream or sys.stdout
    out_dir = config.resolve_output_dir()
    os.makedirs(out_dir, exist_ok=True)
    problem = build_problem(config.problem)
    term_names = []
    if problem.loss_terms is not None:
        term_names = sorted(problem.loss_terms(problem.theta_star))

    summary_rows = []
    curve_rows = []
    rate_lines = []
    for algo in config.algorithms:
        results = run_algorithm(config, algo, problem if config.workers <= 1 else None)
        records = [r for r in results if isinstance(r, RunRecord)]
        header = list(REPLICATE_COLUMNS) + [f"{name}_term" for name in term_names]
        path = os.path.join(out_dir, f"replicates_{algo.name}.csv")
        _write_csv(path, header, _replicate_rows(results, term_names))
        summary_rows.append(_summary_row(algo, config, results))
        if records:
            mean_curve = np.mean([r.normalized_distance for r in records], axis=0)
            queries = records[0].queries
            for k in range(len(mean_curve)):
                curve_rows.append([algo.name, str(k), str(queries[k]), _fmt(mean_curve[k])])
        if config.rate_window and len(records) >= 2:
            fit = empirical_rate(records, config.rate_window)
            rate_lines.append(
                f"{algo.name}: slope {fit.slope:.6f} +- {fit.standard_error:.6f} "
                f"over iterations {config.rate_window[0]}..{config.rate_window[1]} "
                f"({fit.n_points} points)"
            )

    _write_csv(os.path.join(out_dir, "curves.csv"), CURVE_COLUMNS, curve_rows)
    _write_csv(os.path.join(out_dir, "summary.csv"), SUMMARY_COLUMNS, summary_rows)
    if rate_lines:
        with open(os.path.join(out_dir, "rate_fit.txt"), "w") as fh:
            fh.write("\n".join(rate_lines) + "\n")

    print(f"wrote {out_dir}/", file=stream)
    print(",".join(SUMMARY_COLUMNS), file=stream)
    for row in summary_rows:
        print(",".join(row), file=stream)
    for line in rate_lines:
        print(line, file=stream)
    return EXIT_OK


def predict(config: ExperimentConfig, stream=None) -> int:
    """Print limit-law predictions for every configured algorithm."""
    stream = stream or sys.stdout
    problem = build_problem(config.problem)
    if problem.hessian is None:
        raise ConfigError(f"problem {problem.name!r} has no analytic curvature")
    H = problem.hessian_at_optimum()
    eigenvalues = np.linalg.eigvalsh(H)
    var = problem.noise_variance_at_optimum or 0.0
    eps = config.predict_eps
    print(f"problem {problem.name}, dimension {problem.dimension}", file=stream)
    print(f"curvature eigenvalues: {np.array2string(eigenvalues, precision=6)}", file=stream)
    print(f"noise variance at optimum: {var:.6g}", file=stream)

    for algo in config.algorithms:
        sched = algo.schedule
        spec = AsymptoticsSpec.build(
            sched.a, sched.c, algo.alpha_exact, algo.gamma_exact, H, np.eye(len(H)), var
        )
        print(f"\n[{algo.name}] tau = {spec.tau:.6g}, tau_plus = {spec.tau_plus:.6g}", file=stream)
        threshold = spec.stability_threshold
        if spec.tau_plus > 0 and sched.a <= threshold:
            print(
                f"UNSTABLE: step numerator a = {sched.a:.6g} must exceed "
                f"tau_plus / (2 lambda_min) = {threshold:.6g}",
                file=stream,
            )
            raise StabilityError(f"a = {sched.a} below threshold {threshold}")
        tau_star = 1.0 if problem.noise_mode is NoiseMode.CRN else 2.0 / 3.0
        q = algo.queries_per_iteration // 2
        Gamma = spec.gamma_matrix
        for label, sigma in (("unit", np.eye(len(H))), ("curvature", H)):
            t = np.zeros(len(H))
            if problem.third_action is not None:
                bias = compute_bias_vector(
                    problem,
                    sigma,
                    sched.a,
                    sched.c,
                    algo.alpha_exact,
                    algo.gamma_exact,
                    config.bias_samples,
                    spawn_rng(config.seed, 0, f"predict:{algo.name}:{label}"),
                )
                t = bias.value
            mu = asymptotic_mean(Gamma, spec.tau_plus, t)
            B = solve_lyapunov(Gamma, spec.tau_plus, iid_covariance_rhs(sched.a, sched.c, var, sigma))
            iters, queries = complexity(eps, tau_star, mu, B, q)
            print(
                f"  sigma = {label}: |mu| = {np.linalg.norm(mu):.6g}, tr(B) = {np.trace(B):.6g}, "
                f"iterations({eps:g}) = {iters:.6g}, queries({eps:g}) = {queries:.6g}",
                file=stream,
            )
        trace_unit = trace_identity_cov(sched.a, sched.c, var, spec.tau_plus, eigenvalues)
        trace_shaped = trace_harp_cov(sched.a, sched.c, var, spec.tau_plus, eigenvalues)
        print(
            f"  covariance traces: unit {trace_unit:.6g}, curvature-shaped {trace_shaped:.6g}",
            file=stream,
        )
        if problem.noise_mode is NoiseMode.CRN and problem.crn_gradient_moments is not None:
            B_crn = solve_lyapunov(
                Gamma, spec.alpha_plus, sched.a**2 * problem.crn_gradient_moments
            )
            print(f"  CRN limit covariance trace: {np.trace(B_crn):.6g}", file=stream)
    return EXIT_OK


def rate_fit_csv(path: str, window: tuple[int, int] | None, stream=None) -> int:
    """Fit the RMS decay exponent from a per-replicate CSV."""
    stream = stream or sys.stdout
    by_replicate: dict[int, list[tuple[int, float]]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"replicate", "iteration", "distance"} <= set(
            reader.fieldnames
        ):
            raise ConfigError(f"{path!r} must have replicate, iteration, distance columns")
        for row in reader:
            by_replicate.setdefault(int(row["replicate"]), []).append(
                (int(row["iteration"]), float(row["distance"]))
            )
    if len(by_replicate) < 2:
        raise ConfigError("rate fit needs at least 2 replicates")
    records = []
    for rep in sorted(by_replicate):
        pairs = sorted(by_replicate[rep])
        ks = np.array([p[0] for p in pairs])
        dist = np.array([p[1] for p in pairs])
        n = len(ks)
        records.append(
            RunRecord(
                iteration=ks,
                queries=np.zeros(n, dtype=int),
                loss=np.zeros(n),
                distance=dist,
                normalized_distance=dist / dist[0] if dist[0] > 0 else dist,
                terminal_theta=np.zeros(1),
                replicate=rep,
            )
        )
    K = int(records[0].iteration[-1])
    window = window or (max(1, K // 10), K)
    fit = empirical_rate(records, window)
    print(
        f"slope {fit.slope:.6f} +- {fit.standard_error:.6f} over iterations "
        f"{window[0]}..{window[1]} ({fit.n_points} points, {len(records)} replicates)",
        file=stream,
    )
    return EXIT_OK


def _build_arg_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="harp", description="zeroth-order optimization experiment runner"
    )
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in ("run", "predict"):
        p = sub.add_parser(verb)
        p.add_argument("config", help="INI experiment config")
        p.add_argument("overrides", nargs="*", help="section.key=value overrides")
    p = sub.add_parser("rate-fit")
    p.add_argument("curves", help="per-replicate CSV")
    p.add_argument("--window", help="lo,hi iteration window", default=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_arg_parser().parse_args(argv)
    try:
        if args.verb == "rate-fit":
            window = None
            if args.window:
                lo, hi = (int(v) for v in args.window.split(","))
                window = (lo, hi)
            return rate_fit_csv(args.curves, window)
        config = parse_config(args.config, args.overrides)
        if args.verb == "run":
            return run_experiment(config)
        return predict(config)
    except (ConfigError, OSError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (StabilityError, DivergenceError, RuntimeError, np.linalg.LinAlgError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
