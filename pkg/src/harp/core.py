"""Shared domain types: gain schedules, run configuration, run records, seeding."""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np


class NoiseMode(enum.Enum):
    """Statistical coupling between the noisy queries of one iteration."""

    IID = "iid"
    CRN = "crn"


class DivergenceError(RuntimeError):
    """A run produced a non-finite observation or iterate.

    Carries the iteration index at which the failure was detected so that
    query accounting stays exact.
    """

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration


class Gains(NamedTuple):
    """The five gain values at one iteration index."""

    a: float
    c: float
    ctilde: float
    w: float
    eps: float


@dataclass(frozen=True)
class GainSchedule:
    """Power-law tuning sequences for the recursion and its Hessian smoother.

    The produced sequences are

        a_k   = a / (k + 1 + A)^alpha
        c_k   = c / (k + 1)^gamma
        ct_k  = ctilde_ratio * c_k
        w_k   = 1 / (k + 1)^w_exponent
        eps_k = eps0 / (k + 1)^eps_exponent

    with alpha in (1/2, 1] and gamma in (0, alpha - 1/2), which makes
    sum(a_k) divergent and sum(a_k^2 / c_k^2) convergent.  The offset A
    applies to the step size only.
    """

    a: float
    c: float
    alpha: float = 1.0
    gamma: float = 1.0 / 6.0
    A: float = 0.0
    ctilde_ratio: float = 1.0
    w_exponent: float = 1.0
    eps0: float = 1e-5
    eps_exponent: float = 0.5

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError(f"step numerator must be positive, got a={self.a}")
        if not self.c > 0:
            raise ValueError(f"differencing numerator must be positive, got c={self.c}")
        if self.A < 0:
            raise ValueError(f"stability offset must be nonnegative, got A={self.A}")
        if not 0.5 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (1/2, 1], got {self.alpha}")
        if not 0.0 < self.gamma < self.alpha - 0.5:
            raise ValueError(
                f"gamma must lie in (0, alpha - 1/2) = (0, {self.alpha - 0.5}), got {self.gamma}"
            )
        if not self.ctilde_ratio > 0:
            raise ValueError(f"ctilde_ratio must be positive, got {self.ctilde_ratio}")
        if not 0.5 < self.w_exponent <= 1.0:
            raise ValueError(f"w_exponent must lie in (1/2, 1], got {self.w_exponent}")
        if not self.eps0 > 0 or not self.eps_exponent > 0:
            raise ValueError("eps0 and eps_exponent must be positive")


def make_gains(schedule: GainSchedule, k: int) -> Gains:
    """Evaluate all five gain sequences at iteration ``k >= 0``."""
    kp1 = k + 1.0
    return Gains(
        a=schedule.a / (kp1 + schedule.A) ** schedule.alpha,
        c=schedule.c / kp1**schedule.gamma,
        ctilde=schedule.ctilde_ratio * schedule.c / kp1**schedule.gamma,
        w=1.0 / kp1**schedule.w_exponent,
        eps=schedule.eps0 / kp1**schedule.eps_exponent,
    )


def gain_arrays(schedule: GainSchedule, num_iterations: int) -> dict[str, np.ndarray]:
    """Tabulate the gain sequences for k = 0 .. num_iterations - 1."""
    kp1 = np.arange(1, num_iterations + 1, dtype=float)
    c = schedule.c / kp1**schedule.gamma
    return {
        "a": schedule.a / (kp1 + schedule.A) ** schedule.alpha,
        "c": c,
        "ctilde": schedule.ctilde_ratio * c,
        "w": 1.0 / kp1**schedule.w_exponent,
        "eps": schedule.eps0 / kp1**schedule.eps_exponent,
    }


@dataclass(frozen=True)
class RunConfig:
    """Size, budget, and randomness contract of one replicated experiment."""

    dimension: int
    iterations: int
    replicates: int = 1
    queries_per_iteration: int = 2
    master_seed: int = 0
    noise_mode: NoiseMode = NoiseMode.IID

    def __post_init__(self):
        if self.dimension < 1:
            raise ValueError(f"dimension must be >= 1, got {self.dimension}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.replicates < 1:
            raise ValueError(f"replicates must be >= 1, got {self.replicates}")
        if self.queries_per_iteration not in (2, 4):
            raise ValueError(
                f"queries_per_iteration must be 2 or 4, got {self.queries_per_iteration}"
            )


@dataclass
class RunRecord:
    """Per-iteration trace of one optimizer run.

    All arrays have length ``iterations + 1``; entry ``k`` describes the
    iterate before the k-th update, so entry 0 is the starting point and the
    last entry is the terminal iterate.
    """

    iteration: np.ndarray
    queries: np.ndarray
    loss: np.ndarray
    distance: np.ndarray
    normalized_distance: np.ndarray
    terminal_theta: np.ndarray
    algorithm: str = ""
    replicate: int = 0
    diverged: bool = False
    failed_at: int | None = None
    # optional named loss terms tracked alongside the total loss
    terms: dict[str, np.ndarray] | None = None
    # terminal curvature estimates (shaped runs only)
    final_hbar: np.ndarray | None = None
    final_hhat: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.iteration)
        for name in ("queries", "loss", "distance", "normalized_distance"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"array length mismatch for {name!r}")


_TAG_BYTES = 8


def _tag_to_int(tag: str) -> int:
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    return int.from_bytes(digest[:_TAG_BYTES], "little")


def spawn_rng(master_seed: int, replicate: int, tag: str) -> np.random.Generator:
    """Create a deterministic random stream keyed by (seed, replicate, tag).

    Identical keys give bit-identical streams; distinct keys give
    statistically independent streams, so replicate workers never share
    random state.
    """
    key = [int(master_seed) & 0xFFFFFFFFFFFFFFFF, int(replicate), _tag_to_int(tag)]
    return np.random.default_rng(np.random.SeedSequence(key))
