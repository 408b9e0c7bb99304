"""Random direction generators and their paired odd mappings.

Every scheme produces a pair (delta, m(delta)) with E[delta] = 0,
Cov(delta) equal to the scheme's inverse shaping matrix (identity for the
classical schemes), and E[m(delta) delta^T] = I.  The map m is odd, so a
negated underlying draw yields an exactly negated pair.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class PerturbationKind(enum.Enum):
    SPSA = "spsa"  # Rademacher components, m(delta) = delta
    RDSA = "rdsa"  # uniform on the unit sphere, m(delta) = d * delta
    SFSA = "sfsa"  # standard normal, m(delta) = delta
    HARP = "harp"  # normal with covariance hhat^-1, m(delta) = hhat @ delta


@dataclass(frozen=True)
class PerturbationDraw:
    """One direction vector and its mapped companion."""

    delta: np.ndarray
    mapped: np.ndarray


def spsa_from_signs(signs: np.ndarray) -> PerturbationDraw:
    """Build the Rademacher pair from a vector of +-1 signs."""
    delta = np.asarray(signs, dtype=float)
    return PerturbationDraw(delta=delta, mapped=delta)


def rdsa_from_normal(z: np.ndarray) -> PerturbationDraw:
    """Project a normal draw onto the unit sphere; mapped = d * delta."""
    z = np.asarray(z, dtype=float)
    delta = z / np.linalg.norm(z)
    return PerturbationDraw(delta=delta, mapped=float(z.size) * delta)


def sfsa_from_normal(z: np.ndarray) -> PerturbationDraw:
    """Identity pair for a standard normal draw."""
    z = np.asarray(z, dtype=float)
    return PerturbationDraw(delta=z, mapped=z)


def harp_from_normal(factor: np.ndarray, hhat: np.ndarray, z: np.ndarray) -> PerturbationDraw:
    """Shape a standard normal draw to covariance hhat^-1.

    ``factor`` must satisfy factor @ factor.T = hhat^-1; then
    delta = factor @ z and mapped = hhat @ delta, which restores
    E[mapped delta^T] = hhat hhat^-1 = I.
    """
    delta = factor @ np.asarray(z, dtype=float)
    return PerturbationDraw(delta=delta, mapped=hhat @ delta)


def draw_spsa(dimension: int, rng: np.random.Generator) -> PerturbationDraw:
    signs = rng.integers(0, 2, size=dimension) * 2 - 1
    return spsa_from_signs(signs)


def draw_rdsa(dimension: int, rng: np.random.Generator) -> PerturbationDraw:
    return rdsa_from_normal(rng.standard_normal(dimension))


def draw_sfsa(dimension: int, rng: np.random.Generator) -> PerturbationDraw:
    return sfsa_from_normal(rng.standard_normal(dimension))


def draw_harp(factor: np.ndarray, hhat: np.ndarray, rng: np.random.Generator) -> PerturbationDraw:
    return harp_from_normal(factor, hhat, rng.standard_normal(hhat.shape[0]))


# Batch variants: draw n pairs at once as (n, d) arrays.  Same distributions
# as the scalar draws; used by the vectorized replicate runner and by
# Monte-Carlo moment checks.


def batch_spsa(n: int, dimension: int, rng: np.random.Generator):
    deltas = (rng.integers(0, 2, size=(n, dimension)) * 2 - 1).astype(float)
    return deltas, deltas


def batch_rdsa(n: int, dimension: int, rng: np.random.Generator):
    z = rng.standard_normal((n, dimension))
    deltas = z / np.linalg.norm(z, axis=1, keepdims=True)
    return deltas, float(dimension) * deltas


def batch_sfsa(n: int, dimension: int, rng: np.random.Generator):
    z = rng.standard_normal((n, dimension))
    return z, z


def batch_harp(factor: np.ndarray, hhat: np.ndarray, n: int, rng: np.random.Generator):
    z = rng.standard_normal((n, hhat.shape[0]))
    deltas = z @ factor.T
    return deltas, deltas @ hhat.T


_UNIT_DRAWS = {
    PerturbationKind.SPSA: draw_spsa,
    PerturbationKind.RDSA: draw_rdsa,
    PerturbationKind.SFSA: draw_sfsa,
}

_UNIT_BATCH = {
    PerturbationKind.SPSA: batch_spsa,
    PerturbationKind.RDSA: batch_rdsa,
    PerturbationKind.SFSA: batch_sfsa,
}


@dataclass(frozen=True)
class PerturbationScheme:
    """A direction generator bound to its dimension and shaping matrices.

    The unit-covariance schemes carry only their kind; the shaped scheme
    additionally carries ``hhat`` (the target covariance of the mapped
    vector) and ``factor`` with factor @ factor.T = hhat^-1.
    """

    kind: PerturbationKind
    dimension: int
    factor: np.ndarray | None = None
    hhat: np.ndarray | None = None

    @classmethod
    def unit(cls, kind: PerturbationKind, dimension: int) -> "PerturbationScheme":
        if kind is PerturbationKind.HARP:
            raise ValueError("shaped scheme requires factor and hhat; use .shaped()")
        return cls(kind=kind, dimension=dimension)

    @classmethod
    def shaped(cls, factor: np.ndarray, hhat: np.ndarray) -> "PerturbationScheme":
        return cls(
            kind=PerturbationKind.HARP,
            dimension=hhat.shape[0],
            factor=factor,
            hhat=hhat,
        )

    def draw(self, rng: np.random.Generator) -> PerturbationDraw:
        if self.kind is PerturbationKind.HARP:
            return draw_harp(self.factor, self.hhat, rng)
        return _UNIT_DRAWS[self.kind](self.dimension, rng)

    def draw_batch(self, n: int, rng: np.random.Generator):
        if self.kind is PerturbationKind.HARP:
            return batch_harp(self.factor, self.hhat, n, rng)
        return _UNIT_BATCH[self.kind](n, self.dimension, rng)
