"""Multiobject state containers.

Single-object states are rows ``[px, py, vx, vy, gamma]`` of a float array.
Spatial pdfs and the Poisson intensity are carried as weighted particle sets.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np

STATE_DIM = 5
PX, PY, VX, VY, GAMMA = range(STATE_DIM)

NORMALIZATION_TOL = 1e-9


class DegenerateParticleSetError(ValueError):
    """Raised when a particle set carries no usable weight."""


@dataclass(frozen=True)
class ObjectState:
    px: float
    py: float
    vx: float
    vy: float
    gamma: float

    def __post_init__(self):
        values = self.as_array()
        if not np.all(np.isfinite(values)):
            raise ValueError(f"non-finite object state {values}")
        if self.gamma < 0:
            raise ValueError(f"intensity must be nonnegative, got {self.gamma}")

    def as_array(self) -> np.ndarray:
        return np.array([self.px, self.py, self.vx, self.vy, self.gamma], dtype=float)

    @classmethod
    def from_array(cls, row) -> "ObjectState":
        return cls(*(float(v) for v in np.asarray(row, dtype=float)[:STATE_DIM]))


@dataclass(frozen=True)
class WeightedParticleSet:
    """Particles ``states`` (N x 5) with nonnegative ``weights`` (N,)."""

    states: np.ndarray
    weights: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float).reshape(-1, STATE_DIM)
        weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if states.shape[0] != weights.shape[0]:
            raise ValueError(
                f"{states.shape[0]} particles but {weights.shape[0]} weights")
        if np.any(weights < 0) or not np.all(np.isfinite(weights)):
            raise ValueError("particle weights must be finite and nonnegative")
        if self.normalized and weights.size:
            total = weights.sum()
            if abs(total - 1.0) > NORMALIZATION_TOL:
                raise ValueError(f"normalized set sums to {total!r}")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "weights", weights)

    def __len__(self) -> int:
        return self.weights.shape[0]

    @property
    def total_weight(self) -> float:
        return float(self.weights.sum())

    @classmethod
    def empty(cls) -> "WeightedParticleSet":
        return cls(np.empty((0, STATE_DIM)), np.empty(0))

    @classmethod
    def from_unnormalized(cls, states, weights) -> "WeightedParticleSet":
        """Build a normalized set, dividing ``weights`` by their sum."""
        weights = np.asarray(weights, dtype=float)
        total = weights.sum()
        if not total > 0:
            raise DegenerateParticleSetError("cannot normalize zero total weight")
        return cls(states, weights / total, normalized=True)

    def mean(self) -> np.ndarray:
        total = self.weights.sum()
        if not total > 0:
            raise DegenerateParticleSetError("mean of a zero-weight set")
        return self.weights @ self.states / total

    def scaled(self, factor: float) -> "WeightedParticleSet":
        return WeightedParticleSet(self.states, self.weights * factor)

    @staticmethod
    def concatenate(sets: Sequence["WeightedParticleSet"]) -> "WeightedParticleSet":
        sets = [s for s in sets if len(s)]
        if not sets:
            return WeightedParticleSet.empty()
        return WeightedParticleSet(np.concatenate([s.states for s in sets]),
                                   np.concatenate([s.weights for s in sets]))


def systematic_indices(weights: np.ndarray, count: int,
                       rng: np.random.Generator) -> np.ndarray:
    """Low-variance resampling indices for ``count`` draws."""
    cumulative = np.cumsum(weights)
    total = cumulative[-1]
    positions = (rng.random() + np.arange(count)) * (total / count)
    idx = np.searchsorted(cumulative, positions, side="right")
    # positions can land on the last edge through rounding
    return np.minimum(idx, len(weights) - 1)


def resample(particles: WeightedParticleSet, target_count: int,
             rng: np.random.Generator) -> WeightedParticleSet:
    """Systematic resampling to ``target_count`` equally weighted particles.

    The total weight is kept, so this applies both to normalized spatial
    pdfs and to un-normalized intensities.
    """
    if target_count < 1:
        raise ValueError(f"target_count must be >= 1, got {target_count}")
    total = particles.total_weight if len(particles) else 0.0
    if not total > 0:
        raise DegenerateParticleSetError("cannot resample a set with zero total weight")
    idx = systematic_indices(particles.weights, target_count, rng)
    weights = np.full(target_count, total / target_count)
    return WeightedParticleSet(particles.states[idx], weights,
                               normalized=particles.normalized)


@dataclass(frozen=True)
class BernoulliComponent:
    r: float
    spatial: WeightedParticleSet
    label: Hashable = None

    def __post_init__(self):
        if not 0.0 <= self.r <= 1.0:
            raise ValueError(f"existence probability {self.r!r} outside [0, 1]")
        if not len(self.spatial):
            raise ValueError("Bernoulli component needs at least one particle")
        if not self.spatial.normalized:
            raise ValueError("Bernoulli spatial pdf must be normalized")


@dataclass(frozen=True)
class PoissonIntensity:
    """Particle intensity; the total weight is the expected object count."""

    support: WeightedParticleSet
    capacity: int = 50_000

    def __post_init__(self):
        if self.support.normalized:
            object.__setattr__(self, "support", WeightedParticleSet(
                self.support.states, self.support.weights))

    @property
    def mass(self) -> float:
        return self.support.total_weight

    @classmethod
    def empty(cls, capacity: int = 50_000) -> "PoissonIntensity":
        return cls(WeightedParticleSet.empty(), capacity)


@dataclass(frozen=True)
class PMBPosterior:
    poisson: PoissonIntensity
    bernoullis: tuple = ()
    time_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "bernoullis", tuple(self.bernoullis))
        labels = [b.label for b in self.bernoullis if b.label is not None]
        if len(labels) != len(set(labels)):
            raise ValueError("Bernoulli labels must be unique")

    @classmethod
    def empty(cls, capacity: int = 50_000) -> "PMBPosterior":
        return cls(PoissonIntensity.empty(capacity))


def expected_cardinality(posterior: PMBPosterior) -> float:
    """Poisson mass plus the sum of existence probabilities."""
    return posterior.poisson.mass + float(sum(b.r for b in posterior.bernoullis))


@dataclass(frozen=True)
class GroundTruthFrame:
    k: int
    objects: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "objects", dict(self.objects))

    def positions(self) -> np.ndarray:
        if not self.objects:
            return np.empty((0, 2))
        return np.array([[s.px, s.py] for s in self.objects.values()])
