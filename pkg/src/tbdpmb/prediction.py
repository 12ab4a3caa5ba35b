"""Prediction step: survival, nearly-constant-velocity motion, Poisson births."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .state import (GAMMA, STATE_DIM, BernoulliComponent, PMBPosterior, PoissonIntensity,
                    WeightedParticleSet)


def ncv_matrices(T: float = 1.0):
    """State and noise-input matrices of the discretized NCV model."""
    A = np.array([[1.0, 0.0, T, 0.0],
                  [0.0, 1.0, 0.0, T],
                  [0.0, 0.0, 1.0, 0.0],
                  [0.0, 0.0, 0.0, 1.0]])
    W = np.array([[T * T / 2, 0.0],
                  [0.0, T * T / 2],
                  [T, 0.0],
                  [0.0, T]])
    return A, W


@dataclass(frozen=True)
class TransitionModel:
    """Kinematics ``p' = A p + W w`` with ``w ~ N(0, q_kin I)``; intensity random walk."""

    A: np.ndarray = field(default_factory=lambda: ncv_matrices()[0])
    W: np.ndarray = field(default_factory=lambda: ncv_matrices()[1])
    q_kin: float = 1e-3
    q_int: float = 1e-2
    p_s: float = 0.999
    # optional state-dependent survival, states (N, 5) -> probabilities (N,)
    survival_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        if self.q_kin < 0 or self.q_int < 0:
            raise ValueError("noise variances must be nonnegative")
        if not 0 < self.p_s <= 1:
            raise ValueError(f"survival probability {self.p_s} outside (0, 1]")
        object.__setattr__(self, "A", np.asarray(self.A, dtype=float).reshape(4, 4))
        object.__setattr__(self, "W", np.asarray(self.W, dtype=float).reshape(4, 2))

    def survival(self, states: np.ndarray) -> np.ndarray:
        if self.survival_fn is None:
            return np.full(states.shape[0], self.p_s)
        return np.asarray(self.survival_fn(states), dtype=float)

    def propagate(self, states: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        n = states.shape[0]
        out = np.empty_like(states)
        out[:, :4] = states[:, :4] @ self.A.T
        if self.q_kin > 0:
            out[:, :4] += rng.normal(0.0, np.sqrt(self.q_kin), size=(n, 2)) @ self.W.T
        gamma = states[:, GAMMA]
        if self.q_int > 0:
            gamma = gamma + rng.normal(0.0, np.sqrt(self.q_int), size=n)
        # intensity is a power
        out[:, GAMMA] = np.maximum(gamma, 0.0)
        return out


@dataclass(frozen=True)
class BirthModel:
    """Poisson births: uniform position over ``roi``, Gaussian velocity,
    uniform intensity on ``[0, gamma_max]``."""

    roi: tuple
    mu_b: float = 0.1
    sigma_v_sq: float = 0.1
    gamma_max: float = 30.0
    particles_per_step: int = 50_000

    def __post_init__(self):
        if self.mu_b < 0:
            raise ValueError("expected birth count must be nonnegative")
        if self.particles_per_step < 1:
            raise ValueError("particles_per_step must be >= 1")
        object.__setattr__(self, "roi", tuple(float(v) for v in self.roi))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        xmin, xmax, ymin, ymax = self.roi
        states = np.empty((n, STATE_DIM))
        states[:, 0] = rng.uniform(xmin, xmax, n)
        states[:, 1] = rng.uniform(ymin, ymax, n)
        states[:, 2:4] = rng.normal(0.0, np.sqrt(self.sigma_v_sq), size=(n, 2))
        states[:, GAMMA] = rng.uniform(0.0, self.gamma_max, n)
        return states

    def intensity(self, rng: np.random.Generator) -> WeightedParticleSet:
        n = self.particles_per_step
        return WeightedParticleSet(self.sample(n, rng), np.full(n, self.mu_b / n))


def predict_bernoulli(b: BernoulliComponent, tm: TransitionModel,
                      rng: np.random.Generator) -> BernoulliComponent:
    states = b.spatial.states
    weights = b.spatial.weights
    ps = tm.survival(states)
    survive = float(weights @ ps)
    r = b.r * survive
    if tm.survival_fn is not None and survive > 0:
        weights = weights * ps / survive
    spatial = WeightedParticleSet(tm.propagate(states, rng), weights, normalized=True)
    return BernoulliComponent(min(r, 1.0), spatial, b.label)


def predict_phd(phd: PoissonIntensity, tm: TransitionModel, birth: BirthModel,
                rng: np.random.Generator) -> PoissonIntensity:
    """Survivor particles scaled by the survival probability, plus birth particles."""
    support = phd.support
    parts = []
    if len(support):
        ps = tm.survival(support.states)
        parts.append(WeightedParticleSet(tm.propagate(support.states, rng),
                                         support.weights * ps))
    if birth.mu_b > 0:
        parts.append(birth.intensity(rng))
    return PoissonIntensity(WeightedParticleSet.concatenate(parts), phd.capacity)


def predict(posterior: PMBPosterior, tm: TransitionModel, birth: BirthModel,
            rng: np.random.Generator) -> PMBPosterior:
    """Predict every Bernoulli and the intensity; the component count is kept."""
    bernoullis = [predict_bernoulli(b, tm, rng) for b in posterior.bernoullis]
    phd = predict_phd(posterior.poisson, tm, birth, rng)
    return PMBPosterior(phd, bernoullis, posterior.time_index + 1)
