"""Measurement update of the PMB filter and the per-step filter driver.

Stage one computes association weights from the predicted posterior and the
frame, loopy BP turns them into marginal association probabilities, and
stage two collapses the result back to a Poisson multi-Bernoulli posterior.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .association import (AssociationWeights, BeliefTable, BpConfig, NumericWeightError,
                          run_bp)
from .measurement import (CellGrid, ContributionTable, Frame, NoiseModel, cell_variance,
                          log_likelihood_ratio, mean_contributions)
from .prediction import BirthModel, TransitionModel, predict
from .state import (BernoulliComponent, PMBPosterior, PoissonIntensity, WeightedParticleSet,
                    resample)

#: log-ratio above which contributing weights of a cell are rescaled
LOG_RATIO_CEILING = 600.0
BIRTH_FLOOR = 1e-4


@dataclass(frozen=True)
class LegacyConditionals:
    """Per-particle pieces of the association-conditioned pdfs of one legacy component.

    ``a0[i]`` and ``a1[i]`` are the unnormalized weights of particle ``i``
    given that the component sits in cell ``cells[i]`` and does not / does
    contribute.  Summed per cell they give ``b`` and ``c``.
    """

    cells: np.ndarray
    a0: np.ndarray
    a1: np.ndarray


@dataclass(frozen=True)
class BirthConditionals:
    """PHD particles inside the grid with their new-object weights."""

    cells: np.ndarray
    index: np.ndarray  # positions in the predicted PHD support
    a1: np.ndarray


@dataclass(frozen=True)
class WeightComputation:
    weights: AssociationWeights
    legacy: tuple
    birth: BirthConditionals


@dataclass(frozen=True)
class EstimateSet:
    labels: tuple = ()
    states: np.ndarray = field(default_factory=lambda: np.empty((0, 5)))
    existence: np.ndarray = field(default_factory=lambda: np.empty(0))

    def __len__(self) -> int:
        return len(self.labels)

    def positions(self) -> np.ndarray:
        return self.states[:, :2]


def _contribution_probs(s2: np.ndarray, competitors: np.ndarray, enabled: bool) -> np.ndarray:
    if not enabled:
        return np.ones_like(s2)
    return s2 / (s2 + competitors)


def poisson_contribution_probs(states: np.ndarray, weights: np.ndarray, grid: CellGrid,
                               noise: NoiseModel, table: ContributionTable):
    """Cells, in-cell variances and contribution probabilities of PHD particles.

    A PHD particle competes with the member Bernoullis of its cell and with
    the rest of the cell's Poisson mean contribution (itself left out).
    """
    cells, s2 = cell_variance(states, grid, noise)
    inside = cells >= 0
    p1 = np.zeros_like(s2)
    if np.any(inside):
        c_in = cells[inside]
        legacy = table.legacy_competition()[c_in]
        own = np.maximum(table.poisson_sigma_bar_sq[c_in] - weights[inside] * s2[inside], 0.0)
        p1[inside] = _contribution_probs(s2[inside], legacy + own, table.contributions)
    return cells, s2, p1


def compute_weights(pred: PMBPosterior, frame: Frame, table: ContributionTable,
                    noise: NoiseModel) -> WeightComputation:
    """Association weights for every legacy component and every cell.

    Weights are divided through by the noise-only likelihood of the frame, so
    ``beta_new`` is ``1 + d`` instead of ``f0 + d``.
    """
    grid = frame.grid
    M = grid.num_cells
    J = len(pred.bernoullis)
    if table.num_cells != M or table.num_components != J:
        raise ValueError("contribution table does not match the predicted posterior")
    z = frame.z
    competitors = table.bernoulli_competitors()

    # per-particle log ratios, gathered first to fix the per-cell scale
    legacy_terms = []
    cell_max = np.zeros(M)
    for j, b in enumerate(pred.bernoullis):
        cells, s2 = cell_variance(b.spatial.states, grid, noise)
        inside = cells >= 0
        llr = np.zeros_like(s2)
        llr[inside] = log_likelihood_ratio(z[cells[inside]], s2[inside], noise.variance)
        if np.any(inside):
            np.maximum.at(cell_max, cells[inside], llr[inside])
        legacy_terms.append((cells, s2, inside, llr))

    support = pred.poisson.support
    p_cells, p_s2, p_p1 = poisson_contribution_probs(support.states, support.weights, grid,
                                                     noise, table)
    p_inside = p_cells >= 0
    p_llr = np.zeros_like(p_s2)
    p_llr[p_inside] = log_likelihood_ratio(z[p_cells[p_inside]], p_s2[p_inside], noise.variance)
    if np.any(p_inside):
        np.maximum.at(cell_max, p_cells[p_inside], p_llr[p_inside])
    log_scale = np.maximum(cell_max - LOG_RATIO_CEILING, 0.0)

    b_int = np.zeros((J, M))
    c_int = np.zeros((J, M))
    c_free = np.zeros((J, M))
    outside_mass = np.zeros(J)
    r = np.array([b.r for b in pred.bernoullis], dtype=float)
    legacy = []
    for j, (bern, (cells, s2, inside, llr)) in enumerate(zip(pred.bernoullis, legacy_terms)):
        w = bern.spatial.weights
        p1 = np.zeros_like(s2)
        p1[inside] = _contribution_probs(s2[inside], competitors[j, cells[inside]],
                                         table.contributions)
        ratio = np.zeros_like(s2)
        ratio[inside] = np.exp(llr[inside] - log_scale[cells[inside]])
        a0 = np.where(inside, w * (1.0 - p1), 0.0)
        a1 = w * p1 * ratio
        c_in = cells[inside]
        b_int[j] = np.bincount(c_in, weights=a0[inside], minlength=M)
        c_int[j] = np.bincount(c_in, weights=a1[inside], minlength=M)
        c_free[j] = np.bincount(c_in, weights=(w * ratio)[inside], minlength=M)
        outside_mass[j] = w[~inside].sum()
        legacy.append(LegacyConditionals(cells, a0, a1))

    p_ratio = np.zeros_like(p_s2)
    p_ratio[p_inside] = np.exp(p_llr[p_inside] - log_scale[p_cells[p_inside]])
    pw = support.weights
    a1_new = pw * p_p1 * p_ratio
    d = np.bincount(p_cells[p_inside], weights=a1_new[p_inside], minlength=M)
    d_free = np.bincount(p_cells[p_inside], weights=(pw * p_ratio)[p_inside], minlength=M)
    idx = np.flatnonzero(p_inside)
    birth = BirthConditionals(p_cells[idx], idx, a1_new[idx])

    unit = np.exp(-log_scale)  # the normalized f0, rescaled
    for name, arr in (("b", b_int), ("c", c_int), ("d", d)):
        if not np.all(np.isfinite(arr)):
            bad = np.argwhere(~np.isfinite(arr))[:5].tolist()
            raise NumericWeightError(f"non-finite {name} integral at {bad}")
    weights = AssociationWeights(
        beta_exist1=r[:, None] * c_int,
        beta_exist0=r[:, None] * b_int,
        beta_empty=1.0 - r,
        beta_new=unit + d,
        b=b_int, c=c_int, d=d,
        beta_outside=r * outside_mass,
        log_scale=log_scale,
        c_free=c_free, d_free=d_free,
    )
    return WeightComputation(weights, tuple(legacy), birth)


def pmbf_a_mode(weights: AssociationWeights, enabled: bool = True) -> AssociationWeights:
    """Contribution-free weights: every located object contributes.

    Every contribution factor becomes one, so the non-contributing branches
    vanish and the contributing integrals lose their contribution factor.
    """
    if not enabled:
        return weights
    if weights.c_free is None or weights.d_free is None:
        raise ValueError("weights carry no contribution-free integrals")
    r = 1.0 - weights.beta_empty
    unit = np.exp(-weights.log_scale)
    return AssociationWeights(
        beta_exist1=r[:, None] * weights.c_free,
        beta_exist0=np.zeros_like(weights.beta_exist0),
        beta_empty=weights.beta_empty,
        beta_new=unit + weights.d_free,
        b=np.zeros_like(weights.beta_exist0), c=weights.c_free, d=weights.d_free,
        beta_outside=weights.beta_outside,
        log_scale=weights.log_scale,
        c_free=weights.c_free, d_free=weights.d_free,
    )


def new_existence(weights: AssociationWeights) -> np.ndarray:
    """Existence probability ``d / (f0 + d)`` of each cell's new-object candidate."""
    d = weights.d
    unit = np.exp(-weights.log_scale)
    return d / (unit + d)


def birth_components(phd_pred: PoissonIntensity, weights: AssociationWeights,
                     birth: BirthConditionals, floor: float = BIRTH_FLOOR,
                     particle_budget: int | None = None,
                     rng: np.random.Generator | None = None,
                     label_start: int | None = None):
    """New-object candidates, one per cell whose ``d / f0`` exceeds ``floor``.

    Returns ``(cells, components)``; the spatial pdf of each candidate is the
    PHD particles of its cell reweighted by contribution and likelihood.
    """
    unit = np.exp(-weights.log_scale)
    r_new = new_existence(weights)
    cand = np.flatnonzero(weights.d > floor * unit)
    if cand.size == 0:
        return np.empty(0, dtype=np.int64), []
    order = np.argsort(birth.cells, kind="stable")
    sorted_cells = birth.cells[order]
    starts = np.searchsorted(sorted_cells, cand, side="left")
    stops = np.searchsorted(sorted_cells, cand, side="right")
    states = phd_pred.support.states
    comps = []
    for n, (m, lo, hi) in enumerate(zip(cand, starts, stops)):
        sel = order[lo:hi]
        spatial = WeightedParticleSet.from_unnormalized(states[birth.index[sel]],
                                                        birth.a1[sel])
        if particle_budget is not None:
            spatial = resample(spatial, particle_budget, rng)
        label = None if label_start is None else label_start + n
        comps.append(BernoulliComponent(float(r_new[m]), spatial, label))
    return cand, comps


def _legacy_posterior(bern: BernoulliComponent, cond: LegacyConditionals,
                      weights: AssociationWeights, beliefs: BeliefTable, j: int):
    r = float(beliefs.existence[j])
    cells = cond.cells
    inside = cells >= 0
    c_in = cells[inside]
    post = np.zeros_like(cond.a0)
    with np.errstate(divide="ignore", invalid="ignore"):
        k1 = np.where(weights.c[j] > 0, beliefs.exist1[j] / weights.c[j], 0.0)
        k0 = np.where(weights.b[j] > 0, beliefs.exist0[j] / weights.b[j], 0.0)
    post[inside] = k1[c_in] * cond.a1[inside] + k0[c_in] * cond.a0[inside]
    out_mass = bern.spatial.weights[~inside].sum()
    if out_mass > 0:
        post[~inside] = beliefs.outside[j] * bern.spatial.weights[~inside] / out_mass
    total = post.sum()
    if not total > 0 or not np.isfinite(total):
        # existence collapsed onto "nonexistent"; the pdf is immaterial
        return min(max(r, 0.0), 1.0), bern.spatial
    spatial = WeightedParticleSet(bern.spatial.states, post / total, normalized=True)
    return min(max(r, 0.0), 1.0), spatial


def reduce_to_pmb(pred: PMBPosterior, comp: WeightComputation, beliefs: BeliefTable,
                  new_cells: np.ndarray, new_components: Sequence[BernoulliComponent],
                  particle_budget: int | None = None,
                  rng: np.random.Generator | None = None) -> PMBPosterior:
    """Collapse the association-conditioned posterior into one Bernoulli per component.

    The PHD is left as predicted; see :func:`update_phd`.
    """
    out = []
    for j, (bern, cond) in enumerate(zip(pred.bernoullis, comp.legacy)):
        r, spatial = _legacy_posterior(bern, cond, comp.weights, beliefs, j)
        if particle_budget is not None and spatial.total_weight > 0:
            spatial = resample(spatial, particle_budget, rng)
        out.append(BernoulliComponent(r, spatial, bern.label))
    for m, nb in zip(new_cells, new_components):
        r = float(beliefs.new[m]) * nb.r
        out.append(BernoulliComponent(min(max(r, 0.0), 1.0), nb.spatial, nb.label))
    return PMBPosterior(pred.poisson, out, pred.time_index)


def update_phd(phd_pred: PoissonIntensity, grid: CellGrid, table: ContributionTable,
               noise: NoiseModel) -> PoissonIntensity:
    """Scale each PHD particle by its probability of not contributing; zero outside the grid."""
    support = phd_pred.support
    if not len(support):
        return phd_pred
    cells, _, p1 = poisson_contribution_probs(support.states, support.weights, grid, noise,
                                              table)
    w = np.where(cells >= 0, support.weights * (1.0 - p1), 0.0)
    keep = w > 0
    return PoissonIntensity(WeightedParticleSet(support.states[keep], w[keep]),
                            phd_pred.capacity)


def recycle(p: PMBPosterior, threshold: float) -> PMBPosterior:
    """Move Bernoullis with ``r < threshold`` into the PHD, scaled by ``r``."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold {threshold} outside [0, 1]")
    keep, moved = [], [p.poisson.support]
    for b in p.bernoullis:
        if b.r < threshold:
            if b.r > 0:
                moved.append(b.spatial.scaled(b.r))
        else:
            keep.append(b)
    if len(keep) == len(p.bernoullis):
        return p
    phd = PoissonIntensity(WeightedParticleSet.concatenate(moved), p.poisson.capacity)
    return PMBPosterior(phd, keep, p.time_index)


def extract_estimates(p: PMBPosterior, declare_threshold: float = 0.5) -> EstimateSet:
    chosen = [b for b in p.bernoullis if b.r >= declare_threshold]
    if not chosen:
        return EstimateSet()
    return EstimateSet(tuple(b.label for b in chosen),
                       np.array([b.spatial.mean() for b in chosen]),
                       np.array([b.r for b in chosen]))


def write_snapshot(posterior: PMBPosterior, path=None) -> str:
    """Posterior summary as CSV: one row per Bernoulli and a final PHD mass row."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "r", "px", "py", "vx", "vy", "gamma"])
    for b in posterior.bernoullis:
        w.writerow([b.label, repr(b.r)] + [repr(float(v)) for v in b.spatial.mean()])
    w.writerow(["phd_mass", repr(posterior.poisson.mass), "", "", "", "", ""])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


# -- filter driver -------------------------------------------------------------

@dataclass(frozen=True)
class FilterConfig:
    grid: CellGrid
    noise: NoiseModel = NoiseModel()
    transition: TransitionModel = field(default_factory=TransitionModel)
    birth: BirthModel | None = None
    bernoulli_particles: int = 3000
    phd_capacity: int = 50_000
    recycle_threshold: float = 0.1
    declare_threshold: float = 0.5
    birth_floor: float = BIRTH_FLOOR
    bp: BpConfig = BpConfig()
    contributions: bool = True

    def __post_init__(self):
        if self.birth is None:
            object.__setattr__(self, "birth", BirthModel(self.grid.extent))
        if self.bernoulli_particles < 1 or self.phd_capacity < 1:
            raise ValueError("particle budgets must be positive")
        for name in ("recycle_threshold", "declare_threshold"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


@dataclass(frozen=True)
class StepResult:
    posterior: PMBPosterior
    estimates: EstimateSet
    bp_iterations: int
    bp_converged: bool


class PMBFilter:
    """Particle PMB track-before-detect filter.

    ``contributions=False`` in the config gives the contribution-free
    association filter used as the baseline.
    """

    def __init__(self, cfg: FilterConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        self.posterior = PMBPosterior.empty(cfg.phd_capacity)
        self._next_label = 0

    def step(self, frame: Frame) -> StepResult:
        cfg = self.cfg
        if frame.grid != cfg.grid:
            raise ValueError("frame grid differs from the filter grid")
        pred = predict(self.posterior, cfg.transition, cfg.birth, self.rng)
        table = mean_contributions(pred, cfg.grid, cfg.noise)
        if not cfg.contributions:
            table = table.without_contributions()
        comp = compute_weights(pred, frame, table, cfg.noise)
        beliefs = run_bp(comp.weights, cfg.bp)

        new_cells, births = birth_components(pred.poisson, comp.weights, comp.birth,
                                             cfg.birth_floor, label_start=self._next_label)
        self._next_label += len(births)
        # resampling waits until after recycling, so recycled mass skips it
        post = reduce_to_pmb(pred, comp, beliefs, new_cells, births)
        post = PMBPosterior(update_phd(pred.poisson, cfg.grid, table, cfg.noise),
                            post.bernoullis, post.time_index)
        post = recycle(post, cfg.recycle_threshold)
        post = self._resample(post)
        self.posterior = post
        return StepResult(post, extract_estimates(post, cfg.declare_threshold),
                          beliefs.iterations, beliefs.converged)

    def _resample(self, post: PMBPosterior) -> PMBPosterior:
        cfg = self.cfg
        berns = []
        for b in post.bernoullis:
            spatial = b.spatial
            if len(spatial) != cfg.bernoulli_particles or np.ptp(spatial.weights) > 0:
                spatial = resample(spatial, cfg.bernoulli_particles, self.rng)
            berns.append(BernoulliComponent(b.r, spatial, b.label))
        phd = post.poisson
        if len(phd.support) > cfg.phd_capacity and phd.mass > 0:
            phd = PoissonIntensity(resample(phd.support, cfg.phd_capacity, self.rng),
                                   phd.capacity)
        return PMBPosterior(phd, berns, post.time_index)
