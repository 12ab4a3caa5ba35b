"""Marginal association probabilities between Bernoulli components and cells.

Each legacy Bernoulli ``j`` picks one of: not existing, located in cell ``m``
without contributing, or located in and contributing to cell ``m``.  Every
cell takes at most one legacy contributor; when none claims it, the cell is
explained by noise or by a newly detected (Poisson) object with weight
``beta_new[m]``.  :func:`run_bp` approximates the marginals by loopy belief
propagation, :func:`exact_marginals` enumerates them for small instances.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DENOMINATOR_FLOOR = 1e-300


class NumericWeightError(FloatingPointError):
    """Non-finite or degenerate association weights."""


class InstanceTooLargeError(ValueError):
    """Exact enumeration was asked for an instance beyond its budget."""


class BPConvergenceWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class AssociationWeights:
    """Association weights of one update.

    ``beta_exist1[j, m]`` / ``beta_exist0[j, m]``: legacy ``j`` in cell ``m``
    contributing / not contributing; ``beta_empty[j]``: ``j`` does not exist;
    ``beta_new[m]``: cell ``m`` explained by noise or a new object.  The
    ``beta_outside[j]``: ``j`` exists outside every cell.  The ``b``, ``c``,
    ``d`` integrals are kept for the posterior construction.  All
    cell-dependent weights are relative to the noise-only likelihood of the
    frame; ``log_scale[m]`` records any extra per-cell rescaling of the
    contributing weights and ``beta_new`` (exact, since every configuration
    picks exactly one of them per cell).
    """

    beta_exist1: np.ndarray
    beta_exist0: np.ndarray
    beta_empty: np.ndarray
    beta_new: np.ndarray
    b: np.ndarray | None = None
    c: np.ndarray | None = None
    d: np.ndarray | None = None
    beta_outside: np.ndarray | None = None
    log_scale: np.ndarray | None = None
    # contribution-free integrals, used by :func:`pmbf_a_mode`
    c_free: np.ndarray | None = None
    d_free: np.ndarray | None = None

    def __post_init__(self):
        beta_new = np.asarray(self.beta_new, dtype=float).reshape(-1)
        M = beta_new.shape[0]
        e1 = np.asarray(self.beta_exist1, dtype=float).reshape(-1, M)
        e0 = np.asarray(self.beta_exist0, dtype=float).reshape(-1, M)
        empty = np.asarray(self.beta_empty, dtype=float).reshape(-1)
        outside = (np.zeros_like(empty) if self.beta_outside is None
                   else np.asarray(self.beta_outside, dtype=float).reshape(-1))
        if outside.shape != empty.shape:
            raise ValueError("beta_outside must have one entry per legacy component")
        if not e1.shape == e0.shape or e1.shape[0] != empty.shape[0]:
            raise ValueError("inconsistent association weight shapes")
        for name, arr in (("beta_exist1", e1), ("beta_exist0", e0),
                          ("beta_empty", empty), ("beta_outside", outside),
                          ("beta_new", beta_new)):
            bad = ~np.isfinite(arr) | (arr < 0)
            if np.any(bad):
                where = np.argwhere(bad)[:5].tolist()
                raise NumericWeightError(f"{name} invalid at {where}: {arr[bad][:5]}")
        if np.any(empty > 1):
            raise ValueError("beta_empty must lie in [0, 1]")
        object.__setattr__(self, "beta_exist1", e1)
        object.__setattr__(self, "beta_exist0", e0)
        object.__setattr__(self, "beta_empty", empty)
        object.__setattr__(self, "beta_new", beta_new)
        object.__setattr__(self, "beta_outside", outside)
        if self.log_scale is None:
            object.__setattr__(self, "log_scale", np.zeros(M))

    @property
    def num_legacy(self) -> int:
        return self.beta_empty.shape[0]

    @property
    def num_cells(self) -> int:
        return self.beta_new.shape[0]

    def beta_absent(self) -> np.ndarray:
        """Weight of every non-contributing option of each legacy component."""
        return self.beta_empty + self.beta_outside + self.beta_exist0.sum(axis=1)

    def is_loop_free(self) -> bool:
        """True when each legacy component can contribute to at most one cell."""
        return bool(np.all((self.beta_exist1 > 0).sum(axis=1) <= 1))


@dataclass(frozen=True)
class BeliefTable:
    exist1: np.ndarray
    exist0: np.ndarray
    nonexist: np.ndarray
    new: np.ndarray
    iterations: int = 0
    converged: bool = True
    floored: bool = False
    outside: np.ndarray | None = None

    def __post_init__(self):
        if self.outside is None:
            object.__setattr__(self, "outside", np.zeros_like(self.nonexist))

    @property
    def existence(self) -> np.ndarray:
        return self.exist1.sum(axis=1) + self.exist0.sum(axis=1) + self.outside

    def legacy_pmf(self, j: int) -> np.ndarray:
        """``[nonexistent, outside, (cell 0, theta 0), (cell 0, theta 1), ...]``."""
        pairs = np.stack([self.exist0[j], self.exist1[j]], axis=1).reshape(-1)
        return np.concatenate([[self.nonexist[j], self.outside[j]], pairs])


@dataclass(frozen=True)
class BpConfig:
    max_iterations: int = 200
    convergence_tol: float = 1e-6
    damping: float = 0.0

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.convergence_tol > 0:
            raise ValueError("convergence_tol must be positive")
        if not 0 <= self.damping < 1:
            raise ValueError("damping must lie in [0, 1)")


@dataclass
class MessageState:
    zeta: np.ndarray  # legacy j -> cell m
    nu: np.ndarray  # cell m -> legacy j, stored as [j, m]
    floored: bool = field(default=False)


def _safe_divide(num, den, state: MessageState):
    small = den < DENOMINATOR_FLOOR
    if np.any(small):
        state.floored = True
        den = np.where(small, DENOMINATOR_FLOOR, den)
    return num / den


def run_bp(weights: AssociationWeights, cfg: BpConfig = BpConfig()) -> BeliefTable:
    beta1 = weights.beta_exist1
    beta_new = weights.beta_new
    J, M = beta1.shape
    absent = weights.beta_absent()

    if J == 0:
        return BeliefTable(np.zeros((0, M)), np.zeros((0, M)), np.zeros(0),
                           np.ones(M), iterations=0)

    state = MessageState(zeta=np.zeros((J, M)), nu=np.ones((J, M)))
    converged = False
    iterations = 0
    for iterations in range(1, cfg.max_iterations + 1):
        bn = beta1 * state.nu
        row = bn.sum(axis=1, keepdims=True)
        # exclude own cell; clamp the rounding residue of row - own
        others = np.maximum(row - bn, 0.0)
        state.zeta = _safe_divide(beta1, absent[:, None] + others, state)

        col = state.zeta.sum(axis=0, keepdims=True)
        den = beta_new[None, :] + np.maximum(col - state.zeta, 0.0)
        nu_new = _safe_divide(1.0, den, state)
        if cfg.damping > 0:
            nu_new = cfg.damping * state.nu + (1.0 - cfg.damping) * nu_new
        change = np.max(np.abs(np.log(nu_new) - np.log(state.nu)))
        state.nu = nu_new
        if change < cfg.convergence_tol:
            converged = True
            break

    if not converged:
        warnings.warn(f"BP did not converge within {cfg.max_iterations} iterations",
                      BPConvergenceWarning, stacklevel=2)

    # final zeta consistent with the final nu
    bn = beta1 * state.nu
    norm = absent + bn.sum(axis=1)
    if np.any(norm <= 0):
        bad = np.flatnonzero(norm <= 0).tolist()
        raise NumericWeightError(f"legacy components {bad} have all-zero weights")
    exist1 = bn / norm[:, None]
    exist0 = weights.beta_exist0 / norm[:, None]
    nonexist = weights.beta_empty / norm
    outside = weights.beta_outside / norm
    others = np.maximum(bn.sum(axis=1, keepdims=True) - bn, 0.0)
    zeta = _safe_divide(beta1, absent[:, None] + others, state)
    new = beta_new / (beta_new + zeta.sum(axis=0))
    return BeliefTable(exist1, exist0, nonexist, new, iterations=iterations,
                       converged=converged, floored=state.floored, outside=outside)


def exact_marginals(weights: AssociationWeights, max_configs: int = 10_000_000,
                    max_components: int = 6, max_cells: int = 6,
                    chunk: int = 1 << 18) -> BeliefTable:
    """Marginals by summing the joint weight over every admissible configuration."""
    J, M = weights.num_legacy, weights.num_cells
    if J > max_components or M > max_cells:
        raise InstanceTooLargeError(f"{J} components x {M} cells exceeds "
                                    f"{max_components} x {max_cells}")
    # options per component: (cell, theta, weight); cell -1 nonexistent, -2 outside
    options = []
    for j in range(J):
        cells, thetas, ws = [-1, -2], [0, 0], [weights.beta_empty[j], weights.beta_outside[j]]
        for m in range(M):
            for theta, w in ((0, weights.beta_exist0[j, m]), (1, weights.beta_exist1[j, m])):
                if w > 0:
                    cells.append(m)
                    thetas.append(theta)
                    ws.append(w)
        options.append((np.array(cells), np.array(thetas), np.array(ws, dtype=float)))
    shape = tuple(len(o[0]) for o in options)
    total = int(np.prod(shape, dtype=np.int64)) if shape else 1
    if total > max_configs:
        raise InstanceTooLargeError(f"{total} configurations exceeds {max_configs}")

    option_mass = [np.zeros(s) for s in shape]
    unclaimed_mass = np.zeros(M)
    z_total = 0.0
    for start in range(0, total, chunk):
        flat = np.arange(start, min(start + chunk, total))
        n = flat.shape[0]
        idx = np.unravel_index(flat, shape) if shape else ()
        w = np.ones(n)
        claims = np.zeros((n, M), dtype=np.int64)
        rows = np.arange(n)
        for j, (cells, thetas, ws) in enumerate(options):
            choice = idx[j]
            w = w * ws[choice]
            contributes = thetas[choice] == 1
            claims[rows[contributes], cells[choice][contributes]] += 1
        admissible = np.all(claims <= 1, axis=1)
        unclaimed = claims == 0
        w = w * np.where(admissible, 1.0, 0.0)
        w = w * np.prod(np.where(unclaimed, weights.beta_new[None, :], 1.0), axis=1)
        z_total += w.sum()
        unclaimed_mass += w @ unclaimed
        for j in range(J):
            option_mass[j] += np.bincount(idx[j], weights=w, minlength=shape[j])

    if not z_total > 0:
        raise NumericWeightError("association instance has zero total weight")
    exist1 = np.zeros((J, M))
    exist0 = np.zeros((J, M))
    nonexist = np.zeros(J)
    outside = np.zeros(J)
    for j, (cells, thetas, _) in enumerate(options):
        pm = option_mass[j] / z_total
        nonexist[j] = pm[0]
        outside[j] = pm[1]
        for k in range(2, len(cells)):
            target = exist1 if thetas[k] == 1 else exist0
            target[j, cells[k]] += pm[k]
    return BeliefTable(exist1, exist0, nonexist, unclaimed_mass / z_total, outside=outside)


def dump_instance(path, weights: AssociationWeights, beliefs: BeliefTable | None = None) -> None:
    """Write an association instance (and optionally its beliefs) as JSON."""
    doc = {
        "beta_exist1": weights.beta_exist1.tolist(),
        "beta_exist0": weights.beta_exist0.tolist(),
        "beta_empty": weights.beta_empty.tolist(),
        "beta_new": weights.beta_new.tolist(),
        "beta_outside": weights.beta_outside.tolist(),
    }
    if beliefs is not None:
        doc["beliefs"] = {
            "exist1": beliefs.exist1.tolist(),
            "exist0": beliefs.exist0.tolist(),
            "nonexist": beliefs.nonexist.tolist(),
            "new": beliefs.new.tolist(),
            "outside": beliefs.outside.tolist(),
            "iterations": beliefs.iterations,
            "converged": beliefs.converged,
            "floored": beliefs.floored,
        }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_instance(path) -> AssociationWeights:
    doc = json.loads(Path(path).read_text())
    M = len(doc["beta_new"])
    return AssociationWeights(np.array(doc["beta_exist1"], dtype=float).reshape(-1, M),
                              np.array(doc["beta_exist0"], dtype=float).reshape(-1, M),
                              np.array(doc["beta_empty"], dtype=float),
                              np.array(doc["beta_new"], dtype=float),
                              beta_outside=np.array(doc.get("beta_outside", []), dtype=float)
                              if doc.get("beta_outside") else None)
