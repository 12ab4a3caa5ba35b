"""GOSPA error between a true and an estimated set of 2-D positions."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment


@dataclass(frozen=True)
class GospaConfig:
    c: float = 10.0
    p: float = 1.0
    alpha: float = 2.0

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError("cutoff c must be positive")
        if not self.p >= 1:
            raise ValueError("order p must be >= 1")
        if not 0 < self.alpha <= 2:
            raise ValueError("alpha must lie in (0, 2]")


@dataclass(frozen=True)
class GospaResult:
    """GOSPA error and its decomposition.

    For ``alpha = 2`` the three parts are reported in the ``p``-th power and
    then mapped back, so ``total == localization + missed + false_`` holds
    exactly for ``p = 1``.
    """

    total: float
    localization: float
    missed: float
    false_: float
    assignment: tuple = ()


def _positions(x) -> np.ndarray:
    if hasattr(x, "positions"):
        x = x.positions()
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return np.empty((0, 2))
    return x.reshape(-1, x.shape[-1])[:, :2]


def gospa(truth, est, cfg: GospaConfig = GospaConfig()) -> GospaResult:
    """GOSPA between ``truth`` and ``est``.

    Both arguments may be ``(n, >=2)`` arrays or objects with a
    ``positions()`` method (ground-truth frames, estimate sets).  Only the
    first two coordinates enter the distance.
    """
    X = _positions(truth)
    Y = _positions(est)
    c_p = cfg.c ** cfg.p
    nx, ny = len(X), len(Y)
    if nx == 0 or ny == 0:
        missed = nx * c_p / cfg.alpha
        false = ny * c_p / cfg.alpha
        return GospaResult(float((missed + false) ** (1 / cfg.p)), 0.0, missed, false)

    d = np.linalg.norm(X[:, None, :] - Y[None, :, :], axis=2)
    cost = np.minimum(d, cfg.c) ** cfg.p
    rows, cols = linear_sum_assignment(cost)
    # a cut-off pair is no better than leaving both unassigned when alpha = 2
    matched = d[rows, cols] < cfg.c
    loc = float(cost[rows[matched], cols[matched]].sum())
    n_match = int(matched.sum())
    missed = (nx - n_match) * c_p / cfg.alpha
    false = (ny - n_match) * c_p / cfg.alpha
    # pairs at distance >= c cost c**p, equal to one miss plus one false at alpha = 2
    cut = float(cost[rows[~matched], cols[~matched]].sum())
    total_p = loc + missed + false + cut - (~matched).sum() * 2 * c_p / cfg.alpha
    pairs = tuple((int(i), int(j)) for i, j in zip(rows[matched], cols[matched]))
    return GospaResult(float(total_p ** (1 / cfg.p)), loc, missed, false, pairs)
