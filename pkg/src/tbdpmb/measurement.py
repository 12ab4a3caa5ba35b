"""Cell-grid measurement model for Swerling 1 objects.

Each object deposits its intensity into the single cell it occupies.  Cell
intensities are Rayleigh distributed, with scale ``sigma0`` for noise-only
cells and ``sqrt(gamma + sigma0**2)`` when an object contributes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .state import GAMMA, PX, PY, ObjectState, PMBPosterior

#: component index standing for the Poisson (undetected-object) part of a cell
POISSON = -1

MEMBER_MASS_FLOOR = 1e-6


class OracleConvergenceError(ArithmeticError):
    """The eta -> 0 extrapolation did not settle."""


@dataclass(frozen=True)
class CellGrid:
    nx: int
    ny: int
    cell_size: float = 1.0
    origin: tuple = (0.0, 0.0)

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ValueError(f"grid needs at least one cell, got {self.nx}x{self.ny}")
        if not self.cell_size > 0:
            raise ValueError(f"cell_size must be positive, got {self.cell_size}")
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))

    @property
    def num_cells(self) -> int:
        return self.nx * self.ny

    @property
    def extent(self) -> tuple:
        """``(xmin, xmax, ymin, ymax)`` of the covered region."""
        x0, y0 = self.origin
        return (x0, x0 + self.nx * self.cell_size, y0, y0 + self.ny * self.cell_size)

    def cell_index(self, px, py) -> np.ndarray:
        """Row-major cell index of each position, -1 outside the grid.

        Cells are half-open ``[lo, hi)`` in both axes.
        """
        px = np.asarray(px, dtype=float)
        py = np.asarray(py, dtype=float)
        ix = np.floor((px - self.origin[0]) / self.cell_size)
        iy = np.floor((py - self.origin[1]) / self.cell_size)
        inside = (ix >= 0) & (ix < self.nx) & (iy >= 0) & (iy < self.ny)
        idx = np.where(inside, iy * self.nx + ix, -1)
        return idx.astype(np.int64)

    def cells_of(self, states: np.ndarray) -> np.ndarray:
        return self.cell_index(states[:, PX], states[:, PY])

    def cell_center(self, m: int) -> tuple:
        iy, ix = divmod(int(m), self.nx)
        return (self.origin[0] + (ix + 0.5) * self.cell_size,
                self.origin[1] + (iy + 0.5) * self.cell_size)

    def contains(self, px, py) -> np.ndarray:
        return self.cell_index(px, py) >= 0


@dataclass(frozen=True)
class NoiseModel:
    sigma0: float = 1.0

    def __post_init__(self):
        if not self.sigma0 > 0:
            raise ValueError(f"sigma0 must be positive, got {self.sigma0}")

    @property
    def variance(self) -> float:
        return self.sigma0 ** 2


@dataclass(frozen=True)
class Frame:
    grid: CellGrid
    z: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float).reshape(-1)
        if z.shape[0] != self.grid.num_cells:
            raise ValueError(f"frame has {z.shape[0]} cells, grid has {self.grid.num_cells}")
        if np.any(z < 0) or not np.all(np.isfinite(z)):
            raise ValueError("cell intensities must be finite and nonnegative")
        object.__setattr__(self, "z", z)

    def image(self) -> np.ndarray:
        """Intensities as an ``(ny, nx)`` array."""
        return self.z.reshape(self.grid.ny, self.grid.nx)


# -- single-object quantities -------------------------------------------------

def psf(x: ObjectState, m: int, grid: CellGrid) -> float:
    """Power deposited by ``x`` in cell ``m``: its intensity if inside, else 0."""
    _check_cell(m, grid)
    return x.gamma if int(grid.cell_index(x.px, x.py)) == m else 0.0


def sigma_m(x: ObjectState, m: int, grid: CellGrid, noise: NoiseModel) -> float:
    return math.sqrt(psf(x, m, grid) + noise.variance)


def rayleigh_pdf(z, scale) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    scale = np.asarray(scale, dtype=float)
    s2 = scale * scale
    return z / s2 * np.exp(-0.5 * z * z / s2)


def _check_z(z):
    if np.any(np.asarray(z) < 0):
        raise ValueError("cell intensity must be nonnegative")


def _check_cell(m, grid):
    if not 0 <= m < grid.num_cells:
        raise IndexError(f"cell {m} outside grid of {grid.num_cells} cells")


def noise_likelihood(z, noise: NoiseModel):
    """Noise-only density f0(z)."""
    _check_z(z)
    out = rayleigh_pdf(z, noise.sigma0)
    return float(out) if out.ndim == 0 else out


def signal_likelihood(z, x: ObjectState, m: int, grid: CellGrid, noise: NoiseModel):
    """Density f1(z | x) of cell ``m`` when ``x`` contributes to it."""
    _check_z(z)
    out = rayleigh_pdf(z, sigma_m(x, m, grid, noise))
    return float(out) if out.ndim == 0 else out


def log_likelihood_ratio(z, sigma_sq, sigma0_sq: float) -> np.ndarray:
    """``log f1(z)/f0(z)`` for Rayleigh scales ``sqrt(sigma_sq)`` and ``sqrt(sigma0_sq)``."""
    z = np.asarray(z, dtype=float)
    sigma_sq = np.asarray(sigma_sq, dtype=float)
    return np.log(sigma0_sq / sigma_sq) + 0.5 * z * z * (1.0 / sigma0_sq - 1.0 / sigma_sq)


def detection_probability(eta: float, x: ObjectState, m: int, grid: CellGrid,
                          noise: NoiseModel) -> float:
    """Probability that cell ``m`` exceeds ``eta`` when ``x`` contributes."""
    if eta < 0:
        raise ValueError("threshold must be nonnegative")
    s = sigma_m(x, m, grid, noise)
    return math.exp(-0.5 * eta * eta / (s * s))


# -- contribution probabilities -----------------------------------------------

def contribution_pmf_thresholded(eta: float, sigmas: Sequence[float]) -> np.ndarray:
    """Contribution pmf of ``n`` co-located objects at detection threshold ``eta``.

    Entry ``i`` is the probability that only object ``i`` exceeds ``eta``,
    conditioned on exactly one of them doing so.  Evaluated in the log
    domain because both numerator and normalizer vanish as ``eta -> 0``.
    """
    sigmas = np.asarray(sigmas, dtype=float).reshape(-1)
    if sigmas.size == 0:
        raise ValueError("need at least one object in the cell")
    if not eta > 0:
        raise ValueError("threshold must be positive")
    if sigmas.size == 1:
        return np.ones(1)
    t = 0.5 * eta * eta / (sigmas * sigmas)
    log_det = -t
    with np.errstate(divide="ignore"):
        log_miss = np.log(-np.expm1(-t))
    if not np.all(np.isfinite(log_miss)):
        raise FloatingPointError(
            f"miss probability underflows at eta={eta!r}; normalizer not representable")
    log_num = log_det - log_miss + log_miss.sum()
    shift = log_num.max()
    terms = np.exp(log_num - shift)
    norm = math.fsum(terms)
    if not norm > 0 or not np.isfinite(norm):
        raise FloatingPointError(f"contribution normalizer underflow at eta={eta!r}")
    return terms / norm


def contribution_pmf_swerling(sigmas_sq: Sequence[float]) -> np.ndarray:
    """Limiting contribution pmf: each object's share of the summed variances."""
    s = np.asarray(sigmas_sq, dtype=float).reshape(-1)
    if s.size == 0:
        raise ValueError("need at least one object in the cell")
    if np.any(s <= 0):
        raise ValueError("cell variances must be positive")
    return s / math.fsum(s)


def contribution_limit_oracle(sigmas_sq: Sequence[float],
                              etas: Sequence[float] = (1e-2, 1e-3, 1e-4)) -> np.ndarray:
    """Numerical ``eta -> 0`` limit of :func:`contribution_pmf_thresholded`.

    The thresholded pmf is analytic in ``eta**2``, so values at a decreasing
    ``eta`` sequence are Richardson-extrapolated in that variable.
    """
    s = np.asarray(sigmas_sq, dtype=float).reshape(-1)
    if s.size == 0:
        raise ValueError("need at least one object in the cell")
    etas = np.asarray(etas, dtype=float)
    if etas.size < 2 or np.any(np.diff(etas) >= 0):
        raise ValueError("etas must be a strictly decreasing sequence of length >= 2")
    sigmas = np.sqrt(s)
    table = [np.array([contribution_pmf_thresholded(e, sigmas) for e in etas])]
    h = etas ** 2

    diffs = [np.max(np.abs(table[0][i + 1] - table[0][i])) for i in range(len(etas) - 1)]
    for a, b in zip(diffs, diffs[1:]):
        if b > a and b > 1e-13:
            raise OracleConvergenceError(
                f"successive differences grow ({a:.3e} -> {b:.3e}) for sigmas_sq={s}")

    # Neville-style extrapolation to h = 0
    level = table[0]
    for order in range(1, len(etas)):
        nxt = []
        for i in range(len(level) - 1):
            h_hi, h_lo = h[i], h[i + order]
            nxt.append((h_hi * level[i + 1] - h_lo * level[i]) / (h_hi - h_lo))
        level = np.array(nxt)
    return level[0]


# -- per-component mean contributions -----------------------------------------

@dataclass(frozen=True)
class ContributionTable:
    """Mean contributions of every predicted component to every cell.

    ``sigma_bar_sq[j, m]`` belongs to Bernoulli ``j``; ``poisson_sigma_bar_sq[m]``
    to the Poisson part of cell ``m``.  The matching ``*_mass`` arrays hold the
    in-cell probability mass used to decide which components compete in a cell.
    With ``contributions=False`` every located object contributes with
    probability one (the contribution-free association model).
    """

    sigma_bar_sq: np.ndarray
    poisson_sigma_bar_sq: np.ndarray
    mass: np.ndarray
    poisson_mass: np.ndarray
    member_floor: float = MEMBER_MASS_FLOOR
    contributions: bool = True
    _members: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        num_cells = np.asarray(self.poisson_sigma_bar_sq).shape[0]
        sb = np.asarray(self.sigma_bar_sq, dtype=float).reshape(-1, num_cells)
        mass = np.asarray(self.mass, dtype=float).reshape(-1, num_cells)
        object.__setattr__(self, "sigma_bar_sq", sb)
        object.__setattr__(self, "mass", mass)
        if np.any(sb < 0) or np.any(np.asarray(self.poisson_sigma_bar_sq) < 0):
            raise ValueError("mean contributions must be nonnegative")
        object.__setattr__(self, "_members", mass > self.member_floor)

    @property
    def num_cells(self) -> int:
        return self.poisson_sigma_bar_sq.shape[0]

    @property
    def num_components(self) -> int:
        return self.sigma_bar_sq.shape[0]

    def members(self, m: int) -> list:
        """Components able to occupy cell ``m`` (``POISSON`` for the Poisson part)."""
        out = [int(j) for j in np.flatnonzero(self._members[:, m])]
        if self.poisson_mass[m] > self.member_floor:
            out.append(POISSON)
        return out

    def legacy_competition(self) -> np.ndarray:
        """Summed mean contribution of all member Bernoullis, per cell."""
        return np.where(self._members, self.sigma_bar_sq, 0.0).sum(axis=0)

    def bernoulli_competitors(self) -> np.ndarray:
        """``(J, M)`` competitor sums seen by each Bernoulli in each cell."""
        own = np.where(self._members, self.sigma_bar_sq, 0.0)
        if not self.contributions:
            return np.zeros_like(own)
        poisson = np.where(self.poisson_mass > self.member_floor,
                           self.poisson_sigma_bar_sq, 0.0)
        total = own.sum(axis=0) + poisson
        return np.maximum(total[None, :] - own, 0.0)

    def without_contributions(self) -> "ContributionTable":
        return ContributionTable(self.sigma_bar_sq, self.poisson_sigma_bar_sq, self.mass,
                                 self.poisson_mass, self.member_floor, contributions=False)


def cell_variance(states: np.ndarray, grid: CellGrid, noise: NoiseModel):
    """Cell index and ``sigma_m(x)**2`` in the occupied cell for each particle."""
    cells = grid.cells_of(states)
    gamma = np.maximum(states[:, GAMMA], 0.0)
    s2 = noise.variance + np.where(cells >= 0, gamma, 0.0)
    return cells, s2


def _cell_sums(cells: np.ndarray, values: np.ndarray, num_cells: int) -> np.ndarray:
    inside = cells >= 0
    return np.bincount(cells[inside], weights=values[inside], minlength=num_cells)


def mean_contributions(posterior: PMBPosterior, grid: CellGrid, noise: NoiseModel,
                       member_floor: float = MEMBER_MASS_FLOOR) -> ContributionTable:
    """Average contribution of each predicted component to each cell."""
    M = grid.num_cells
    J = len(posterior.bernoullis)
    sigma_bar = np.zeros((J, M))
    mass = np.zeros((J, M))
    for j, b in enumerate(posterior.bernoullis):
        cells, s2 = cell_variance(b.spatial.states, grid, noise)
        w = b.spatial.weights
        sigma_bar[j] = b.r * _cell_sums(cells, w * s2, M)
        mass[j] = b.r * _cell_sums(cells, w, M)
    support = posterior.poisson.support
    if len(support):
        cells, s2 = cell_variance(support.states, grid, noise)
        p_sigma = _cell_sums(cells, support.weights * s2, M)
        p_mass = _cell_sums(cells, support.weights, M)
    else:
        p_sigma = np.zeros(M)
        p_mass = np.zeros(M)
    return ContributionTable(sigma_bar, p_sigma, mass, p_mass, member_floor)


def contribution_probability(sigma_sq, competitor_sum) -> np.ndarray:
    """Approximate probability that an object of variance ``sigma_sq`` contributes."""
    sigma_sq = np.asarray(sigma_sq, dtype=float)
    return sigma_sq / (sigma_sq + np.asarray(competitor_sum, dtype=float))


def marginal_contribution_prob(j: int, m: int, theta: int, x: ObjectState,
                               table: ContributionTable, grid: CellGrid,
                               noise: NoiseModel,
                               members: Iterable[int] | None = None) -> float:
    """Marginal probability that component ``j`` at state ``x`` does (``theta=1``)
    or does not (``theta=0``) contribute to cell ``m``.

    ``j`` is a Bernoulli index or :data:`POISSON`.  ``members`` overrides the
    table's competitor set for the cell.  A single state carries no particle
    weight, so a Poisson component competes against the full Poisson mean.
    """
    if theta not in (0, 1):
        raise ValueError("theta must be 0 or 1")
    if int(grid.cell_index(x.px, x.py)) != m:
        raise ValueError(f"state {x} is not in cell {m}")
    if not table.contributions:
        p1 = 1.0
    else:
        members = table.members(m) if members is None else list(members)
        competitors = math.fsum(table.sigma_bar_sq[jj, m] for jj in members
                                if jj != POISSON and jj != j)
        # the Poisson part always competes with its own mean contribution
        if POISSON in members or j == POISSON:
            competitors += table.poisson_sigma_bar_sq[m]
        s2 = sigma_m(x, m, grid, noise) ** 2
        p1 = float(contribution_probability(s2, competitors))
    return p1 if theta == 1 else 1.0 - p1


# -- frame serialization ------------------------------------------------------

_HEADER = "nx,ny,cell_size,origin_x,origin_y"


def save_frame(frame: Frame, path) -> None:
    """Write a frame as CSV (header, grid line, then ``ny`` rows of ``nx`` values)
    or as raw float64 when the suffix is ``.bin``."""
    path = Path(path)
    g = frame.grid
    header = [g.nx, g.ny, g.cell_size, g.origin[0], g.origin[1]]
    if path.suffix == ".bin":
        np.concatenate([np.array(header, dtype="<f8"), frame.z.astype("<f8")]).tofile(path)
        return
    lines = [_HEADER, ",".join(repr(float(v)) if i >= 2 else str(v) for i, v in enumerate(header))]
    for row in frame.image():
        lines.append(",".join(repr(float(v)) for v in row))
    path.write_text("\n".join(lines) + "\n")


def load_frame(path) -> Frame:
    path = Path(path)
    if path.suffix == ".bin":
        raw = np.fromfile(path, dtype="<f8")
        nx, ny = int(raw[0]), int(raw[1])
        grid = CellGrid(nx, ny, float(raw[2]), (float(raw[3]), float(raw[4])))
        return Frame(grid, raw[5:5 + nx * ny])
    lines = path.read_text().strip().splitlines()
    if lines[0].strip() != _HEADER:
        raise ValueError(f"{path}: missing frame header")
    vals = lines[1].split(",")
    grid = CellGrid(int(vals[0]), int(vals[1]), float(vals[2]), (float(vals[3]), float(vals[4])))
    z = np.array([[float(v) for v in line.split(",")] for line in lines[2:]])
    return Frame(grid, z.reshape(-1))
