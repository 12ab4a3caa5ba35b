"""Ground-truth trajectories and simulated cell-intensity frames.

Frames follow a superimposed data model: a cell holding objects with
intensities ``gamma_i`` is Rayleigh distributed with scale
``sum(sqrt(gamma_i)) + sigma_n``; an empty cell has scale ``sigma_n``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .measurement import CellGrid, Frame
from .prediction import ncv_matrices
from .state import GroundTruthFrame, ObjectState

MOTIONS = ("cv", "ncv")


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class ObjectScript:
    """One object: alive for steps ``birth..death`` (inclusive), starting at ``initial``.

    ``motion="cv"`` moves at constant velocity; ``"ncv"`` adds white
    acceleration noise of variance ``q`` drawn from the scenario seed.
    """

    birth: int
    death: int
    initial: ObjectState
    motion: str = "cv"
    q: float = 0.0

    def __post_init__(self):
        if self.motion not in MOTIONS:
            raise ScenarioError(f"unknown motion {self.motion!r}, expected one of {MOTIONS}")
        if not self.birth < self.death:
            raise ScenarioError(f"birth {self.birth} must precede death {self.death}")
        if self.q < 0:
            raise ScenarioError("motion noise must be nonnegative")


@dataclass(frozen=True)
class Scenario:
    grid: CellGrid
    num_steps: int
    objects: tuple = ()
    gamma: float = 10.0
    sigma_n: float = 1.0
    seed: int = 0
    name: str = "scenario"
    cross_step: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        if self.num_steps < 1:
            raise ScenarioError("num_steps must be >= 1")
        if not self.sigma_n > 0:
            raise ScenarioError("sigma_n must be positive")
        if self.gamma < 0:
            raise ScenarioError("object intensity must be nonnegative")
        for i, o in enumerate(self.objects):
            if o.birth < 1 or o.death > self.num_steps:
                raise ScenarioError(
                    f"object {i}: lifetime [{o.birth}, {o.death}] outside 1..{self.num_steps}")

    @property
    def roi(self) -> tuple:
        return self.grid.extent

    def with_gamma(self, gamma: float) -> "Scenario":
        """Copy with every object's intensity set to ``gamma``."""
        objects = [replace(o, initial=replace(o.initial, gamma=gamma))
                   for o in self.objects]
        return Scenario(self.grid, self.num_steps, objects, gamma, self.sigma_n,
                        self.seed, self.name, self.cross_step)


def _trajectory(o: ObjectScript, steps: int, rng: np.random.Generator) -> np.ndarray:
    A, W = ncv_matrices()
    x = o.initial.as_array()[:4]
    out = np.empty((steps, 4))
    out[0] = x
    for t in range(1, steps):
        x = A @ x
        if o.motion == "ncv" and o.q > 0:
            x = x + W @ rng.normal(0.0, math.sqrt(o.q), 2)
        out[t] = x
    return out


def generate_truth(s: Scenario) -> list:
    """Ground truth for steps ``1..num_steps``; deterministic given ``s.seed``."""
    rng = np.random.default_rng(np.random.SeedSequence([s.seed, 0x7275]))
    frames = [dict() for _ in range(s.num_steps)]
    xmin, xmax, ymin, ymax = s.roi
    for i, o in enumerate(s.objects):
        traj = _trajectory(o, o.death - o.birth + 1, rng)
        gamma = o.initial.gamma
        for t, row in enumerate(traj):
            k = o.birth + t
            if not (xmin <= row[0] < xmax and ymin <= row[1] < ymax):
                raise ScenarioError(f"object {i} leaves the ROI at step {k}: {row[:2]}")
            frames[k - 1][i] = ObjectState(row[0], row[1], row[2], row[3], gamma)
    return [GroundTruthFrame(k + 1, f) for k, f in enumerate(frames)]


def cell_scales(truth: GroundTruthFrame, grid: CellGrid, sigma_n: float) -> np.ndarray:
    """Rayleigh scale of every cell: summed amplitudes of the occupants plus ``sigma_n``."""
    amp = np.zeros(grid.num_cells)
    for s in truth.objects.values():
        m = int(grid.cell_index(s.px, s.py))
        if m >= 0:
            amp[m] += math.sqrt(s.gamma)
    return amp + sigma_n


def render_frame(truth: GroundTruthFrame, grid: CellGrid, sigma_n: float,
                 rng: np.random.Generator) -> Frame:
    return Frame(grid, rng.rayleigh(cell_scales(truth, grid, sigma_n)))


def simulate(s: Scenario, rng: np.random.Generator):
    truth = generate_truth(s)
    frames = [render_frame(t, s.grid, s.sigma_n, rng) for t in truth]
    return truth, frames


def occupancy_at(truth: GroundTruthFrame, grid: CellGrid) -> np.ndarray:
    """Number of objects in each cell."""
    counts = np.zeros(grid.num_cells, dtype=int)
    for s in truth.objects.values():
        m = int(grid.cell_index(s.px, s.py))
        if m >= 0:
            counts[m] += 1
    return counts


# -- radial crossing presets ----------------------------------------------------

def radial_crossing(grid: CellGrid, num_objects: int, num_steps: int, cross_step: int,
                    speed: float, births, deaths, gamma: float, sigma_n: float = 1.0,
                    center=None, angle_offset: float = math.pi / 4, seed: int = 0,
                    name: str = "crossing") -> Scenario:
    """Objects on a circle heading through ``center``, all reaching it at ``cross_step``."""
    if center is None:
        xmin, xmax, ymin, ymax = grid.extent
        # middle of a cell, so the crossing objects share it
        center = grid.cell_center(grid.cell_index((xmin + xmax) / 2, (ymin + ymax) / 2))
    cx, cy = center
    births = list(births)
    deaths = list(deaths)
    if len(births) != num_objects or len(deaths) != num_objects:
        raise ScenarioError("need one birth and one death step per object")
    objects = []
    for i in range(num_objects):
        phi = angle_offset + 2 * math.pi * i / num_objects
        ux, uy = math.cos(phi), math.sin(phi)
        lead = speed * (cross_step - births[i])
        objects.append(ObjectScript(
            births[i], deaths[i],
            ObjectState(cx + lead * ux, cy + lead * uy, -speed * ux, -speed * uy, gamma)))
    return Scenario(grid, num_steps, objects, gamma, sigma_n, seed, name, cross_step)


def _spread(lo: int, hi: int, n: int) -> list:
    return [int(round(v)) for v in np.linspace(lo, hi, n)]


def preset(name: str) -> Scenario:
    """Built-in scenarios: ``paper-s1``, ``paper-s2``, ``desk-s1``, ``desk-s2``,
    ``single-object``."""
    if name in ("paper-s1", "paper-s2"):
        gamma = 10.0 if name.endswith("s1") else 4.0
        return radial_crossing(CellGrid(32, 32), 10, 200, 100, 0.18,
                               _spread(15, 29, 10), _spread(171, 185, 10), gamma, name=name)
    if name in ("desk-s1", "desk-s2"):
        gamma = 10.0 if name.endswith("s1") else 4.0
        return radial_crossing(CellGrid(16, 16), 4, 80, 40, 0.15,
                               _spread(2, 11, 4), _spread(69, 78, 4), gamma, name=name)
    if name == "single-object":
        obj = ObjectScript(3, 40, ObjectState(5.5, 6.5, 0.1, 0.05, 10.0))
        return Scenario(CellGrid(16, 16), 40, [obj], 10.0, 1.0, 0, name)
    raise KeyError(f"unknown preset {name!r}")


PRESETS = ("paper-s1", "paper-s2", "desk-s1", "desk-s2", "single-object")


# -- scenario files -------------------------------------------------------------

def scenario_from_dict(doc: dict, where: str = "scenario") -> Scenario:
    if "preset" in doc:
        s = preset(doc["preset"])
        if "gamma" in doc:
            s = s.with_gamma(float(doc["gamma"]))
        return s
    try:
        g = doc["grid"]
        grid = CellGrid(int(g["nx"]), int(g["ny"]), float(g.get("cell_size", 1.0)),
                        tuple(g.get("origin", (0.0, 0.0))))
        gamma = float(doc.get("gamma", 10.0))
        objects = []
        for i, o in enumerate(doc.get("object", [])):
            st = list(o["state"])
            if len(st) == 4:
                st.append(gamma)
            objects.append(ObjectScript(int(o["birth"]), int(o["death"]),
                                        ObjectState(*map(float, st)),
                                        o.get("motion", "cv"), float(o.get("q", 0.0))))
        return Scenario(grid, int(doc["num_steps"]), objects, gamma,
                        float(doc.get("sigma_n", 1.0)), int(doc.get("seed", 0)),
                        doc.get("name", "scenario"), doc.get("cross_step"))
    except KeyError as exc:
        raise ScenarioError(f"{where}: missing field {exc.args[0]!r}") from None


def load_scenario(path_or_name) -> Scenario:
    """Read a TOML scenario file, or return a preset when given its name."""
    if str(path_or_name) in PRESETS:
        return preset(str(path_or_name))
    path = Path(path_or_name)
    with path.open("rb") as fh:
        doc = tomllib.load(fh)
    return scenario_from_dict(doc, str(path))


def scenario_to_toml(s: Scenario) -> str:
    lines = [f'name = "{s.name}"', f"num_steps = {s.num_steps}", f"gamma = {s.gamma!r}",
             f"sigma_n = {s.sigma_n!r}", f"seed = {s.seed}"]
    if s.cross_step is not None:
        lines.append(f"cross_step = {s.cross_step}")
    g = s.grid
    lines += ["", "[grid]", f"nx = {g.nx}", f"ny = {g.ny}", f"cell_size = {g.cell_size!r}",
              f"origin = [{g.origin[0]!r}, {g.origin[1]!r}]"]
    for o in s.objects:
        st = ", ".join(repr(float(v)) for v in o.initial.as_array())
        lines += ["", "[[object]]", f"birth = {o.birth}", f"death = {o.death}",
                  f"state = [{st}]", f'motion = "{o.motion}"', f"q = {o.q!r}"]
    return "\n".join(lines) + "\n"
