"""Monte-Carlo experiments: scenario -> filter -> GOSPA, written as CSV."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .association import BpConfig
from .gospa import GospaConfig, gospa
from .prediction import BirthModel, TransitionModel
from .scenario import PRESETS, Scenario, load_scenario, simulate
from .update import FilterConfig, PMBFilter

MODES = ("pmbf-ac", "pmbf-a")
THREADS_ENV = "TBDPMB_THREADS"
RUN_COLUMNS = ("run", "k", "total", "loc", "missed", "false", "est_count", "truth_count",
               "phd_mass", "bernoulli_count", "bp_iterations")


class ConfigError(ValueError):
    """Invalid experiment configuration; the message starts with the field path."""


@dataclass(frozen=True)
class FilterParams:
    bernoulli_particles: int = 3000
    phd_capacity: int = 50_000
    birth_particles: int = 50_000
    recycle_threshold: float = 0.1
    declare_threshold: float = 0.5
    birth_floor: float = 1e-4
    mu_b: float = 0.1
    sigma_v_sq: float = 0.1
    gamma_max: float = 30.0
    p_s: float = 0.999
    q_kin: float = 1e-3
    q_int: float = 1e-2
    bp: BpConfig = BpConfig()


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str
    mode: str = "pmbf-ac"
    filter: FilterParams = FilterParams()
    gospa: GospaConfig = GospaConfig()
    num_runs: int = 1
    seed: int = 0
    out_dir: str = "results"
    # inclusive step range for the paired comparison; default cross_step +- 5
    interaction_window: tuple | None = None

    def resolved_scenario(self) -> Scenario:
        return load_scenario(self.scenario)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["interaction_window"] = (None if self.interaction_window is None
                                   else list(self.interaction_window))
        return d

    def digest(self) -> str:
        canon = json.dumps(self.as_dict(), sort_keys=True, default=str)
        return hashlib.sha256(canon.encode()).hexdigest()


# -- config parsing ---------------------------------------------------------------

def _join(path: str, key: str) -> str:
    return f"{path}.{key}" if path else key


def _build(cls, doc: dict, path: str, nested: dict | None = None):
    nested = nested or {}
    known = {f for f in cls.__dataclass_fields__}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"{_join(path, sorted(unknown)[0])}: unknown field")
    kwargs = {}
    for key, value in doc.items():
        if key in nested:
            if not isinstance(value, dict):
                raise ConfigError(f"{_join(path, key)}: expected a table")
            kwargs[key] = _build(nested[key], value, _join(path, key))
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def _check(cond: bool, where: str, msg: str):
    if not cond:
        raise ConfigError(f"{where}: {msg}")


def config_from_dict(doc: dict, base_dir: Path | None = None) -> ExperimentConfig:
    doc = dict(doc)
    _check("scenario" in doc, "scenario", "required field missing")
    scen = str(doc["scenario"])
    if scen not in PRESETS:
        p = Path(scen)
        if not p.is_absolute() and base_dir is not None:
            p = base_dir / p
        _check(p.is_file(), "scenario", f"file {str(p)!r} does not exist")
        doc["scenario"] = str(p)
    mode = doc.get("mode", "pmbf-ac")
    _check(mode in MODES, "mode", f"expected one of {MODES}, got {mode!r}")
    runs = doc.get("num_runs", 1)
    _check(isinstance(runs, int) and runs >= 1, "num_runs", "must be an integer >= 1")
    seed = doc.get("seed", 0)
    _check(isinstance(seed, int) and seed >= 0, "seed", "must be a nonnegative integer")

    fdoc = doc.pop("filter", {})
    _check(isinstance(fdoc, dict), "filter", "expected a table")
    fp = _build(FilterParams, fdoc, "filter", {"bp": BpConfig})
    for name in ("bernoulli_particles", "phd_capacity", "birth_particles"):
        v = getattr(fp, name)
        _check(isinstance(v, int) and v >= 1, f"filter.{name}", "must be an integer >= 1")
    for name in ("recycle_threshold", "declare_threshold"):
        v = getattr(fp, name)
        _check(0.0 <= v <= 1.0, f"filter.{name}", "must lie in [0, 1]")
    _check(0.0 < fp.p_s <= 1.0, "filter.p_s", "must lie in (0, 1]")
    for name in ("mu_b", "sigma_v_sq", "gamma_max", "q_kin", "q_int", "birth_floor"):
        _check(getattr(fp, name) >= 0, f"filter.{name}", "must be nonnegative")

    gdoc = doc.pop("gospa", {})
    _check(isinstance(gdoc, dict), "gospa", "expected a table")
    gc = _build(GospaConfig, gdoc, "gospa")

    window = doc.get("interaction_window")
    if window is not None:
        _check(isinstance(window, (list, tuple)) and len(window) == 2 and window[0] <= window[1],
               "interaction_window", "expected [first_step, last_step]")
        doc["interaction_window"] = tuple(int(v) for v in window)
    doc["filter"] = fp
    doc["gospa"] = gc
    return _build(ExperimentConfig, doc, "")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    with path.open("rb") as fh:
        doc = tomllib.load(fh)
    return config_from_dict(doc, path.parent)


def filter_config(cfg: ExperimentConfig, scenario: Scenario, mode: str) -> FilterConfig:
    fp = cfg.filter
    grid = scenario.grid
    return FilterConfig(
        grid=grid,
        transition=TransitionModel(q_kin=fp.q_kin, q_int=fp.q_int, p_s=fp.p_s),
        birth=BirthModel(grid.extent, fp.mu_b, fp.sigma_v_sq, fp.gamma_max,
                         fp.birth_particles),
        bernoulli_particles=fp.bernoulli_particles,
        phd_capacity=fp.phd_capacity,
        recycle_threshold=fp.recycle_threshold,
        declare_threshold=fp.declare_threshold,
        birth_floor=fp.birth_floor,
        bp=fp.bp,
        contributions=(mode == "pmbf-ac"),
    )


# -- running ----------------------------------------------------------------------

def run_streams(seed: int, run: int):
    """Independent generators for the frames and for the filter of one run.

    Depending only on ``(seed, run)``, they give both filter modes the same
    frames (common random numbers) and make results independent of the
    worker count.
    """
    frames_seq, filter_seq = np.random.SeedSequence([seed, run]).spawn(2)
    return np.random.default_rng(frames_seq), np.random.default_rng(filter_seq)


def run_single(cfg: ExperimentConfig, mode: str, run: int) -> list:
    """Per-step rows of one Monte-Carlo run."""
    scenario = cfg.resolved_scenario()
    frame_rng, filter_rng = run_streams(cfg.seed, run)
    truth, frames = simulate(scenario, frame_rng)
    filt = PMBFilter(filter_config(cfg, scenario, mode), filter_rng)
    rows = []
    for t, frame in zip(truth, frames):
        res = filt.step(frame)
        g = gospa(t, res.estimates, cfg.gospa)
        rows.append((run, t.k, g.total, g.localization, g.missed, g.false_,
                     len(res.estimates), len(t.objects), res.posterior.poisson.mass,
                     len(res.posterior.bernoullis), res.bp_iterations))
    return rows


def _run_job(args):
    return run_single(*args)


def resolve_threads(threads: int | None) -> int:
    if threads is None:
        env = os.environ.get(THREADS_ENV)
        threads = int(env) if env else 1
    if threads < 1:
        raise ConfigError(f"threads: must be >= 1, got {threads}")
    return threads


def run_all(cfg: ExperimentConfig, mode: str, threads: int = 1) -> list:
    jobs = [(cfg, mode, run) for run in range(cfg.num_runs)]
    if threads == 1 or cfg.num_runs == 1:
        per_run = [_run_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            per_run = list(pool.map(_run_job, jobs))
    return [row for rows in per_run for row in rows]


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def rows_to_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def write_atomic(path, text: str) -> None:
    """Write via a temporary file in the target directory and rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def aggregate(rows) -> list:
    """Per-step means over runs of every metric column."""
    arr = np.array([r[1:] for r in rows], dtype=float)
    steps = np.unique(arr[:, 0]).astype(int)
    out = []
    for k in steps:
        sel = arr[arr[:, 0] == k]
        out.append((int(k), int(sel.shape[0]), *sel[:, 1:].mean(axis=0)))
    return out


@dataclass(frozen=True)
class ExperimentResult:
    rows: list
    run_csv: Path
    aggregate_csv: Path
    manifest: Path
    wall_time: float = field(default=0.0)


def run_experiment(cfg: ExperimentConfig, mode: str | None = None,
                   threads: int | None = None, out_dir=None) -> ExperimentResult:
    mode = mode or cfg.mode
    if mode not in MODES:
        raise ConfigError(f"mode: expected one of {MODES}, got {mode!r}")
    threads = resolve_threads(threads)
    out = Path(out_dir or cfg.out_dir)
    start = time.perf_counter()
    rows = run_all(cfg, mode, threads)
    wall = time.perf_counter() - start

    run_csv = out / f"{mode}_runs.csv"
    agg_csv = out / f"{mode}_aggregate.csv"
    write_atomic(run_csv, rows_to_csv(RUN_COLUMNS, rows))
    write_atomic(agg_csv, rows_to_csv(("k", "runs") + RUN_COLUMNS[2:], aggregate(rows)))
    manifest = out / f"{mode}_manifest.json"
    write_atomic(manifest, json.dumps({
        "mode": mode,
        "config_hash": cfg.digest(),
        "config": cfg.as_dict(),
        "seed": cfg.seed,
        "num_runs": cfg.num_runs,
        "threads": threads,
        "wall_time_s": wall,
        "files": [run_csv.name, agg_csv.name],
    }, indent=1, default=str) + "\n")
    return ExperimentResult(rows, run_csv, agg_csv, manifest, wall)


@dataclass(frozen=True)
class Comparison:
    window: tuple
    cross_step: int | None
    mean_total_ac: float
    mean_total_a: float
    p_value: float
    missed_margin: float | None
    rows: list


def _per_run(rows, col: str) -> dict:
    i = RUN_COLUMNS.index(col)
    out = {}
    for r in rows:
        out.setdefault(r[0], {})[r[1]] = r[i]
    return out


def paired_summary(rows_ac, rows_a, window: tuple, cross_step: int | None) -> Comparison:
    """Paired comparison of the two modes over ``window`` (inclusive steps)."""
    lo, hi = window
    tot_ac, tot_a = _per_run(rows_ac, "total"), _per_run(rows_a, "total")
    runs = sorted(tot_ac)
    ks = [k for k in sorted(tot_ac[runs[0]]) if lo <= k <= hi]
    if not ks:
        raise ValueError(f"interaction window {window} contains no steps")
    mean_ac = np.array([np.mean([tot_ac[r][k] for k in ks]) for r in runs])
    mean_a = np.array([np.mean([tot_a[r][k] for k in ks]) for r in runs])
    diff = mean_ac - mean_a
    if len(runs) > 1 and np.ptp(diff) > 0:
        p = float(stats.ttest_rel(mean_ac, mean_a, alternative="less").pvalue)
    else:
        p = 0.0 if np.all(diff < 0) else 1.0
    margin = None
    if cross_step is not None:
        mis_ac, mis_a = _per_run(rows_ac, "missed"), _per_run(rows_a, "missed")
        margin = float(np.mean([mis_a[r][cross_step] - mis_ac[r][cross_step] for r in runs]))
    cmp_rows = []
    miss_ac, miss_a = _per_run(rows_ac, "missed"), _per_run(rows_a, "missed")
    for r in runs:
        for k in sorted(tot_ac[r]):
            cmp_rows.append((r, k, tot_ac[r][k], tot_a[r][k], tot_ac[r][k] - tot_a[r][k],
                             miss_ac[r][k], miss_a[r][k], miss_ac[r][k] - miss_a[r][k]))
    return Comparison(window, cross_step, float(mean_ac.mean()), float(mean_a.mean()), p,
                      margin, cmp_rows)


def default_window(scenario: Scenario, half_width: int = 5) -> tuple:
    if scenario.cross_step is None:
        return (1, scenario.num_steps)
    return (max(1, scenario.cross_step - half_width),
            min(scenario.num_steps, scenario.cross_step + half_width))


def compare_modes(cfg: ExperimentConfig, threads: int | None = None,
                  out_dir=None) -> Comparison:
    """Run both modes on identical frames and write paired per-step differences."""
    out = Path(out_dir or cfg.out_dir)
    res_ac = run_experiment(cfg, "pmbf-ac", threads, out)
    res_a = run_experiment(cfg, "pmbf-a", threads, out)
    scenario = cfg.resolved_scenario()
    window = cfg.interaction_window or default_window(scenario)
    cmp = paired_summary(res_ac.rows, res_a.rows, window, scenario.cross_step)
    write_atomic(out / "comparison.csv", rows_to_csv(
        ("run", "k", "total_ac", "total_a", "diff_total", "missed_ac", "missed_a",
         "diff_missed"), cmp.rows))
    write_atomic(out / "comparison_summary.json", json.dumps({
        "window": list(window),
        "cross_step": cmp.cross_step,
        "mean_total_ac": cmp.mean_total_ac,
        "mean_total_a": cmp.mean_total_a,
        "paired_t_p_value": cmp.p_value,
        "missed_margin_at_cross_step": cmp.missed_margin,
        "config_hash": cfg.digest(),
    }, indent=1) + "\n")
    return cmp


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    kw = {k: v for k, v in kw.items() if v is not None}
    if "mode" in kw and kw["mode"] not in MODES:
        raise ConfigError(f"mode: expected one of {MODES}, got {kw['mode']!r}")
    if "num_runs" in kw and kw["num_runs"] < 1:
        raise ConfigError("num_runs: must be an integer >= 1")
    return replace(cfg, **kw)
