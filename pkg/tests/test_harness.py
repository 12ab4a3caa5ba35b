import csv
import json
import os

import numpy as np
import pytest

from tbdpmb import cli
from tbdpmb.harness import (RUN_COLUMNS, THREADS_ENV, ConfigError, aggregate, compare_modes,
                            config_from_dict, default_window, filter_config, load_config,
                            paired_summary, resolve_threads, run_experiment, run_single,
                            run_streams, with_overrides, write_atomic)
from tbdpmb.scenario import preset

TINY_SCENARIO = """\
name = "tiny"
num_steps = 12
gamma = 10.0
cross_step = 6

[grid]
nx = 6
ny = 6

[[object]]
birth = 2
death = 12
state = [1.5, 2.5, 0.25, 0.1, 10.0]

[[object]]
birth = 2
death = 12
state = [4.5, 3.5, -0.25, -0.1, 10.0]
"""

TINY_CONFIG = """\
scenario = "tiny.toml"
num_runs = 3
seed = 7

[filter]
bernoulli_particles = 60
phd_capacity = 400
birth_particles = 400
"""


@pytest.fixture
def tiny(tmp_path):
    (tmp_path / "tiny.toml").write_text(TINY_SCENARIO)
    path = tmp_path / "exp.toml"
    path.write_text(TINY_CONFIG)
    return path


def _read(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestConfig:
    def test_loads_shipped_configs(self):
        for name in ("desk-s1", "desk-s2", "paper-s1", "paper-s2"):
            cfg = load_config(f"configs/{name}.toml")
            assert cfg.scenario == name
            assert cfg.gospa.c == 10.0 and cfg.gospa.alpha == 2.0
        assert load_config("configs/desk-s1.toml").num_runs == 50

    def test_scenario_path_relative_to_config(self, tiny):
        cfg = load_config(tiny)
        assert cfg.resolved_scenario().name == "tiny"

    @pytest.mark.parametrize("doc,where", [
        ({}, "scenario"),
        ({"scenario": "desk-s1", "mode": "x"}, "mode"),
        ({"scenario": "desk-s1", "num_runs": 0}, "num_runs"),
        ({"scenario": "desk-s1", "seed": -1}, "seed"),
        ({"scenario": "desk-s1", "filter": {"bernoulli_particles": 0}},
         "filter.bernoulli_particles"),
        ({"scenario": "desk-s1", "filter": {"recycle_threshold": 2.0}},
         "filter.recycle_threshold"),
        ({"scenario": "desk-s1", "filter": {"bp": {"damping": 1.5}}}, "filter.bp"),
        ({"scenario": "desk-s1", "filter": {"bogus": 1}}, "filter.bogus"),
        ({"scenario": "desk-s1", "gospa": {"alpha": 3.0}}, "gospa"),
        ({"scenario": "missing.toml"}, "scenario"),
        ({"scenario": "desk-s1", "interaction_window": [9, 3]}, "interaction_window"),
    ])
    def test_errors_name_the_field(self, doc, where):
        with pytest.raises(ConfigError) as info:
            config_from_dict(doc)
        assert str(info.value).startswith(where)

    def test_overrides(self):
        cfg = config_from_dict({"scenario": "desk-s1"})
        assert with_overrides(cfg, seed=5, num_runs=None).seed == 5
        with pytest.raises(ConfigError):
            with_overrides(cfg, mode="other")

    def test_digest_tracks_content(self):
        a = config_from_dict({"scenario": "desk-s1"})
        assert a.digest() == config_from_dict({"scenario": "desk-s1"}).digest()
        assert a.digest() != with_overrides(a, seed=1).digest()

    def test_filter_config_mode(self):
        cfg = config_from_dict({"scenario": "desk-s1"})
        s = preset("desk-s1")
        assert filter_config(cfg, s, "pmbf-ac").contributions
        assert not filter_config(cfg, s, "pmbf-a").contributions

    def test_threads_from_env(self, monkeypatch):
        monkeypatch.setenv(THREADS_ENV, "3")
        assert resolve_threads(None) == 3
        assert resolve_threads(2) == 2
        monkeypatch.delenv(THREADS_ENV)
        assert resolve_threads(None) == 1
        with pytest.raises(ConfigError):
            resolve_threads(0)


class TestRuns:
    def test_streams_depend_on_seed_and_run_only(self):
        a = [g.random() for g in run_streams(3, 1)]
        assert a == [g.random() for g in run_streams(3, 1)]
        assert a != [g.random() for g in run_streams(3, 2)]
        assert a[0] != a[1]

    def test_modes_see_identical_frames(self, tiny):
        cfg = load_config(tiny)
        ac = run_single(cfg, "pmbf-ac", 0)
        a = run_single(cfg, "pmbf-a", 0)
        # truth counts come from the shared scenario; both modes run every step
        assert [r[7] for r in ac] == [r[7] for r in a]
        assert [r[1] for r in ac] == list(range(1, 13))

    def test_outputs_byte_identical_across_threads(self, tiny, tmp_path):
        cfg = load_config(tiny)
        r1 = run_experiment(cfg, threads=1, out_dir=tmp_path / "one")
        r1b = run_experiment(cfg, threads=1, out_dir=tmp_path / "again")
        r2 = run_experiment(cfg, threads=2, out_dir=tmp_path / "two")
        text = r1.run_csv.read_bytes()
        assert text == r1b.run_csv.read_bytes() == r2.run_csv.read_bytes()
        assert r1.aggregate_csv.read_bytes() == r2.aggregate_csv.read_bytes()

    def test_csv_layout_and_manifest(self, tiny, tmp_path):
        res = run_experiment(load_config(tiny), out_dir=tmp_path)
        rows = _read(res.run_csv)
        assert tuple(rows[0]) == RUN_COLUMNS
        assert len(rows) == 1 + 3 * 12
        man = json.loads(res.manifest.read_text())
        assert man["seed"] == 7 and man["num_runs"] == 3
        assert man["config_hash"] == load_config(tiny).digest()
        assert man["wall_time_s"] >= 0

    def test_aggregate_is_mean(self):
        rows = [(0, 1, 2.0, 1.0, 1.0, 0.0, 1, 1, 0.1, 2, 3),
                (1, 1, 4.0, 3.0, 0.0, 1.0, 2, 1, 0.3, 4, 5),
                (0, 2, 6.0, 6.0, 0.0, 0.0, 1, 1, 0.2, 1, 1)]
        agg = aggregate(rows)
        assert agg[0][:2] == (1, 2)
        np.testing.assert_allclose(agg[0][2:], [3.0, 2.0, 0.5, 0.5, 1.5, 1.0, 0.2, 3.0, 4.0])
        np.testing.assert_allclose(agg[1][2:], [6.0, 6.0, 0, 0, 1, 1, 0.2, 1, 1])

    def test_write_atomic_leaves_no_temp(self, tmp_path):
        target = tmp_path / "sub" / "out.csv"
        write_atomic(target, "a,b\n")
        write_atomic(target, "c,d\n")
        assert target.read_text() == "c,d\n"
        assert os.listdir(target.parent) == ["out.csv"]


class TestComparison:
    def test_paired_summary(self):
        def rows(totals, missed):
            return [(r, k, totals[r][k - 1], 0.0, missed[r][k - 1], 0.0, 0, 0, 0.0, 0, 0)
                    for r in range(len(totals)) for k in range(1, 4)]
        ac = rows([[1, 1, 1], [2, 2, 2], [1, 2, 1]], [[0, 0, 0]] * 3)
        a = rows([[3, 3, 3], [5, 4, 6], [2, 3, 5]], [[0, 5, 0], [0, 10, 0], [0, 0, 0]])
        cmp = paired_summary(ac, a, (1, 3), 2)
        assert cmp.mean_total_ac < cmp.mean_total_a
        assert cmp.missed_margin == pytest.approx(5.0)
        assert 0 < cmp.p_value < 0.05
        assert len(cmp.rows) == 9

    def test_default_window(self):
        assert default_window(preset("desk-s1")) == (35, 45)
        assert default_window(preset("single-object")) == (1, 40)

    def test_compare_writes_files(self, tiny, tmp_path):
        cmp = compare_modes(load_config(tiny), out_dir=tmp_path)
        assert cmp.window == (1, 11)
        for name in ("pmbf-ac_runs.csv", "pmbf-a_runs.csv", "comparison.csv",
                     "comparison_summary.json"):
            assert (tmp_path / name).is_file()
        summary = json.loads((tmp_path / "comparison_summary.json").read_text())
        assert summary["mean_total_ac"] == cmp.mean_total_ac


class TestCli:
    def test_run(self, tiny, tmp_path, capsys):
        out = tmp_path / "cli"
        assert cli.main(["run", "--config", str(tiny), "--runs", "1", "--mode", "pmbf-a",
                         "--out", str(out), "--threads", "1"]) == 0
        assert len(_read(out / "pmbf-a_runs.csv")) == 13
        assert "wrote" in capsys.readouterr().out

    def test_bad_config_exit_code(self, tmp_path, capsys):
        path = tmp_path / "bad.toml"
        path.write_text('scenario = "desk-s1"\nnum_runs = 0\n')
        assert cli.main(["run", "--config", str(path)]) == 2
        assert "num_runs" in capsys.readouterr().err

    def test_simulate(self, tmp_path):
        assert cli.main(["simulate", "--scenario", "single-object", "--out",
                         str(tmp_path), "--seed", "4"]) == 0
        truth = _read(tmp_path / "truth.csv")
        assert truth[0] == ["k", "id", "px", "py", "vx", "vy", "gamma"]
        assert len(truth) == 1 + 38
        assert len(list(tmp_path.glob("frame_*.csv"))) == 40

    def test_gospa(self, tmp_path, capsys):
        (tmp_path / "t.csv").write_text("k,px,py\n1,0,0\n2,0,0\n2,5,5\n")
        (tmp_path / "e.csv").write_text("k,px,py\n1,3,4\n")
        assert cli.main(["gospa", "--truth", str(tmp_path / "t.csv"),
                         "--est", str(tmp_path / "e.csv")]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0] == "k,total,loc,missed,false"
        assert lines[1] == "1,5.0,5.0,0.0,0.0"
        assert lines[2] == "2,10.0,0.0,10.0,0.0"
