import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tbdpmb.gospa import GospaConfig, gospa
from tbdpmb.state import GroundTruthFrame, ObjectState
from tbdpmb.update import EstimateSet


def partial_assignment_oracle(X, Y, c, p):
    """alpha = 2 GOSPA by enumerating every partial injection of X into Y."""
    best = None
    for k in range(min(len(X), len(Y)) + 1):
        for xs in itertools.combinations(range(len(X)), k):
            for ys in itertools.permutations(range(len(Y)), k):
                cost = sum(np.linalg.norm(X[i] - Y[j]) ** p for i, j in zip(xs, ys))
                cost += c ** p / 2 * (len(X) + len(Y) - 2 * k)
                best = cost if best is None else min(best, cost)
    return best ** (1 / p)


def permutation_oracle(X, Y, c, p, alpha):
    """General-alpha GOSPA: cut-off distances over full permutations of the larger set."""
    if len(X) > len(Y):
        X, Y = Y, X
    best = np.inf
    for perm in itertools.permutations(range(len(Y)), len(X)):
        cost = sum(min(np.linalg.norm(X[i] - Y[j]), c) ** p for i, j in enumerate(perm))
        best = min(best, cost)
    if not len(X):
        best = 0.0
    return (best + c ** p / alpha * (len(Y) - len(X))) ** (1 / p)


def _points(rng, n, spread=15.0):
    return rng.uniform(0, spread, (n, 2))


class TestExamples:
    def test_both_empty(self):
        r = gospa(np.empty((0, 2)), np.empty((0, 2)))
        assert (r.total, r.localization, r.missed, r.false_) == (0, 0, 0, 0)

    def test_single_missed(self):
        r = gospa([[1.0, 1.0]], np.empty((0, 2)))
        assert r.missed == 5.0 and r.total == 5.0 and r.false_ == 0

    def test_matched_at_three(self):
        r = gospa([[0.0, 0.0]], [[3.0, 0.0]])
        assert r.localization == pytest.approx(3.0) and r.total == pytest.approx(3.0)
        assert r.assignment == ((0, 0),)

    def test_pair_beyond_cutoff(self):
        r = gospa([[0.0, 0.0]], [[30.0, 0.0]])
        assert (r.missed, r.false_, r.localization) == (5.0, 5.0, 0.0)
        assert r.total == pytest.approx(10.0)

    def test_accepts_domain_types(self):
        truth = GroundTruthFrame(1, {0: ObjectState(1, 1, 0, 0, 10), 1: ObjectState(5, 5, 0, 0, 10)})
        est = EstimateSet(("a",), np.array([[1.0, 2.0, 0, 0, 9]]), np.array([0.9]))
        r = gospa(truth, est)
        assert r.localization == pytest.approx(1.0) and r.missed == 5.0

    def test_velocity_ignored(self):
        a = gospa([[1, 1, 0, 0, 5]], [[1, 1, 9, 9, 50]])
        assert a.total == 0.0

    def test_config_validation(self):
        for kw in ({"c": 0}, {"p": 0.5}, {"alpha": 0}, {"alpha": 3}):
            with pytest.raises(ValueError):
                GospaConfig(**kw)


class TestOracle:
    def test_alpha_two_matches_enumeration(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            X, Y = _points(rng, rng.integers(0, 5)), _points(rng, rng.integers(0, 5))
            p = float(rng.choice([1, 2]))
            cfg = GospaConfig(c=float(rng.uniform(1, 12)), p=p)
            assert gospa(X, Y, cfg).total == pytest.approx(
                partial_assignment_oracle(X, Y, cfg.c, p), abs=1e-9)

    def test_general_alpha_matches_enumeration(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            X, Y = _points(rng, rng.integers(0, 5)), _points(rng, rng.integers(0, 5))
            cfg = GospaConfig(c=float(rng.uniform(1, 12)), p=float(rng.uniform(1, 3)),
                              alpha=float(rng.uniform(0.2, 2)))
            assert gospa(X, Y, cfg).total == pytest.approx(
                permutation_oracle(X, Y, cfg.c, cfg.p, cfg.alpha), abs=1e-9)

    def test_oracles_agree_at_alpha_two(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            X, Y = _points(rng, rng.integers(0, 4)), _points(rng, rng.integers(0, 4))
            assert partial_assignment_oracle(X, Y, 4.0, 1) == pytest.approx(
                permutation_oracle(X, Y, 4.0, 1, 2.0), abs=1e-12)


class TestProperties:
    @settings(max_examples=150, deadline=None)
    @given(st.integers(0, 5), st.integers(0, 5), st.integers(0, 2**32 - 1))
    def test_decomposition(self, nx, ny, seed):
        rng = np.random.default_rng(seed)
        r = gospa(_points(rng, nx), _points(rng, ny))
        assert abs(r.total - (r.localization + r.missed + r.false_)) <= 1e-9
        assert min(r.localization, r.missed, r.false_) >= 0

    @settings(max_examples=150, deadline=None)
    @given(st.integers(0, 5), st.integers(0, 5), st.integers(0, 2**32 - 1))
    def test_symmetry(self, nx, ny, seed):
        rng = np.random.default_rng(seed)
        X, Y = _points(rng, nx), _points(rng, ny)
        a, b = gospa(X, Y), gospa(Y, X)
        assert a.total == pytest.approx(b.total, abs=1e-12)
        assert a.missed == pytest.approx(b.false_) and a.false_ == pytest.approx(b.missed)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**32 - 1))
    def test_monotone_in_cutoff(self, nx, ny, seed):
        rng = np.random.default_rng(seed)
        X, Y = _points(rng, nx), _points(rng, ny)
        totals = [gospa(X, Y, GospaConfig(c=c)).total for c in (1, 2, 5, 10, 20, 50)]
        assert np.all(np.diff(totals) >= -1e-12)

    def test_identical_sets(self):
        X = _points(np.random.default_rng(3), 6)
        assert gospa(X, X[::-1]).total == pytest.approx(0.0, abs=1e-12)
