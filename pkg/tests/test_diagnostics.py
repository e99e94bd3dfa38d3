import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from elab.diagnostics import (EnergyRecord, class_energy_table, ece, ece_from_confidence,
                              energy_records, margin_histogram, margin_records,
                              mean_class_energy)
from elab.network import accuracy, init_mlp


def brute_ece(conf, correct, bins):
    """Straight-line reimplementation with explicit bin membership tests."""
    n = len(conf)
    counts, terms = [], []
    for b in range(bins):
        lo, hi = b / bins, (b + 1) / bins
        members = [i for i in range(n)
                   if lo <= conf[i] < hi or (b == bins - 1 and conf[i] == hi)]
        counts.append(len(members))
        if members:
            c = math.fsum(conf[i] for i in members) / len(members)
            a = sum(1 for i in members if correct[i]) / len(members)
            terms.append(len(members) / n * abs(a - c))
    return math.fsum(terms), counts


def test_margin_examples():
    recs = margin_records(np.array([[3.0, 1.0, -1.0], [1.0, 3.0, -1.0], [2.0, 2.0, 0.0]]),
                          [0, 0, 0])
    assert [(r.margin, r.correct) for r in recs] == [(2.0, True), (-2.0, False), (0.0, False)]


def test_margin_histogram():
    assert margin_histogram([2.0, -2.0], 1.0) == [(-2.0, -1.0, 1), (2.0, 3.0, 1)]
    assert margin_histogram([], 1.0) == []
    vals = np.random.default_rng(0).normal(size=500) * 10
    assert sum(c for _, _, c in margin_histogram(vals, 0.7)) == 500
    with pytest.raises(ValueError):
        margin_histogram([1.0], 0.0)


@given(st.lists(st.floats(-30, 30), min_size=3, max_size=3), st.floats(-50, 50))
def test_margin_shift_invariance(z, c):
    Z = np.array([z])
    a = margin_records(Z, [1])[0].margin
    b = margin_records(Z + c, [1])[0].margin
    assert b == pytest.approx(a, abs=1e-9)


def test_energy_examples():
    r = energy_records(np.array([[3.0, 1.0, -1.0]]), [0])[0]
    assert r.label_energy == -3.0 and r.min_energy == -3.0
    assert r.free_energy == pytest.approx(-3.1429316, abs=1e-7)


@given(st.lists(st.floats(-30, 30), min_size=2, max_size=6), st.data())
def test_energy_inequalities(z, data):
    y = data.draw(st.integers(0, len(z) - 1))
    r = energy_records(np.array([z]), [y])[0]
    assert r.free_energy <= r.min_energy <= r.label_energy


def test_mean_class_energy():
    one = [EnergyRecord(0, -3.0, -3.0, -3.1)]
    assert mean_class_energy(one, [0], 0) == -3.0
    two = [EnergyRecord(0, -2.0, 0, 0), EnergyRecord(1, -4.0, 0, 0)]
    assert mean_class_energy(two, [1, 1], 1) == -3.0
    assert mean_class_energy(two[::-1], [1, 1], 1) == -3.0
    with pytest.raises(ValueError):
        mean_class_energy(two, [1, 1], 0)


def test_class_energy_table_covers_all_pairs():
    Z = np.array([[3.0, 1.0, 0.0], [1.0, 5.0, 2.0], [2.0, 0.0, 4.0]])
    t = class_energy_table(Z, [0, 1, 0], 3)
    assert t[0].tolist() == [-2.5, -0.5, -2.0] and t[1].tolist() == [-1.0, -5.0, -2.0]
    assert np.isnan(t[2]).all()


def test_ece_examples():
    assert ece_from_confidence([1.0] * 4, [True] * 4).ece == 0.0
    rep = ece_from_confidence([0.8] * 10, [True] * 5 + [False] * 5)
    assert rep.ece == pytest.approx(0.3, abs=1e-12)
    assert rep.n == 10
    with pytest.raises(ValueError):
        ece_from_confidence([], [])
    with pytest.raises(ValueError):
        ece_from_confidence([0.5], [True], bins=0)


@pytest.mark.parametrize("seed", range(100))
def test_ece_matches_brute_force_exactly(seed):
    gen = np.random.default_rng(seed)
    n = int(gen.integers(1, 300))
    conf = gen.random(n)
    # force edge cases onto bin boundaries
    conf[: n // 5] = gen.integers(0, 16, size=n // 5) / 15
    correct = gen.random(n) < conf
    bins = 15 if seed % 2 else int(gen.integers(1, 30))
    rep = ece_from_confidence(conf, correct, bins)
    expect, counts = brute_ece(conf.tolist(), correct.tolist(), bins)
    assert rep.ece == expect
    assert counts == rep.counts.tolist()
    assert rep.counts.sum() == n


def test_model_ece_and_accuracy_consistency():
    m = init_mlp([2, 8, 3], 0)
    gen = np.random.default_rng(1)
    X, y = gen.normal(size=(80, 2)), gen.integers(0, 3, 80)
    rep = ece(m, X, y)
    assert 0.0 <= rep.ece <= 1.0 and rep.n == 80
    from elab.diagnostics import margins
    recs = margins(m, X, y)
    assert accuracy(m, X, y) == sum(r.correct for r in recs) / 80
