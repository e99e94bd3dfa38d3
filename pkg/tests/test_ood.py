import numpy as np
import pytest
from hypothesis import given, strategies as st

from elab.ood import OodScoreSet, auroc, fpr_at_tpr, score_logits


def brute_auroc(ins, oods):
    wins = 0.0
    for o in oods:
        for i in ins:
            wins += 1.0 if o > i else 0.5 if o == i else 0.0
    return wins / (len(ins) * len(oods))


def brute_fpr(ins, oods, target):
    best = None
    for t in sorted(set(ins) | set(oods)):
        if sum(o >= t for o in oods) / len(oods) >= target:
            best = t
    return sum(i >= best for i in ins) / len(ins)


def random_set(gen, n_max=200):
    n_in, n_ood = gen.integers(1, n_max + 1, size=2)
    # a coarse grid makes ties common
    ins = gen.integers(0, 40, n_in) / 4.0
    oods = gen.integers(5, 45, n_ood) / 4.0
    return OodScoreSet(ins, oods)


def test_score_examples():
    assert score_logits([[3.0, 1.0, -1.0]])[0] == -3.0
    assert score_logits([[0.0, 0.0]], "max_prob")[0] == -0.5
    Z = np.random.default_rng(0).normal(size=(30, 4)) * 5
    assert np.all(score_logits(Z, "free_energy") <= score_logits(Z))
    with pytest.raises(ValueError):
        score_logits(Z, "nope")


def test_auroc_examples():
    assert auroc(OodScoreSet([0, 1], [2, 3])) == 1.0
    assert auroc(OodScoreSet([1, 2, 2, 5], [2, 1, 5, 2])) == 0.5
    with pytest.raises(ValueError):
        auroc(OodScoreSet([], [1.0]))


def test_fpr_examples():
    assert fpr_at_tpr(OodScoreSet(range(10), range(10, 20))) == 0.0
    assert fpr_at_tpr(OodScoreSet([1, 1, 1, 1], [1, 1, 1, 1])) == 1.0
    with pytest.raises(ValueError):
        fpr_at_tpr(OodScoreSet([1], [1]), 0.0)


@pytest.mark.parametrize("seed", range(100))
def test_metrics_match_brute_force_exactly(seed):
    s = random_set(np.random.default_rng(seed))
    ins, oods = s.in_scores.tolist(), s.ood_scores.tolist()
    assert auroc(s) == brute_auroc(ins, oods)
    assert fpr_at_tpr(s) == brute_fpr(ins, oods, 0.95)


@given(st.integers(0, 10_000))
def test_auroc_invariances(seed):
    s = random_set(np.random.default_rng(seed), 60)
    flipped = OodScoreSet(s.ood_scores, s.in_scores)
    assert auroc(s) + auroc(flipped) == 1.0
    monotone = OodScoreSet(np.exp(s.in_scores) * 3 + 1, np.exp(s.ood_scores) * 3 + 1)
    assert auroc(monotone) == auroc(s)


@given(st.integers(0, 10_000), st.floats(0.05, 1.0), st.floats(0.05, 1.0))
def test_fpr_monotone_in_target(seed, a, b):
    s = random_set(np.random.default_rng(seed), 60)
    lo, hi = min(a, b), max(a, b)
    assert fpr_at_tpr(s, lo) <= fpr_at_tpr(s, hi)
