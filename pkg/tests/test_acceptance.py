"""Acceptance suite: analytic oracle checks (1-8) and directional
desk-scale experiments (9-14). Each test records one pass/fail line, and
the lines are repeated in the terminal summary."""

import csv
import filecmp
import math
import os
import time
from dataclasses import replace

import mpmath
import numpy as np
import pytest

from elab import ood
from elab.attacks import AttackConfig, fgsm, pgd, robustness_curve
from elab.cli import main
from elab.diagnostics import ece_from_confidence
from elab.gradcheck import check_logits, check_mlp
from elab.losses import BonusSpec, LossSpec, loss_eval, steepness
from elab.manifest import RunManifest
from elab.network import init_mlp, probe_representation
from elab.numerics import softmax
from elab.pipeline import build_dataset, final_metrics, fit

from test_diagnostics import brute_ece
from test_ood import brute_auroc, brute_fpr

NORMAL = BonusSpec("normal")
CE = LossSpec("ce")
EL = LossSpec("el", bonus=NORMAL)
SEEDS = range(5)

GRADCHECK_SPECS = [
    CE,
    LossSpec("ce", label_smoothing=0.1),
    EL,
    *[LossSpec("el", bonus=BonusSpec("conservative", le=le)) for le in (0.25, 0.5, 0.75)],
    LossSpec("el", bonus=BonusSpec("aggressive", threshold=0.5)),
    LossSpec("focal", gamma_f=2.0),
    LossSpec("hfl", gamma_f=2.0, phi=0.5),
    *[LossSpec(f, normalization=n) for f in ("mse", "mse_mirror") for n in ("softmax", "sigmoid")],
]


def random_logits(gen, scale=5.0):
    k = int(gen.integers(2, 11))
    return gen.uniform(-scale, scale, k), int(gen.integers(0, k))


# ---- analytic / oracle suite ----

def test_c01_gradient_ratio_identity(criterion):
    gen = np.random.default_rng(1)
    start = time.perf_counter()
    worst, done = 0.0, 0
    while done < 1000:
        z, y = random_logits(gen, scale=8.0)
        ce = loss_eval(CE, z, y)
        if ce.p_label > 1 - 1e-6:
            continue
        el = loss_eval(EL, z, y)
        worst = max(worst, float(np.max(np.abs(el.grad_logits - ce.grad_logits / (1 - ce.p_label)))))
        done += 1
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-9 and elapsed < 1.0
    assert criterion(1, ok, f"max |grad_el - grad_ce/(1-p)| = {worst:.2e} over 1000 draws, "
                            f"{elapsed:.2f}s")


def test_c02_el_algebraic_identity(criterion):
    gen = np.random.default_rng(2)
    worst = 0.0
    for _ in range(1000):
        z, y = random_logits(gen)
        p = softmax(z)[y]
        lhs = -math.log(p) + math.log1p(-p)
        rest = [mpmath.mpf(float(v)) for k, v in enumerate(z) if k != y]
        rhs = float(-mpmath.mpf(float(z[y])) + mpmath.log(mpmath.fsum(mpmath.exp(v) for v in rest)))
        worst = max(worst, abs(lhs - rhs), abs(loss_eval(EL, z, y).value - rhs))
    assert criterion(2, worst <= 1e-9, f"max identity deviation {worst:.2e} over 1000 draws")


def test_c03_finite_difference_gradients(criterion):
    start = time.perf_counter()
    worst_logit, worst_mlp = 0.0, 0.0
    for spec in GRADCHECK_SPECS:
        worst_logit = max(worst_logit, check_logits(spec, draws=50, seed=3))
        worst_mlp = max(worst_mlp, max(check_mlp(spec, seed=s) for s in range(50)))
    elapsed = time.perf_counter() - start
    ok = worst_logit < 1e-4 and worst_mlp < 1e-4 and elapsed < 10.0
    assert criterion(3, ok, f"{len(GRADCHECK_SPECS)} settings x 50 draws: logits {worst_logit:.2e}, "
                            f"2-8-3 MLP {worst_mlp:.2e} (tol 1e-4), {elapsed:.1f}s")


def _logit_for(p):
    return [math.log(p / (1 - p)), 0.0]


def test_c04_piecewise_continuity(criterion):
    gen = np.random.default_rng(4)
    worst_c0, worst_c1, worst_hfl = 0.0, 0.0, 0.0
    d = 1e-7
    for _ in range(20):
        le, phi, gamma = gen.uniform(0.05, 0.95), gen.uniform(0.05, 0.95), gen.uniform(0.0, 5.0)
        spec = LossSpec("el", bonus=BonusSpec("conservative", le=le))

        def bonus(p):
            return loss_eval(spec, _logit_for(p), 0).value - loss_eval(CE, _logit_for(p), 0).value

        slope_left = steepness(spec, le) + 1 / le
        slope_right = steepness(spec, le + d) + 1 / (le + d)
        worst_c1 = max(worst_c1, abs(slope_left - slope_right))
        jump = bonus(le + d) - bonus(le - d) - 2 * d * slope_left
        worst_c0 = max(worst_c0, abs(jump))

        hfl = LossSpec("hfl", gamma_f=gamma, phi=phi)
        lo = loss_eval(hfl, _logit_for(phi - d), 0).value
        hi = loss_eval(hfl, _logit_for(phi + d), 0).value
        s_lo, s_hi = steepness(hfl, phi - d), steepness(hfl, phi + d)
        worst_hfl = max(worst_hfl, abs(hi - lo - d * (s_lo + s_hi)))
    ok = max(worst_c0, worst_c1, worst_hfl) <= 1e-9
    assert criterion(4, ok, f"conservative value {worst_c0:.1e} slope {worst_c1:.1e}, "
                            f"hfl value {worst_hfl:.1e} over 20 settings")


def test_c05_zero_sum_and_shift_invariance(criterion):
    gen = np.random.default_rng(5)
    worst_sum, worst_shift = 0.0, 0.0
    for spec in (s for s in GRADCHECK_SPECS if s.softmax_based):
        for _ in range(200):
            z, y = random_logits(gen)
            c = gen.uniform(-50, 50)
            r = loss_eval(spec, z, y)
            worst_sum = max(worst_sum, abs(float(np.sum(r.grad_logits))))
            worst_shift = max(worst_shift, abs(loss_eval(spec, z + c, y).value - r.value))
    ok = worst_sum <= 1e-9 and worst_shift <= 1e-9
    assert criterion(5, ok, f"max |sum grad| {worst_sum:.1e}, max shift change {worst_shift:.1e}")


def test_c06_metric_oracles(criterion):
    gen = np.random.default_rng(6)
    mismatches = 0
    for _ in range(100):
        n_in, n_ood = gen.integers(1, 201, size=2)
        ins = (gen.integers(0, 60, n_in) / 4.0).tolist()
        oods = (gen.integers(10, 70, n_ood) / 4.0).tolist()
        s = ood.OodScoreSet(ins, oods)
        mismatches += ood.auroc(s) != brute_auroc(ins, oods)
        mismatches += ood.fpr_at_tpr(s) != brute_fpr(ins, oods, 0.95)
    for _ in range(100):
        n = int(gen.integers(1, 400))
        conf = gen.random(n)
        conf[: n // 4] = gen.integers(0, 16, n // 4) / 15
        correct = gen.random(n) < conf
        expect, counts = brute_ece(conf.tolist(), correct.tolist(), 15)
        rep = ece_from_confidence(conf, correct, 15)
        mismatches += rep.ece != expect or rep.counts.tolist() != counts
    assert criterion(6, mismatches == 0, f"{mismatches} exact mismatches across 100 AUROC/FPR95 "
                                         "sets and 100 ECE sets")


def test_c07_attack_containment(criterion):
    gen = np.random.default_rng(7)
    worst, outputs, bitwise = 0.0, 0, True
    configs = [("fgsm", "linf"), ("pgd", "linf"), ("pgd", "l2")]
    for trial in range(10):
        dim = int(gen.integers(2, 6))
        m = init_mlp([dim, 8, 3], trial)
        X = gen.random((100, dim))
        y = gen.integers(0, 3, 100)
        method, norm = configs[trial % 3]
        eps = float(gen.uniform(0.01, 0.5))
        cfg = AttackConfig(method=method, norm=norm, epsilon=eps, steps=int(gen.integers(1, 15)),
                           step_size=float(gen.uniform(0.1, 1.0)) * eps, seed=trial)
        adv = fgsm(m, X, y, EL, cfg) if method == "fgsm" else pgd(m, X, y, EL, cfg)
        delta = adv - X
        size = np.abs(delta).max(axis=1) if norm == "linf" else np.linalg.norm(delta, axis=1)
        worst = max(worst, float(np.max(size - eps)), float(-adv.min()), float(adv.max() - 1.0))
        outputs += len(adv)
        one_step = replace(cfg, method="pgd", norm="linf", steps=1, step_size=eps, random_start=False)
        bitwise &= np.array_equal(pgd(m, X, y, EL, one_step),
                                  fgsm(m, X, y, EL, replace(cfg, method="fgsm", norm="linf")))
    ok = worst <= 1e-9 and bitwise and outputs == 1000
    assert criterion(7, ok, f"{outputs} outputs, worst budget/clip excess {max(worst, 0):.1e}, "
                            f"pgd(1 step) == fgsm bitwise: {bitwise}")


@pytest.mark.slow
def test_c08_train_determinism(tmp_path, criterion):
    args = ["train", "--loss", "el", "--bonus", "normal", "--dataset", "blobs", "--seed", "1",
            "--diagnostics", "margins,energy,ece,ood,attack", "--epochs", "50"]
    codes = [main(args + ["--out", str(tmp_path / d)]) for d in ("a", "b")]
    names = sorted(os.listdir(tmp_path / "a"))
    _, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", names, shallow=False)
    csvs = [n for n in names if n.endswith(".csv")]
    ok = codes == [0, 0] and not mismatch and not errors and len(csvs) >= 8
    assert criterion(8, ok, f"{len(names)} files ({len(csvs)} CSV) byte-identical across two runs")


# ---- directional desk-scale suite ----

def protocol(loss, seed, **extra):
    return RunManifest.from_config({"loss": loss, "seed": seed, "epochs": 200, "lr": 0.05,
                                    "batch_size": 64, "hidden": "64,64", "classes": 3,
                                    "per_class": 1250, **extra})


@pytest.fixture(scope="module")
def trained():
    """5 seeds x {ce, el-normal} on 3-class blobs (3000 train rows)."""
    runs = {}
    for seed in SEEDS:
        for loss in ("ce", "el"):
            m = protocol(loss, seed)
            ds = build_dataset(m)
            assert len(ds.indices("train")) == 3000
            model, _ = fit(m, ds)
            runs[loss, seed] = (model, ds, final_metrics(model, ds))
    return runs


def seed_mean(trained, loss, key):
    return float(np.mean([trained[loss, s][2][key] for s in SEEDS]))


@pytest.mark.slow
def test_c09_margin_growth(trained, criterion):
    ce, el = seed_mean(trained, "ce", "mean_positive_margin"), seed_mean(trained, "el", "mean_positive_margin")
    ratio = el / ce
    assert criterion(9, ratio >= 1.5, f"mean positive margin EL {el:.2f} vs CE {ce:.2f}, "
                                      f"ratio {ratio:.2f} (floor 1.5)")


@pytest.mark.slow
def test_c10_energy_sharpening(trained, criterion):
    ce, el = seed_mean(trained, "ce", "mean_label_energy"), seed_mean(trained, "el", "mean_label_energy")
    gap = ce - el
    assert criterion(10, gap >= 1.0, f"mean label energy EL {el:.2f} vs CE {ce:.2f}, "
                                     f"gap {gap:.2f} (floor 1.0)")


OOD_SHIFT = 6.0  # twice the blob-circle radius: the shifted copy leaves the training region


def shifted_auroc(model, ds):
    X, _ = ds.subset("test")
    scores = []
    for angle in np.arange(8) * np.pi / 4 + np.pi / 8:
        shift = OOD_SHIFT * np.array([math.cos(angle), math.sin(angle)])
        scores.append(ood.auroc(ood.score_set(model, X, X + shift, "min_conditional_energy")))
    return float(np.mean(scores))


@pytest.mark.slow
def test_c11_ood_direction(trained, criterion):
    auc = {loss: float(np.mean([shifted_auroc(*trained[loss, s][:2]) for s in SEEDS]))
           for loss in ("ce", "el")}
    ok = auc["el"] >= auc["ce"]
    note = " (both below 0.5)" if max(auc.values()) < 0.5 else ""
    assert criterion(11, ok, f"min-energy AUROC on shifted blobs EL {auc['el']:.3f} vs "
                             f"CE {auc['ce']:.3f}{note}")


@pytest.mark.slow
def test_c12_fgsm_robustness(trained, criterion):
    grid = np.round(np.arange(0.05, 3.0001, 0.05), 10)
    cfg = AttackConfig(method="fgsm", clip=(-np.inf, np.inf))

    def curve(loss):
        accs = []
        for s in SEEDS:
            model, ds, _ = trained[loss, s]
            X, y = ds.subset("test")
            accs.append([r.accuracy for r in robustness_curve(model, X, y, CE, cfg, grid)])
        return np.mean(accs, axis=0)

    ce = curve("ce")
    i = int(np.argmin(np.abs(ce - 0.70)))
    el = curve("el")
    ok = el[i] > ce[i]
    assert criterion(12, ok, f"FGSM eps={grid[i]:.2f} (CE nearest 70%): EL {el[i]:.3f} vs "
                             f"CE {ce[i]:.3f}")


@pytest.mark.slow
@pytest.mark.xfail(reason="EL-normal at lr 0.05 loses hidden units on overlapping 6-class blobs",
                   strict=False)
def test_c13_representation_probe(criterion):
    probe = {"ce": [], "el": []}
    for seed in SEEDS:
        for loss in probe:
            m = protocol(loss, seed, classes=6, stddev=1.5, per_class=625)
            ds = build_dataset(m)
            model, _ = fit(m, ds)
            probe[loss].append(probe_representation(model, ds, seed))
    ce, el = float(np.mean(probe["ce"])), float(np.mean(probe["el"]))
    assert criterion(13, el >= ce, f"probe accuracy on 6-class overlapping blobs EL {el:.3f} vs "
                                   f"CE {ce:.3f}")


@pytest.mark.slow
def test_c14_lr_scale_sweep(tmp_path, criterion):
    out = tmp_path / "sweep"
    code = main(["sweep", "--axis", "lr_scale", "--values", "1.0,0.5", "--loss", "el",
                 "--out", str(out)])
    table = []
    if (out / "comparison.csv").exists():
        with open(out / "comparison.csv") as f:
            table = list(csv.reader(f))
    ok = code == 0 and [r[1] for r in table[1:]] == ["1", "0.5"]
    detail = ", ".join(f"lr_scale {r[1]}: test_acc {float(r[2]):.3f}" for r in table[1:])
    assert criterion(14, ok, f"comparison.csv written ({detail})")
