"""Out-of-distribution scores and threshold-free detection metrics.

All indicators are oriented so that a higher score means "more OOD", and OOD
is the positive class for TPR/FPR.
"""

from dataclasses import dataclass

import numpy as np

from .network import forward
from .numerics import log_sum_exp, softmax

INDICATORS = ("min_conditional_energy", "free_energy", "max_prob")


@dataclass
class OodScoreSet:
    in_scores: np.ndarray
    ood_scores: np.ndarray
    indicator: str = "min_conditional_energy"

    def __post_init__(self):
        self.in_scores = np.asarray(self.in_scores, dtype=np.float64)
        self.ood_scores = np.asarray(self.ood_scores, dtype=np.float64)
        if self.indicator not in INDICATORS:
            raise ValueError(f"unknown indicator {self.indicator!r}")


def score_logits(Z, indicator="min_conditional_energy"):
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    if indicator == "min_conditional_energy":
        return -np.max(Z, axis=1)
    if indicator == "free_energy":
        return -log_sum_exp(Z, axis=-1)
    if indicator == "max_prob":
        return -np.max(softmax(Z, axis=-1), axis=1)
    raise ValueError(f"unknown indicator {indicator!r}")


def score(m, X, indicator="min_conditional_energy"):
    return score_logits(forward(m, np.atleast_2d(X)), indicator)


def score_set(m, X_in, X_ood, indicator="min_conditional_energy"):
    return OodScoreSet(score(m, X_in, indicator), score(m, X_ood, indicator), indicator)


def _check(s):
    if len(s.in_scores) == 0 or len(s.ood_scores) == 0:
        raise ValueError("need both in-distribution and OOD scores")


def auroc(s):
    """P(ood score > in score) with ties counted one half (Mann-Whitney U)."""
    _check(s)
    ins = np.sort(s.in_scores)
    below = np.searchsorted(ins, s.ood_scores, side="left")
    upto = np.searchsorted(ins, s.ood_scores, side="right")
    # integer count of 2*U keeps the result exact
    twice_u = int(np.sum(2 * below + (upto - below)))
    return twice_u / (2 * len(ins) * len(s.ood_scores))


def fpr_at_tpr(s, tpr_target=0.95):
    """In-distribution fraction at or above the largest threshold t whose OOD
    fraction at or above t is still >= ``tpr_target``. No interpolation."""
    _check(s)
    if not 0.0 < tpr_target <= 1.0:
        raise ValueError("tpr_target must be in (0,1]")
    ood = np.sort(s.ood_scores)[::-1]
    n = len(ood)
    k = next(i for i in range(1, n + 1) if i / n >= tpr_target)
    t = ood[k - 1]
    return int(np.sum(s.in_scores >= t)) / len(s.in_scores)
