"""Margins, conditional energies and calibration of a trained classifier.

Conditional energy of class c is the negated logit, E(c|x) = -z_c. Margins
are in logit units: z_y - max_{k != y} z_k, and a tie counts as wrong.
"""

from dataclasses import dataclass
import math

import numpy as np

from .network import forward
from .numerics import log_sum_exp, margin_values, softmax

__all__ = [
    "MarginRecord", "EnergyRecord", "EceReport", "margin_values", "margins",
    "margin_histogram", "energies", "mean_class_energy", "class_energy_table",
    "ece", "ece_from_confidence",
]


@dataclass(frozen=True)
class MarginRecord:
    example_id: int
    margin: float
    correct: bool


@dataclass(frozen=True)
class EnergyRecord:
    example_id: int
    label_energy: float
    min_energy: float
    free_energy: float


@dataclass
class EceReport:
    edges: np.ndarray  # B + 1 bin edges over [0, 1]
    counts: np.ndarray
    confidence: np.ndarray  # mean confidence per bin (nan when empty)
    accuracy: np.ndarray
    ece: float

    @property
    def n(self):
        return int(self.counts.sum())


def _ids(n, ids):
    return range(n) if ids is None else [int(i) for i in ids]


def margin_records(Z, y, ids=None):
    vals = margin_values(Z, y)
    return [MarginRecord(i, float(v), bool(v > 0.0)) for i, v in zip(_ids(len(vals), ids), vals)]


def margins(m, X, y, ids=None):
    return margin_records(forward(m, X), np.asarray(y), ids)


def margin_histogram(values, width):
    """Counts per half-open bin [lo, lo + width); only occupied bins are listed.

    Accepts raw margins or MarginRecords. Returns (lo, hi, count) rows sorted
    by lo.
    """
    if not width > 0:
        raise ValueError("bin width must be > 0")
    vals = [v.margin if isinstance(v, MarginRecord) else float(v) for v in values]
    counts = {}
    for v in vals:
        k = math.floor(v / width)
        counts[k] = counts.get(k, 0) + 1
    return [(k * width, (k + 1) * width, counts[k]) for k in sorted(counts)]


def energy_records(Z, y, ids=None):
    Z = np.asarray(Z, dtype=np.float64)
    y = np.asarray(y)
    label = -Z[np.arange(len(y)), y]
    lowest = -np.max(Z, axis=1)
    free = -log_sum_exp(Z, axis=-1)
    return [EnergyRecord(i, float(a), float(b), float(c))
            for i, a, b, c in zip(_ids(len(y), ids), label, lowest, free)]


def energies(m, X, y, ids=None):
    return energy_records(forward(m, X), np.asarray(y), ids)


def mean_class_energy(records, labels, c):
    """Mean label-class energy over the records whose label is ``c``."""
    vals = [r.label_energy for r, lab in zip(records, labels) if int(lab) == c]
    if not vals:
        raise ValueError(f"no examples of class {c}")
    return math.fsum(vals) / len(vals)


def class_energy_table(Z, y, num_classes):
    """Mean conditional energy E(c|x) averaged over examples of each label.

    Returns a (label, class) matrix; the diagonal is energy on the data, the
    off-diagonal entries are the energy of the other classes for those
    examples. Rows for absent labels are nan.
    """
    Z = np.asarray(Z, dtype=np.float64)
    out = np.full((num_classes, num_classes), np.nan)
    for lab in range(num_classes):
        rows = Z[np.asarray(y) == lab]
        if len(rows):
            out[lab] = -rows.mean(axis=0)
    return out


def ece_from_confidence(confidence, correct, bins=15):
    """Equal-width binned expected calibration error.

    Bins are [i/B, (i+1)/B) with the last one closed at 1. Sums use
    ``math.fsum`` so the result does not depend on summation order.
    """
    if bins < 1:
        raise ValueError("need at least one bin")
    conf = np.asarray(confidence, dtype=np.float64)
    corr = np.asarray(correct, dtype=bool)
    n = len(conf)
    if n == 0:
        raise ValueError("ECE of an empty set")
    edges = np.arange(bins + 1) / bins
    which = np.clip(np.searchsorted(edges, conf, side="right") - 1, 0, bins - 1)
    counts = np.bincount(which, minlength=bins)
    mean_conf = np.full(bins, np.nan)
    acc = np.full(bins, np.nan)
    terms = []
    for b in np.flatnonzero(counts):
        members = which == b
        c = int(counts[b])
        mean_conf[b] = math.fsum(conf[members]) / c
        acc[b] = int(corr[members].sum()) / c
        terms.append(c / n * abs(acc[b] - mean_conf[b]))
    return EceReport(edges, counts, mean_conf, acc, math.fsum(terms))


def ece(m, X, y, bins=15):
    """ECE with confidence = max softmax probability."""
    Z = forward(m, X)
    conf = np.max(softmax(Z, axis=-1), axis=1)
    return ece_from_confidence(conf, margin_values(Z, np.asarray(y)) > 0.0, bins)
