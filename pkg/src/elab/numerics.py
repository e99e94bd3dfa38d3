"""Numerically stable primitives shared by the rest of the package.

Everything here works on float64 numpy arrays. The ``*_rows`` helpers reduce
over the last axis so they apply equally to one logit vector or a batch.
"""

import numpy as np

LOG_CLAMP = 1e-12


def _as_array(z):
    arr = np.asarray(z, dtype=np.float64)
    if arr.size == 0 or arr.shape[-1] == 0:
        raise ValueError("empty reduction")
    return arr


def log_sum_exp(z, axis=-1):
    """log(sum(exp(z))) along ``axis``, shifted by the max so it never overflows."""
    z = _as_array(z)
    m = np.max(z, axis=axis, keepdims=True)
    # all -inf rows (masked-out reductions) would give nan after the shift
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(z - m), axis=axis, keepdims=True)) + m
    out = np.squeeze(out, axis=axis)
    return float(out) if out.ndim == 0 else out


def softmax(z, axis=-1):
    z = _as_array(z)
    lse = log_sum_exp(z, axis=axis)
    return np.exp(z - np.expand_dims(lse, axis))


def log_softmax(z, axis=-1):
    z = _as_array(z)
    return z - np.expand_dims(log_sum_exp(z, axis=axis), axis)


def sigmoid(x):
    """Logistic function; never evaluates exp of a positive argument."""
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return float(out) if out.ndim == 0 else out


def log_sum_exp_excluding(z, y):
    """Row-wise logsumexp over every column except ``y[i]``.

    ``z`` is (N, K) and ``y`` an int array of length N; K must be >= 2.
    """
    z = np.asarray(z, dtype=np.float64)
    masked = z.copy()
    masked[np.arange(z.shape[0]), y] = -np.inf
    return log_sum_exp(masked, axis=-1)


def softmax_excluding(z, y):
    """Softmax over the non-label logits of each row; the label column is 0."""
    z = np.asarray(z, dtype=np.float64)
    masked = z.copy()
    masked[np.arange(z.shape[0]), y] = -np.inf
    lse = log_sum_exp(masked, axis=-1)
    return np.exp(masked - lse[:, None])


def clamped_log(p):
    return np.log(np.maximum(p, LOG_CLAMP))


def margin_values(Z, y):
    """Label logit minus the largest other logit, per row of ``Z``."""
    Z = np.asarray(Z, dtype=np.float64)
    rows = np.arange(Z.shape[0])
    others = Z.copy()
    others[rows, y] = -np.inf
    return Z[rows, y] - np.max(others, axis=1)
