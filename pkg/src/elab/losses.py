"""Classification losses with analytic gradients w.r.t. the logits.

Families: cross-entropy (optionally label-smoothed), encouraging loss
(cross-entropy plus a bonus on the label probability), focal loss, halted
focal loss, and MSE on probabilities with an optional mirror bonus.

Each loss is evaluated on a batch of logits ``Z`` (N, K) with integer labels
``y`` (N,) by :func:`loss_batch`; the per-example functions (``ce_loss``,
``encouraging_loss``...) wrap it for a single logit vector.
"""

from dataclasses import dataclass, field
import math

import numpy as np

from .numerics import LOG_CLAMP, log_sum_exp, log_sum_exp_excluding, sigmoid, softmax_excluding

# log(1 - p) bonuses saturate once 1 - p_y < BONUS_FLOOR: the value stops
# decreasing and the bonus gradient is 0. Without it the normal bonus is
# unbounded below and an unnormalized ReLU MLP blows up in finite time.
BONUS_FLOOR = LOG_CLAMP
_LOG_FLOOR = math.log(BONUS_FLOOR)

FAMILIES = ("ce", "el", "focal", "hfl", "mse", "mse_mirror")
BONUS_KINDS = ("none", "normal", "conservative", "aggressive")


class LossSpecError(ValueError):
    pass


@dataclass(frozen=True)
class BonusSpec:
    kind: str = "none"
    le: float | None = None
    threshold: float | None = None

    def __post_init__(self):
        if self.kind not in BONUS_KINDS:
            raise LossSpecError(f"unknown bonus kind {self.kind!r}")
        if self.kind == "conservative":
            if self.le is None or not 0.0 < self.le <= 1.0:
                raise LossSpecError("conservative bonus needs le in (0,1]")
        elif self.le is not None:
            raise LossSpecError("le is only valid for the conservative bonus")
        if self.kind == "aggressive":
            if self.threshold is None:
                object.__setattr__(self, "threshold", 0.5)
            if not 0.0 < self.threshold < 1.0:
                raise LossSpecError("aggressive bonus threshold must be in (0,1)")
        elif self.threshold is not None:
            raise LossSpecError("threshold is only valid for the aggressive bonus")


@dataclass(frozen=True)
class LossSpec:
    """Which loss to train with, and its parameters.

    ``gamma_f`` belongs to focal/hfl, ``phi`` to hfl (defaults to 0.5),
    ``bonus`` to el, ``label_smoothing`` to ce/el and ``normalization`` to
    the two MSE families.
    """

    family: str = "ce"
    bonus: BonusSpec = field(default_factory=BonusSpec)
    gamma_f: float | None = None
    phi: float | None = None
    label_smoothing: float = 0.0
    normalization: str = "softmax"

    def __post_init__(self):
        fam = self.family
        if fam not in FAMILIES:
            raise LossSpecError(f"unknown loss family {fam!r}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise LossSpecError("label_smoothing must be in [0,1)")
        if self.label_smoothing and fam not in ("ce", "el"):
            raise LossSpecError(f"label_smoothing is not defined for {fam}")
        if fam == "el":
            if self.bonus.kind == "none":
                raise LossSpecError("el needs a bonus other than 'none' (that is plain ce)")
        elif self.bonus.kind != "none":
            raise LossSpecError(f"bonus is only valid for el, not {fam}")
        if fam in ("focal", "hfl"):
            if self.gamma_f is None:
                raise LossSpecError(f"{fam} needs gamma_f")
            if self.gamma_f < 0:
                raise LossSpecError("gamma_f must be >= 0")
        elif self.gamma_f is not None:
            raise LossSpecError(f"gamma_f is not defined for {fam}")
        if fam == "hfl":
            if self.phi is None:
                object.__setattr__(self, "phi", 0.5)
            if not 0.0 < self.phi < 1.0:
                raise LossSpecError("phi must be in (0,1)")
        elif self.phi is not None:
            raise LossSpecError(f"phi is not defined for {fam}")
        if self.normalization not in ("softmax", "sigmoid"):
            raise LossSpecError("normalization must be softmax or sigmoid")
        if self.normalization == "sigmoid" and not fam.startswith("mse"):
            raise LossSpecError("sigmoid normalization is only defined for mse families")

    @property
    def softmax_based(self):
        return self.normalization == "softmax"

    def describe(self):
        parts = [self.family]
        if self.family == "el":
            parts.append(self.bonus.kind)
            if self.bonus.le is not None:
                parts.append(f"le={self.bonus.le:g}")
            if self.bonus.kind == "aggressive":
                parts.append(f"t={self.bonus.threshold:g}")
        if self.gamma_f is not None:
            parts.append(f"gamma={self.gamma_f:g}")
        if self.phi is not None:
            parts.append(f"phi={self.phi:g}")
        if self.label_smoothing:
            parts.append(f"ls={self.label_smoothing:g}")
        if self.family.startswith("mse"):
            parts.append(self.normalization)
        return " ".join(parts)


@dataclass
class LossEval:
    value: float
    grad_logits: np.ndarray
    p_label: float


def hfl_offset(gamma_f, phi):
    """Shift that makes the halted branch meet the focal branch at p = phi."""
    return ((1.0 - phi) ** gamma_f - 1.0) * math.log(phi)


def _check_inputs(Z, y):
    Z = np.asarray(Z, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if Z.ndim != 2 or Z.shape[1] < 2:
        raise ValueError("logits must be (N, K) with K >= 2")
    if y.shape != (Z.shape[0],):
        raise ValueError("labels must have one entry per row of logits")
    if np.any(y < 0) or np.any(y >= Z.shape[1]):
        raise ValueError(f"label out of range [0, {Z.shape[1]})")
    return Z, y


class _Softmaxed:
    """Shared logit-space quantities for one batch."""

    def __init__(self, Z, y):
        n, k = Z.shape
        self.Z, self.y, self.k = Z, y, k
        self.rows = np.arange(n)
        self.lse = log_sum_exp(Z, axis=-1)
        self.P = np.exp(Z - self.lse[:, None])
        self.log_p = Z[self.rows, y] - self.lse
        self.lse_rest = log_sum_exp_excluding(Z, y)
        # log(1 - p_y) without cancellation
        self.log_rest = self.lse_rest - self.lse
        self.onehot = np.zeros_like(Z)
        self.onehot[self.rows, y] = 1.0

    @property
    def p(self):
        return np.exp(self.log_p)

    def smoothed_ce(self, eps):
        if eps == 0.0:
            return self.lse - self.Z[self.rows, self.y], self.P - self.onehot
        q = (1.0 - eps) * self.onehot + eps / self.k
        return self.lse - np.sum(q * self.Z, axis=1), self.P - q

    def label_chain(self, dl_dp):
        """Gradient w.r.t. logits of a term whose derivative in p_y is dl_dp."""
        return (dl_dp * self.p)[:, None] * (self.onehot - self.P)

    def rest_log_grad(self):
        """Gradient of log(1 - p_y) w.r.t. the logits."""
        return softmax_excluding(self.Z, self.y) - self.P

    def floored_log_bonus(self):
        """log(max(1 - p_y, BONUS_FLOOR)) and its logit gradient."""
        live = self.log_rest >= _LOG_FLOOR
        value = np.where(live, self.log_rest, _LOG_FLOOR)
        grad = np.where(live[:, None], self.rest_log_grad(), 0.0)
        return value, grad


def _bonus(sm, bonus):
    n = sm.Z.shape[0]
    if bonus.kind == "none":
        return np.zeros(n), np.zeros_like(sm.Z)
    if bonus.kind == "normal" or (bonus.kind == "conservative" and bonus.le >= 1.0):
        return sm.floored_log_bonus()
    p = sm.p
    if bonus.kind == "conservative":
        le = bonus.le
        on_log = p <= le
        slope = -1.0 / (1.0 - le)
        value = np.where(on_log, sm.log_rest, math.log1p(-le) + slope * (p - le))
        grad = np.where(on_log[:, None], sm.rest_log_grad(),
                        sm.label_chain(np.full(n, slope)))
        return value, grad
    t = bonus.threshold
    active = p > t
    log_value, log_grad = sm.floored_log_bonus()
    value = np.where(active, log_value - math.log1p(-t), 0.0)
    grad = np.where(active[:, None], log_grad, 0.0)
    return value, grad


def _focal(sm, gamma):
    one_minus = np.exp(sm.log_rest)
    weight = one_minus ** gamma
    value = -weight * sm.log_p
    if gamma == 0.0:
        g = -np.ones_like(value)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            lead = np.where(one_minus > 0.0,
                            gamma * one_minus ** (gamma - 1.0) * sm.p * sm.log_p, 0.0)
        g = lead - weight
    # g is dL/dp * p, so chain through d p_y / d z = p_y (onehot - P)
    return value, g[:, None] * (sm.onehot - sm.P)


def _mse(Z, y, mirror, normalization):
    n, k = Z.shape
    rows = np.arange(n)
    T = np.zeros_like(Z)
    T[rows, y] = 1.0
    if normalization == "softmax":
        P = np.exp(Z - log_sum_exp(Z, axis=-1)[:, None])
    else:
        P = sigmoid(Z)
    value = np.sum((T - P) ** 2, axis=1)
    G = -2.0 * (T - P)
    if mirror:
        value = value - np.sum((T * P) ** 2 + ((1.0 - T) * (1.0 - P)) ** 2, axis=1)
        G = G - 2.0 * T * T * P + 2.0 * (1.0 - T) ** 2 * (1.0 - P)
    if normalization == "softmax":
        grad = P * (G - np.sum(G * P, axis=1, keepdims=True))
    else:
        grad = G * P * (1.0 - P)
    return value, grad, P[rows, y]


def loss_batch(spec, Z, y):
    """Per-example loss values, logit gradients and label probabilities.

    Returns ``(values (N,), grads (N, K), p_label (N,))``.
    """
    Z, y = _check_inputs(Z, y)
    fam = spec.family
    if fam.startswith("mse"):
        return _mse(Z, y, fam == "mse_mirror", spec.normalization)
    sm = _Softmaxed(Z, y)
    if fam == "ce":
        value, grad = sm.smoothed_ce(spec.label_smoothing)
    elif fam == "el":
        value, grad = sm.smoothed_ce(spec.label_smoothing)
        if spec.label_smoothing == 0.0 and spec.bonus.kind == "normal":
            # exact form: -z_y + logsumexp over non-label logits
            live = sm.log_rest >= _LOG_FLOOR
            value = np.where(live, sm.lse_rest - Z[sm.rows, y], value + _LOG_FLOOR)
            grad = np.where(live[:, None], softmax_excluding(Z, y) - sm.onehot, grad)
        else:
            b_value, b_grad = _bonus(sm, spec.bonus)
            value, grad = value + b_value, grad + b_grad
    elif fam == "focal":
        value, grad = _focal(sm, spec.gamma_f)
    else:
        value, grad = _focal(sm, spec.gamma_f)
        halted = sm.p > spec.phi
        b = hfl_offset(spec.gamma_f, spec.phi)
        value = np.where(halted, -(sm.log_p + b), value)
        grad = np.where(halted[:, None], sm.P - sm.onehot, grad)
    return value, grad, sm.p


def loss_eval(spec, z, y):
    """Evaluate ``spec`` on one logit vector ``z`` with label ``y``."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise ValueError("expected a single logit vector")
    value, grad, p = loss_batch(spec, z[None, :], [y])
    return LossEval(float(value[0]), grad[0], float(p[0]))


def ce_loss(z, y, eps=0.0):
    return loss_eval(LossSpec("ce", label_smoothing=eps), z, y)


def encouraging_loss(z, y, bonus, eps=0.0):
    return loss_eval(LossSpec("el", bonus=bonus, label_smoothing=eps), z, y)


def focal_loss(z, y, gamma_f):
    return loss_eval(LossSpec("focal", gamma_f=gamma_f), z, y)


def halted_focal_loss(z, y, gamma_f, phi=0.5):
    return loss_eval(LossSpec("hfl", gamma_f=gamma_f, phi=phi), z, y)


def mse_loss(z, y, mirror=False, normalization="softmax"):
    family = "mse_mirror" if mirror else "mse"
    return loss_eval(LossSpec(family, normalization=normalization), z, y)


def steepness(spec, p):
    """dL/dp at label probability ``p`` (hard labels; smoothing ignored)."""
    if not 0.0 < p < 1.0:
        raise ValueError("p must be in (0,1)")
    fam = spec.family
    if fam == "ce":
        return -1.0 / p
    if fam == "el":
        bonus = spec.bonus
        if 1.0 - p < BONUS_FLOOR:
            return -1.0 / p
        if bonus.kind == "conservative" and bonus.le < 1.0 and p > bonus.le:
            return -1.0 / p - 1.0 / (1.0 - bonus.le)
        if bonus.kind == "aggressive" and p <= bonus.threshold:
            return -1.0 / p
        return -1.0 / p - 1.0 / (1.0 - p)
    if fam in ("focal", "hfl"):
        if fam == "hfl" and p > spec.phi:
            return -1.0 / p
        g = spec.gamma_f
        lead = g * (1.0 - p) ** (g - 1.0) * math.log(p) if g else 0.0
        return lead - (1.0 - p) ** g / p
    if fam == "mse":
        return -2.0 * (1.0 - p)
    return -2.0
