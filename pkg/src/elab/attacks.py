"""White-box FGSM / PGD attacks on an :class:`~elab.network.Mlp`.

By default the attacker ascends the cross-entropy of the model's logits, even
for models trained with encouraging loss (whose value is unbounded below, so
"maximize the training loss" is ill-posed far from the boundary). Set
``attack_loss="train"`` to ascend the training loss instead.
"""

from dataclasses import dataclass, replace
import warnings

import numpy as np

from . import rng
from .losses import LossSpec
from .network import forward, input_gradient
from .numerics import margin_values

CE = LossSpec("ce")


@dataclass(frozen=True)
class AttackConfig:
    method: str = "fgsm"
    norm: str = "linf"
    epsilon: float = 0.1
    steps: int = 40
    step_size: float | None = None  # None -> epsilon / 10
    random_start: bool = True
    clip: tuple = (0.0, 1.0)
    seed: int = 0
    attack_loss: str = "ce"

    def __post_init__(self):
        if self.method not in ("fgsm", "pgd"):
            raise ValueError(f"unknown attack {self.method!r}")
        if self.norm not in ("linf", "l2"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.method == "fgsm" and self.norm != "linf":
            raise ValueError("fgsm is an L-inf attack")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be > 0")
        if self.attack_loss not in ("ce", "train"):
            raise ValueError("attack_loss must be 'ce' or 'train'")
        lo, hi = self.clip
        if lo > hi:
            raise ValueError("clip range is empty")

    @property
    def alpha(self):
        return self.epsilon / 10.0 if self.step_size is None else self.step_size


def _target_loss(loss, cfg):
    return loss if cfg.attack_loss == "train" else CE


def _clip(x, cfg):
    lo, hi = cfg.clip
    return np.clip(x, lo, hi)


def fgsm(m, x, y, loss, cfg):
    """x' = clip(x + epsilon * sign(grad_x L)), sign(0) = 0."""
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    g = input_gradient(m, X, np.atleast_1d(y), _target_loss(loss, cfg))
    out = _clip(X + cfg.epsilon * np.sign(g), cfg)
    return out.reshape(np.shape(x))


def project(x, x0, eps, norm):
    """Project ``x`` row-wise onto the ``norm`` ball of radius eps around ``x0``."""
    if norm == "linf":
        return np.minimum(np.maximum(x, x0 - eps), x0 + eps)
    delta = x - x0
    n = np.linalg.norm(delta, axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(n > eps, eps / n, 1.0)
    return x0 + delta * scale


def _random_start(x0, cfg):
    delta = np.empty_like(x0)
    dim = x0.shape[1]
    for i in range(x0.shape[0]):
        gen = rng.stream(cfg.seed, f"attack/pgd/{i}")
        if cfg.norm == "linf":
            delta[i] = cfg.epsilon * (2.0 * rng.uniform(gen, dim) - 1.0)
        else:
            direction = rng.normal(gen, (dim,))
            norm = np.linalg.norm(direction)
            radius = cfg.epsilon * rng.uniform(gen, 1)[0] ** (1.0 / dim)
            delta[i] = direction * (radius / norm) if norm > 0 else 0.0
    return delta


def _direction(g, norm):
    if norm == "linf":
        return np.sign(g)
    n = np.linalg.norm(g, axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(n > 0, g / n, 0.0)


def pgd(m, x, y, loss, cfg):
    """Iterate x <- clip(project(clip(x + alpha * d))) for ``cfg.steps`` steps.

    Random starts are drawn per example from stream ``attack/pgd/<row>`` so a
    row's adversary does not depend on what else is in the batch.
    """
    X0 = np.atleast_2d(np.asarray(x, dtype=np.float64))
    yy = np.atleast_1d(y)
    target = _target_loss(loss, cfg)
    eps, alpha = cfg.epsilon, cfg.alpha
    if alpha > eps > 0:
        warnings.warn(f"pgd step size {alpha} exceeds epsilon {eps}", stacklevel=2)
    X = X0.copy()
    if cfg.random_start and eps > 0:
        X = _clip(project(_clip(X0 + _random_start(X0, cfg), cfg), X0, eps, cfg.norm), cfg)
    for _ in range(cfg.steps):
        g = input_gradient(m, X, yy, target)
        X = _clip(project(_clip(X + alpha * _direction(g, cfg.norm), cfg), X0, eps, cfg.norm), cfg)
    return X.reshape(np.shape(x))


def attack(m, x, y, loss, cfg):
    return fgsm(m, x, y, loss, cfg) if cfg.method == "fgsm" else pgd(m, x, y, loss, cfg)


@dataclass(frozen=True)
class RobustnessRow:
    epsilon: float
    accuracy: float
    method: str
    norm: str


def robustness_curve(m, X, y, loss, cfg, epsilons):
    """Accuracy on independently attacked copies of X for each epsilon."""
    eps_list = [float(e) for e in epsilons]
    if any(b < a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("epsilons must be sorted ascending")
    y = np.asarray(y)
    rows = []
    for eps in eps_list:
        adv = attack(m, X, y, loss, replace(cfg, epsilon=eps))
        acc = float(np.mean(margin_values(forward(m, adv), y) > 0.0))
        rows.append(RobustnessRow(eps, acc, cfg.method, cfg.norm))
    return rows
