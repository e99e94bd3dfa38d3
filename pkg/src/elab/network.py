"""A small ReLU MLP with explicit backpropagation and a mini-batch SGD trainer.

The trainer never differentiates a loss itself: it takes dL/dlogits from
:func:`elab.losses.loss_batch` and pushes it through :func:`backward`.
"""

from dataclasses import dataclass, field
import math

import numpy as np

from . import rng
from .losses import LossSpec, loss_batch
from .numerics import margin_values


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Mlp:
    layer_dims: tuple
    weights: list  # weights[i] has shape (layer_dims[i+1], layer_dims[i])
    biases: list

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("one weight matrix and bias per layer transition")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_dims[i + 1], self.layer_dims[i])
            if w.shape != shape or b.shape != (shape[0],):
                raise ValueError(f"layer {i}: expected weight {shape}, got {w.shape}")

    @property
    def n_in(self):
        return self.layer_dims[0]

    @property
    def n_classes(self):
        return self.layer_dims[-1]

    def copy(self):
        return Mlp(self.layer_dims, [w.copy() for w in self.weights],
                   [b.copy() for b in self.biases])

    def parameters(self):
        return self.weights + self.biases

    def to_dict(self):
        return {
            "layer_dims": list(self.layer_dims),
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["layer_dims"]),
                   [np.asarray(w, dtype=np.float64).reshape(o, i) for w, o, i in
                    zip(d["weights"], d["layer_dims"][1:], d["layer_dims"][:-1])],
                   [np.asarray(b, dtype=np.float64) for b in d["biases"]])


def init_mlp(layer_dims, seed, stream_name="mlp/init"):
    """He-normal weights N(0, 2/fan_in) and zero biases."""
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2 or any(d <= 0 for d in dims):
        raise ValueError(f"need at least two positive layer dims, got {layer_dims}")
    gen = rng.stream(seed, stream_name)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        std = math.sqrt(2.0 / fan_in)
        weights.append(std * rng.normal(gen, (fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Mlp(tuple(dims), weights, biases)


def _as_batch(m, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != m.n_in:
        raise ValueError(f"expected inputs with {m.n_in} features, got shape {x.shape}")
    return X, single


def _forward_cache(m, X):
    acts = [X]
    h = X
    last = len(m.weights) - 1
    for i, (w, b) in enumerate(zip(m.weights, m.biases)):
        h = h @ w.T + b
        if i < last:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return acts


def forward(m, x):
    """Logits for one feature vector (K,) or a batch (N, D) -> (N, K)."""
    X, single = _as_batch(m, x)
    Z = _forward_cache(m, X)[-1]
    return Z[0] if single else Z


def features(m, x):
    """Penultimate-layer activations (the representation the head sees)."""
    X, single = _as_batch(m, x)
    H = _forward_cache(m, X)[-2]
    return H[0] if single else H


@dataclass
class Gradients:
    weights: list
    biases: list

    def parameters(self):
        return self.weights + self.biases


def _backward_cache(m, acts, G):
    n_layers = len(m.weights)
    gw, gb = [None] * n_layers, [None] * n_layers
    delta = G
    for i in range(n_layers - 1, -1, -1):
        gw[i] = delta.T @ acts[i]
        gb[i] = delta.sum(axis=0)
        delta = delta @ m.weights[i]
        if i > 0:
            # ReLU subgradient at exactly 0 is 0
            delta = delta * (acts[i] > 0.0)
    return Gradients(gw, gb), delta


def backward(m, x, grad_logits):
    """Reverse-mode gradients of sum_n <grad_logits[n], f(x[n])>.

    Returns ``(Gradients, input_gradient)``; the input gradient has the shape
    of ``x``. Parameter gradients are summed over the batch.
    """
    X, single = _as_batch(m, x)
    G = np.asarray(grad_logits, dtype=np.float64)
    G = G[None, :] if G.ndim == 1 else G
    if G.shape != (X.shape[0], m.n_classes):
        raise ValueError(f"grad_logits shape {G.shape} does not match logits")
    grads, dx = _backward_cache(m, _forward_cache(m, X), G)
    return grads, (dx[0] if single else dx)


def input_gradient(m, x, y, loss):
    """d loss(f(x), y) / dx, per example (no batch averaging)."""
    X, single = _as_batch(m, x)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    acts = _forward_cache(m, X)
    _, G, _ = loss_batch(loss, acts[-1], y)
    _, dx = _backward_cache(m, acts, G)
    return dx[0] if single else dx


def sgd_step(m, grads, lr_effective, velocity=None, momentum=0.0):
    """v <- momentum * v + g; theta <- theta - lr_effective * v (in place).

    ``velocity`` is a list of arrays matching ``m.parameters()`` or None for
    plain SGD. Returns the (mutated) model.
    """
    params = m.parameters()
    gs = grads.parameters()
    for k, (theta, g) in enumerate(zip(params, gs)):
        if velocity is not None:
            v = velocity[k]
            v *= momentum
            v += g
            step = v
        else:
            step = g
        theta -= lr_effective * step
    return m


def zero_velocity(m):
    return [np.zeros_like(p) for p in m.parameters()]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    lr_scale: float = 1.0
    momentum: float = 0.9
    epochs: int = 200
    batch_size: int = 64
    seed: int = 0
    class_weights: dict | None = None
    reweight_start_epoch: int | None = None
    schedule: tuple = ()

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not self.lr_scale > 0:
            raise ValueError("lr_scale must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0,1)")
        if self.epochs <= 0:
            raise ValueError("epochs must be > 0")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be > 0")
        if self.reweight_start_epoch is not None and self.reweight_start_epoch > self.epochs:
            raise ValueError("reweight_start_epoch must be <= epochs")
        object.__setattr__(self, "schedule",
                           tuple(sorted((int(e), float(f)) for e, f in self.schedule)))

    def lr_multiplier(self, epoch):
        mult = 1.0
        for start, factor in self.schedule:
            if start <= epoch:
                mult = factor
        return mult

    def weights_active(self, epoch):
        if not self.class_weights:
            return False
        return self.reweight_start_epoch is None or epoch >= self.reweight_start_epoch


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float
    mean_margin: float
    mean_label_energy: float


@dataclass
class TrainTrace:
    records: list = field(default_factory=list)

    @property
    def last(self):
        return self.records[-1]


def accuracy_from_logits(Z, y):
    """Fraction of rows whose label logit strictly beats every other logit."""
    if len(y) == 0:
        return float("nan")
    return float(np.mean(margin_values(Z, y) > 0.0))


def accuracy(m, X, y):
    return accuracy_from_logits(forward(m, X), np.asarray(y))


def evaluate_loss(m, X, y, loss):
    values, _, _ = loss_batch(loss, forward(m, X), np.asarray(y))
    return float(np.mean(values))


def _epoch_record(m, epoch, loss_mean, Xtr, ytr, Xte, yte):
    Ztr = forward(m, Xtr)
    margins = margin_values(Ztr, ytr)
    test_acc = accuracy(m, Xte, yte) if len(yte) else float("nan")
    return EpochRecord(
        epoch=epoch,
        train_loss=loss_mean,
        train_acc=float(np.mean(margins > 0.0)),
        test_acc=test_acc,
        mean_margin=float(np.mean(margins)),
        mean_label_energy=float(-np.mean(Ztr[np.arange(len(ytr)), ytr])),
    )


def train(m, dataset, loss, cfg):
    """Mini-batch SGD on the dataset's train rows. Returns (model, TrainTrace).

    The input model is not modified. Per-example weights (when active) scale
    both the loss and its logit gradient before the batch mean.
    """
    if not isinstance(loss, LossSpec):
        raise TypeError("loss must be a LossSpec")
    Xtr, ytr = dataset.subset("train")
    Xte, yte = dataset.subset("test")
    if len(ytr) == 0:
        raise ValueError("dataset has no train rows")
    if np.any(ytr >= m.n_classes):
        raise ValueError("labels exceed the model's class count")
    m = m.copy()
    velocity = zero_velocity(m)
    gen = rng.stream(cfg.seed, "train/shuffle")
    n = len(ytr)
    class_w = np.ones(m.n_classes)
    if cfg.class_weights:
        for c, w in cfg.class_weights.items():
            class_w[int(c)] = float(w)
    trace = TrainTrace()
    for epoch in range(1, cfg.epochs + 1):
        lr_eff = cfg.lr * cfg.lr_scale * cfg.lr_multiplier(epoch)
        weighted = cfg.weights_active(epoch)
        order = rng.permutation(gen, n)
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            xb, yb = Xtr[idx], ytr[idx]
            acts = _forward_cache(m, xb)
            values, G, _ = loss_batch(loss, acts[-1], yb)
            if weighted:
                w = class_w[yb]
                values = values * w
                G = G * w[:, None]
            if not (np.all(np.isfinite(values)) and np.all(np.isfinite(G))):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}")
            total += float(np.sum(values))
            grads, _ = _backward_cache(m, acts, G / len(idx))
            sgd_step(m, grads, lr_eff, velocity, cfg.momentum)
        trace.records.append(_epoch_record(m, epoch, total / n, Xtr, ytr, Xte, yte))
    return m, trace


def _balanced_indices(gen, y, n_classes, count):
    present = [c for c in range(n_classes) if np.any(y == c)]
    members = [np.flatnonzero(y == c) for c in present]
    u = gen.random((count, 2))
    cls = np.minimum((u[:, 0] * len(present)).astype(np.int64), len(present) - 1)
    out = np.empty(count, dtype=np.int64)
    for i, (c, v) in enumerate(zip(cls, u[:, 1])):
        pool = members[c]
        out[i] = pool[min(int(v * len(pool)), len(pool) - 1)]
    return out


def retrain_head(m, dataset, seed, balanced=False, epochs=20, lr=0.1, decay_every=5,
                 decay=0.1, batch_size=64, momentum=0.9):
    """Re-initialize the output layer and fit it with CE on frozen features.

    The learning rate starts at ``lr`` and is multiplied by ``decay`` every
    ``decay_every`` epochs. ``balanced`` draws each example by picking a
    class uniformly, then a member of it uniformly. Returns a new model; the
    hidden layers are copied bit-for-bit.
    """
    Xtr, ytr = dataset.subset("train")
    H = features(m, Xtr)
    head = init_mlp((m.layer_dims[-2], m.n_classes), seed, stream_name="probe/init")
    velocity = zero_velocity(head)
    gen = rng.stream(seed, "probe/order")
    ce = LossSpec("ce")
    n = len(ytr)
    for epoch in range(epochs):
        lr_eff = lr * decay ** (epoch // decay_every)
        if balanced:
            order = _balanced_indices(gen, ytr, m.n_classes, n)
        else:
            order = rng.permutation(gen, n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            hb = H[idx]
            Z = forward(head, hb)
            _, G, _ = loss_batch(ce, Z, ytr[idx])
            grads, _ = backward(head, hb, G / len(idx))
            sgd_step(head, grads, lr_eff, velocity, momentum)
    probed = m.copy()
    probed.weights[-1] = head.weights[0]
    probed.biases[-1] = head.biases[0]
    return probed


def probe_representation(m, dataset, seed, balanced=False, **kwargs):
    """Test accuracy after refitting only the output layer (see retrain_head)."""
    probed = retrain_head(m, dataset, seed, balanced=balanced, **kwargs)
    Xte, yte = dataset.subset("test")
    return accuracy(probed, Xte, yte)
