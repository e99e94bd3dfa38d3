"""Central-difference checks of analytic gradients."""

from dataclasses import dataclass

import numpy as np

from . import rng
from .losses import loss_batch
from .network import backward, forward, init_mlp

STEP = 1e-5
# below this magnitude deviations are judged in absolute terms, so
# rel_dev < 1e-4 means "within 1e-4 relative or 1e-7 absolute"
ABS_SCALE = 1e-3


def rel_dev(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(a - n) / np.maximum(ABS_SCALE, np.abs(n))))


def numeric_grad(f, x, h=STEP):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        orig = x[i]
        x[i] = orig + h
        up = f(x)
        x[i] = orig - h
        down = f(x)
        x[i] = orig
        g[i] = (up - down) / (2 * h)
    return g


@dataclass
class GradcheckReport:
    logit_dev: float
    mlp_dev: float
    draws: int

    @property
    def max_dev(self):
        return max(self.logit_dev, self.mlp_dev)


def _central_logit_grad(spec, z, y, h=STEP):
    # all 2K perturbed copies go through the loss in one batch
    k = len(z)
    shifts = np.concatenate([np.eye(k), -np.eye(k)]) * h
    values = loss_batch(spec, z[None, :] + shifts, np.full(2 * k, y))[0]
    return (values[:k] - values[k:]) / (2 * h)


def check_logits(spec, draws=50, seed=0, k_range=(2, 10), scale=5.0):
    """Worst relative deviation over random logit vectors and labels."""
    gen = rng.stream(seed, "gradcheck/logits")
    worst = 0.0
    for _ in range(draws):
        k = k_range[0] + int(rng.uniform(gen, 1)[0] * (k_range[1] - k_range[0] + 1))
        z = scale * (2.0 * rng.uniform(gen, k) - 1.0)
        y = int(rng.uniform(gen, 1)[0] * k)
        _, G, _ = loss_batch(spec, z[None], np.array([y]))
        worst = max(worst, rel_dev(G[0], _central_logit_grad(spec, z, y)))
    return worst


def _central_param_grads(m, X, y, spec, h=STEP):
    """Central differences of the batch-summed loss for every parameter.

    Each perturbed network is one slice of a stacked (P, ...) copy of the
    weights, so all 2P evaluations share a single batched forward pass.
    """
    sizes = [p.size for p in m.parameters()]
    n_par = sum(sizes)
    n_layers = len(m.weights)
    stacks = [np.repeat(p[None], 2 * n_par, axis=0) for p in m.parameters()]
    row = 0
    for stack, size in zip(stacks, sizes):
        flat = stack.reshape(2 * n_par, -1)
        for j in range(size):
            flat[row, j] += h
            flat[n_par + row, j] -= h
            row += 1
    W, B = stacks[:n_layers], stacks[n_layers:]
    H = np.repeat(X[None], 2 * n_par, axis=0)
    for i in range(n_layers):
        H = np.einsum("pni,poi->pno", H, W[i]) + B[i][:, None, :]
        if i < n_layers - 1:
            H = np.maximum(H, 0.0)
    values = loss_batch(spec, H.reshape(-1, H.shape[-1]), np.tile(y, 2 * n_par))[0]
    totals = values.reshape(2 * n_par, -1).sum(axis=1)
    flat = (totals[:n_par] - totals[n_par:]) / (2 * h)
    return np.split(flat, np.cumsum(sizes)[:-1])


def check_mlp(spec, seed=0, dims=(2, 8, 3), batch=5):
    """Worst relative deviation of parameter gradients of the batch-summed loss."""
    m = init_mlp(dims, seed)
    gen = rng.stream(seed, "gradcheck/mlp")
    X = rng.normal(gen, (batch, dims[0]))
    y = np.array([int(u * dims[-1]) for u in rng.uniform(gen, batch)])
    _, G, _ = loss_batch(spec, forward(m, X), y)
    grads, _ = backward(m, X, G)
    numeric = _central_param_grads(m, X, y, spec)
    return max(rel_dev(a.ravel(), n) for a, n in zip(grads.parameters(), numeric))


def gradcheck(spec, draws=50, seed=0):
    return GradcheckReport(check_logits(spec, draws, seed), check_mlp(spec, seed), draws)
