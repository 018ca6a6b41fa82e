"""Shared test utilities: random instances and a central-difference gradient oracle."""

import numpy as np

from ulab.nn import forward, init_model, loss_and_grad, one_hot, softmax
from ulab.trw import build_forget_targets, similarity_scores

FD_STEP = 1e-5
ABS_FLOOR = 1e-8
KINK_MARGIN = 1e-3


def min_relu_preactivation(model, x):
    """Smallest ``|z|`` entering a ReLU; central differences are only valid well away from 0."""
    if model.activation != "relu" or model.n_layers == 1:
        return np.inf
    h, out = x, np.inf
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        z = h @ w.T + b
        out = min(out, float(np.abs(z).min()))
        h = np.maximum(z, 0.0)
    return out


def random_triple(rng, activation="relu", kind=None):
    """A small random (model, batch, targets) instance.

    ``kind`` picks the target family: one-hot, dirichlet or tilted (TRW targets
    built from the model itself for a random forget class).  Instances with a
    ReLU pre-activation within ``KINK_MARGIN`` of zero are redrawn.
    """
    while True:
        model, x, t = _draw_triple(rng, activation, kind)
        if min_relu_preactivation(model, x) > KINK_MARGIN:
            return model, x, t


def _draw_triple(rng, activation, kind):
    k = int(rng.integers(3, 6))
    arch = [int(rng.integers(2, 5))] + [int(rng.integers(2, 6)) for _ in range(rng.integers(0, 3))]
    arch.append(k)
    model = init_model(arch, int(rng.integers(0, 2**31)), activation)
    n = int(rng.integers(1, 6))
    x = rng.normal(size=(n, arch[0]))
    kind = kind or ("onehot", "dirichlet", "tilted")[int(rng.integers(0, 3))]
    if kind == "onehot":
        t = one_hot(rng.integers(0, k, n), k)
    elif kind == "dirichlet":
        t = rng.dirichlet(np.ones(k), size=n)
    else:
        f = int(rng.integers(0, k))
        prof = similarity_scores(model, f)
        t = build_forget_targets(model, x, f, prof, float(rng.uniform(0, 20)))
    return model, x, t


def numeric_loss(model, x, t):
    p = softmax(forward(model, x))
    return float(np.mean(-np.sum(t * np.log(np.clip(p, 1e-12, 1.0)), axis=1)))


def fd_grad_check(model, x, t, h=FD_STEP):
    """Largest per-coordinate error between analytic and central-difference gradients.

    Relative error where either value is at least ``ABS_FLOOR`` in magnitude,
    absolute error otherwise.
    """
    _, grads = loss_and_grad(model, x, t)
    worst = 0.0
    for li in range(model.n_layers):
        for params, analytic in ((model.weights[li], grads[li][0]),
                                 (model.biases[li], grads[li][1])):
            flat, g = params.reshape(-1), analytic.reshape(-1)
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + h
                up = numeric_loss(model, x, t)
                flat[i] = keep - h
                down = numeric_loss(model, x, t)
                flat[i] = keep
                num = (up - down) / (2 * h)
                scale = max(abs(num), abs(g[i]))
                err = abs(num - g[i]) / scale if scale >= ABS_FLOOR else abs(num - g[i])
                worst = max(worst, err)
    return worst
