"""Reference implementations used to certify the main code paths.

Each function here recomputes something the package already does, by a
different route: eigenvalues instead of Frobenius norms, a hand-written
classifier loop instead of :class:`hcd.trainloop.Trainer`.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

from hcd import diffcore as dc
from hcd import kernelinfo
from hcd.diffcore import Tape, Tensor
from hcd.model import Backbone


def eig_entropy(k: np.ndarray) -> float:
    """Order-2 matrix entropy from the spectrum: ``-log2 sum(lambda_i^2)``."""
    lam = np.linalg.eigvalsh((k + k.T) / 2.0)
    return -math.log2(float(np.sum(lam * lam)))


def random_kernel(rng: np.random.Generator, n: int) -> np.ndarray:
    """Random trace-one PSD matrix: a Gram matrix of ``n`` random points,
    sometimes rank deficient, sometimes close to diagonal."""
    dim = int(rng.integers(1, n + 1))
    x = rng.normal(size=(n, dim)) * rng.uniform(0.1, 3.0)
    g = x @ x.T
    if rng.random() < 0.3:
        g = np.exp(-kernel_sqdist(x) / (2.0 * rng.uniform(0.05, 5.0) ** 2))
    return g / np.trace(g)


def kernel_sqdist(x: np.ndarray) -> np.ndarray:
    sq = np.sum(x * x, axis=1)
    return np.maximum(sq[:, None] + sq[None, :] - 2.0 * x @ x.T, 0.0)


# ---------------------------------------------------------------------------
# plain classifier


def _streams(seed: int) -> dict:
    # same spawn layout as the trainer: backbone init first, data order fourth
    children = np.random.SeedSequence(seed).spawn(6)
    make = lambda ss: np.random.Generator(np.random.PCG64(ss))  # noqa: E731
    return {"init": make(children[0]), "order": make(children[3])}


def _norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    n, c, h, w = x.shape
    flat = dc.reshape(dc.transpose(x, (0, 2, 3, 1)), (n * h * w, c))
    normed = (flat - dc.batch_mean(flat)) / dc.sqrt(dc.batch_var(flat) + eps)
    out = normed * scale + shift
    return dc.transpose(dc.reshape(out, (n, h, w, c)), (0, 3, 1, 2))


def _forward(params: dict, X: np.ndarray) -> Tensor:
    p = params
    h = dc.conv2d(Tensor(X), p["conv1_w"], p["conv1_b"], stride=2, pad=0)
    h = dc.relu(_norm(h, p["bn1_scale"], p["bn1_shift"]))
    f = dc.conv2d(h, p["conv2_w"], p["conv2_b"], stride=2, pad=1)
    f = dc.relu(_norm(f, p["bn2_scale"], p["bn2_shift"]))
    z = dc.mean(f, axis=(2, 3))
    return z @ p["head_w"] + p["head_b"]


def erm_reference(seed: int, images: np.ndarray, y: np.ndarray, steps: int, *, n_classes: int = 2,
                  hidden: int = 16, channels: int = 32, batch_size: int = 32, lr: float = 2e-4,
                  betas=(0.9, 0.999), eps: float = 1e-8, grad_clip: float = 5.0) -> dict:
    """Train the backbone alone with Adam for ``steps`` minibatches.

    Returns the final parameters keyed like ``HCDModel.named_parameters``.
    """
    rng = _streams(seed)
    bb = Backbone.init(rng["init"], hidden=hidden, channels=channels, n_classes=n_classes)
    params = {"conv1_w": bb.conv1_w, "conv1_b": bb.conv1_b, "conv2_w": bb.conv2_w,
              "conv2_b": bb.conv2_b, "head_w": bb.head_w, "head_b": bb.head_b,
              "bn1_scale": bb.bn1.scale, "bn1_shift": bb.bn1.shift,
              "bn2_scale": bb.bn2.scale, "bn2_shift": bb.bn2.shift}
    names = list(params)
    m = {k: np.zeros_like(params[k].data) for k in names}
    v = {k: np.zeros_like(params[k].data) for k in names}
    b1, b2 = betas
    t = 0
    while t < steps:
        order = rng["order"].permutation(len(y))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            if len(idx) < 2:
                continue
            for k in names:
                params[k].grad = None
            with Tape() as tape:
                loss = dc.cross_entropy(_forward(params, images[idx]), y[idx])
            tape.backward(loss)
            grads = {k: params[k].grad for k in names}
            total = 0.0
            for k in names:
                total += float(np.sum(grads[k] * grads[k]))
            norm = math.sqrt(total)
            if grad_clip > 0 and norm > grad_clip:
                grads = {k: g * (grad_clip / norm) for k, g in grads.items()}
            t += 1
            for k in names:
                g = grads[k]
                m[k] = b1 * m[k] + (1.0 - b1) * g
                v[k] = b2 * v[k] + (1.0 - b2) * (g * g)
                step = lr * (m[k] / (1.0 - b1 ** t)) / (np.sqrt(v[k] / (1.0 - b2 ** t)) + eps)
                params[k].data = params[k].data - step
            if t == steps:
                break
    return {k: params[k].data.copy() for k in names}


# ---------------------------------------------------------------------------
# mutation testing


@contextmanager
def flipped_mi_domain_gradient():
    """Patch ``kernelinfo.mi_domain_loss`` so its value is unchanged but its
    gradient has the wrong sign. Gradient checks must catch this."""
    original = kernelinfo.mi_domain_loss

    def mutated(z_hat, d, bandwidth=kernelinfo.MEDIAN):
        loss = original(z_hat, d, bandwidth)
        return dc.detach(loss) * 2.0 - loss

    kernelinfo.mi_domain_loss = mutated
    try:
        yield
    finally:
        kernelinfo.mi_domain_loss = original
