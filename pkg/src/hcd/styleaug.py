"""StyleMix latent perturbation and Gram-matrix consistency.

StyleMix re-styles each sample with the channel statistics of a donor picked
by a permutation of the batch::

    F_tilde[i] = sigma[perm[i]] * (F[i] - mu[i]) / (sigma[i] + eps) + mu[perm[i]]

Statistics are spatial, per sample and channel, with population std. By
default they are detached (constants in the backward pass).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from hcd import diffcore as dc
from hcd.diffcore import ShapeError, Tensor

DEFAULT_EPS = 1e-6


@dataclass
class StyleStats:
    mu: np.ndarray
    sigma: np.ndarray
    epsilon: float = DEFAULT_EPS


def _check_map(F: Tensor) -> None:
    if F.ndim != 4:
        raise ShapeError(f"expected (n, C, H, W) feature map, got {F.shape}")


def compute_stats(F: Tensor, epsilon: float = DEFAULT_EPS) -> StyleStats:
    _check_map(F)
    mu = F.data.mean(axis=(2, 3))
    centered = F.data - mu[:, :, None, None]
    sigma = np.sqrt((centered * centered).mean(axis=(2, 3)))
    return StyleStats(mu, sigma, epsilon)


def sample_permutation(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random permutation of the batch indices."""
    return rng.permutation(n)


def _check_perm(perm, n: int) -> np.ndarray:
    perm = np.asarray(perm, dtype=np.intp)
    if perm.shape != (n,) or not np.array_equal(np.sort(perm), np.arange(n)):
        raise ValueError(f"not a permutation of range({n}): {perm!r}")
    return perm


def _expand(stat: np.ndarray, shape) -> Tensor:
    return Tensor(np.broadcast_to(stat[:, :, None, None], shape))


def stylemix(F: Tensor, perm, epsilon: float = DEFAULT_EPS, detach_stats: bool = True) -> Tensor:
    """Swap per-channel style statistics between samples according to ``perm``.

    With ``detach_stats=False`` gradients also flow through the means and
    standard deviations of both recipient and donor.
    """
    _check_map(F)
    if not epsilon > 0.0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    perm = _check_perm(perm, F.shape[0])
    if detach_stats:
        st = compute_stats(F, epsilon)
        mu, sigma = _expand(st.mu, F.shape), _expand(st.sigma, F.shape)
        mu_d, sigma_d = _expand(st.mu[perm], F.shape), _expand(st.sigma[perm], F.shape)
    else:
        n, c = F.shape[:2]
        mu4 = dc.reshape(dc.mean(F, axis=(2, 3)), (n, c, 1, 1))
        mu = dc.broadcast_to(mu4, F.shape)
        var4 = dc.reshape(dc.mean(dc.square(F - mu), axis=(2, 3)), (n, c, 1, 1))
        sigma4 = dc.sqrt(var4)
        sigma = dc.broadcast_to(sigma4, F.shape)
        mu_d = dc.broadcast_to(dc.take(mu4, perm, axis=0), F.shape)
        sigma_d = dc.broadcast_to(dc.take(sigma4, perm, axis=0), F.shape)
    content = (F - mu) / (sigma + epsilon)
    return sigma_d * content + mu_d


def gram(F: Tensor) -> Tensor:
    """Per-sample channel co-activation matrix ``A A^T / (C H W)``."""
    _check_map(F)
    n, c, h, w = F.shape
    a = dc.reshape(F, (n, c, h * w))
    return dc.bmm(a, dc.transpose(a, (0, 2, 1))) / float(c * h * w)


def gram_loss(F: Tensor, F_tilde: Tensor) -> Tensor:
    """Batch mean of ``||GM(F) - GM(F_tilde)||_F^2``."""
    if F.shape != F_tilde.shape:
        raise ShapeError(f"gram_loss: shapes differ, {F.shape} vs {F_tilde.shape}")
    diff = gram(F) - gram(F_tilde)
    return dc.frobenius_sq(diff) / float(F.shape[0])


def stylemix_batch(F: Tensor, rng: np.random.Generator, epsilon: float = DEFAULT_EPS,
                   detach_stats: bool = True, perm: Optional[np.ndarray] = None):
    """Draw a permutation (unless given) and apply :func:`stylemix`."""
    perm = sample_permutation(F.shape[0], rng) if perm is None else perm
    return stylemix(F, perm, epsilon, detach_stats), perm
