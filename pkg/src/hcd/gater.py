"""Adaptive channel gating with a bottlenecked mask generator.

    mask = sigmoid(W2 @ relu(BN(W1 @ z)))
    z_hat = z * mask * xi / (1 - p)        (train, inverted dropout)
    z_hat = z * mask                        (eval)

``xi`` is a Bernoulli(1 - p) channel-dropout draw. With
``inverted_dropout=False`` the training branch is the literal ``z * mask * xi``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from hcd import diffcore as dc
from hcd.diffcore import NumericError, Tensor

TRAIN = "train"
EVAL = "eval"


@dataclass
class BatchNorm1d:
    """Batch normalisation over the bottleneck units.

    Train mode normalises with batch statistics (gradient flows through them)
    and updates running estimates; eval mode, or a train batch of one, uses
    the running estimates.
    """

    num_features: int
    momentum: float = 0.1
    eps: float = 1e-5
    scale: Tensor = None
    shift: Tensor = None
    running_mean: np.ndarray = None
    running_var: np.ndarray = None

    def __post_init__(self):
        if self.scale is None:
            self.scale = Tensor(np.ones(self.num_features), requires_grad=True)
        if self.shift is None:
            self.shift = Tensor(np.zeros(self.num_features), requires_grad=True)
        if self.running_mean is None:
            self.running_mean = np.zeros(self.num_features)
        if self.running_var is None:
            self.running_var = np.ones(self.num_features)

    def __call__(self, x: Tensor, mode: str, update: bool = True) -> Tensor:
        n = x.shape[0]
        if mode == TRAIN and n > 1:
            mu = dc.batch_mean(x)
            var = dc.batch_var(x)
            if update:
                m = self.momentum
                # running variance tracks the unbiased estimate
                unbiased = var.data * n / (n - 1)
                self.running_mean = (1.0 - m) * self.running_mean + m * mu.data
                self.running_var = (1.0 - m) * self.running_var + m * unbiased
            normed = (x - mu) / dc.sqrt(var + self.eps)
        else:
            normed = (x - Tensor(self.running_mean)) / Tensor(np.sqrt(self.running_var + self.eps))
        return normed * self.scale + self.shift

    def parameters(self) -> list[Tensor]:
        return [self.scale, self.shift]


@dataclass
class GateParams:
    """Weights of the mask generator plus dropout settings."""

    W1: Tensor
    W2: Tensor
    bn: BatchNorm1d
    r: int
    p: float = 0.2
    inverted_dropout: bool = True

    @property
    def dim(self) -> int:
        return self.W1.shape[1]

    @classmethod
    def init(cls, dim: int, r: int = 16, p: float = 0.2, rng: Optional[np.random.Generator] = None,
             inverted_dropout: bool = True) -> "GateParams":
        """Uniform(+-1/sqrt(fan_in)) weights; BN scale 1, shift 0."""
        if r < 1 or dim % r:
            raise ValueError(f"reduction ratio r={r} must divide D={dim}")
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        rng = np.random.default_rng() if rng is None else rng
        hidden = dim // r
        b1 = 1.0 / math.sqrt(dim)
        b2 = 1.0 / math.sqrt(hidden)
        w1 = Tensor(rng.uniform(-b1, b1, size=(hidden, dim)), requires_grad=True)
        w2 = Tensor(rng.uniform(-b2, b2, size=(dim, hidden)), requires_grad=True)
        return cls(w1, w2, BatchNorm1d(hidden), r, p, inverted_dropout)

    def parameters(self) -> list[Tensor]:
        return [self.W1, self.W2] + self.bn.parameters()


@dataclass
class GateOutput:
    z_hat: Tensor
    mask: Tensor
    dropout_realization: Optional[np.ndarray] = None
    stats: dict = field(default_factory=dict)


def _check_finite(t: Tensor, layer: str) -> None:
    if not np.isfinite(t.data).all():
        raise NumericError(f"non-finite activations in gater layer {layer!r}")


def pool(feature_map: Tensor) -> Tensor:
    """Global average pooling, ``(n, C, H, W) -> (n, C)``."""
    if feature_map.ndim != 4:
        raise dc.ShapeError(f"pool expects (n, C, H, W), got {feature_map.shape}")
    return dc.mean(feature_map, axis=(2, 3))


def compute_mask(z: Tensor, params: GateParams, mode: str = TRAIN, update_stats: bool = True) -> Tensor:
    if z.ndim != 2 or z.shape[1] != params.dim:
        raise dc.ShapeError(f"gate expects (n, {params.dim}) input, got {z.shape}")
    _check_finite(z, "input")
    h = z @ params.W1.T
    _check_finite(h, "W1")
    h = dc.relu(params.bn(h, mode, update=update_stats))
    _check_finite(h, "bn")
    logits = h @ params.W2.T
    _check_finite(logits, "W2")
    return dc.sigmoid(logits)


def sample_dropout(shape, p: float, rng: np.random.Generator) -> np.ndarray:
    """Binary keep-mask with ``P(keep) = 1 - p``."""
    if p == 0.0:
        return np.ones(shape)
    return (rng.random(shape) >= p).astype(np.float64)


def gate_forward(z: Tensor, params: GateParams, mode: str = TRAIN,
                 rng: Optional[np.random.Generator] = None, update_stats: bool = True,
                 xi: Optional[np.ndarray] = None) -> GateOutput:
    """Mask ``z`` channel-wise; in train mode also apply Bernoulli dropout.

    ``xi`` may be passed to replay a fixed dropout realisation.
    """
    if mode not in (TRAIN, EVAL):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    mask = compute_mask(z, params, mode, update_stats)
    gated = z * mask
    if mode == EVAL:
        return GateOutput(gated, mask, None, _mask_stats(mask))
    if xi is None:
        rng = np.random.default_rng() if rng is None else rng
        xi = sample_dropout(z.shape, params.p, rng)
    keep = xi / (1.0 - params.p) if params.inverted_dropout else xi
    return GateOutput(gated * Tensor(keep), mask, xi, _mask_stats(mask))


def _mask_stats(mask: Tensor) -> dict:
    m = mask.data
    return {"mask_mean": float(m.mean()), "mask_std": float(m.std())}


def expected_risk_mc(z: Tensor, params: GateParams, labels, classifier: Callable[[Tensor], Tensor],
                     trials: int, rng: Optional[np.random.Generator] = None) -> float:
    """Monte-Carlo estimate of ``E_xi[CE(classifier(z * mask * xi), y)]``.

    Batch-norm statistics are not updated. Each trial draws a fresh ``xi``.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng() if rng is None else rng
    total = 0.0
    for _ in range(trials):
        out = gate_forward(z, params, TRAIN, rng=rng, update_stats=False)
        total += float(dc.cross_entropy(classifier(out.z_hat), labels).data)
    return total / trials
