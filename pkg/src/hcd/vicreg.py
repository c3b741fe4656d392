"""Variance-invariance-covariance regularisation on projected embeddings."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from hcd import diffcore as dc
from hcd.diffcore import ShapeError, Tensor

STD_STABILIZER = 1e-4


class BatchTooSmallError(ValueError):
    pass


@dataclass
class VicregWeights:
    lambda_sim: float = 25.0
    lambda_std: float = 25.0
    lambda_cov: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        for name in ("lambda_sim", "lambda_std", "lambda_cov"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")


@dataclass
class ProjectorParams:
    """Two affine layers ``D -> D_p -> D_p`` with a ReLU in between."""

    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, dim: int, width: int = 256, rng: Optional[np.random.Generator] = None) -> "ProjectorParams":
        rng = np.random.default_rng() if rng is None else rng
        s1, s2 = 1.0 / math.sqrt(dim), 1.0 / math.sqrt(width)
        return cls(
            Tensor(rng.uniform(-s1, s1, size=(dim, width)), requires_grad=True),
            Tensor(rng.uniform(-s1, s1, size=width), requires_grad=True),
            Tensor(rng.uniform(-s2, s2, size=(width, width)), requires_grad=True),
            Tensor(rng.uniform(-s2, s2, size=width), requires_grad=True),
        )

    def __call__(self, z: Tensor) -> Tensor:
        return dc.relu(z @ self.W1 + self.b1) @ self.W2 + self.b2

    def parameters(self) -> list[Tensor]:
        return [self.W1, self.b1, self.W2, self.b2]


def _check_pair(z: Tensor, z_tilde: Tensor) -> None:
    if z.shape != z_tilde.shape or z.ndim != 2:
        raise ShapeError(f"expected equal (n, D) embeddings, got {z.shape} and {z_tilde.shape}")


def _check_batch(z: Tensor) -> None:
    if z.ndim != 2:
        raise ShapeError(f"expected (n, D) embeddings, got {z.shape}")
    if z.shape[0] < 2:
        raise BatchTooSmallError(f"need at least 2 samples, got {z.shape[0]}")


def invariance_loss(z: Tensor, z_tilde: Tensor) -> Tensor:
    _check_pair(z, z_tilde)
    return dc.frobenius_sq(z - z_tilde) / float(z.shape[0])


def variance_loss(z: Tensor, gamma: float = 1.0) -> Tensor:
    """Mean hinge ``max(0, gamma - std_j)`` with ``std = sqrt(var + 1e-4)``."""
    _check_batch(z)
    n = z.shape[0]
    # unbiased variance, as in the covariance term
    var = dc.batch_var(z) * (n / (n - 1.0))
    std = dc.sqrt(var + STD_STABILIZER)
    return dc.mean(dc.relu(gamma - std))


def covariance_loss(z: Tensor) -> Tensor:
    """Squared off-diagonal covariance entries (divisor n - 1), over ``D_p``."""
    _check_batch(z)
    n, d = z.shape
    centered = z - dc.batch_mean(z)
    cov = (centered.T @ centered) / (n - 1.0)
    off = cov * Tensor(1.0 - np.eye(d))
    return dc.frobenius_sq(off) / float(d)


@dataclass
class VicregTerms:
    total: Tensor
    sim: Tensor
    std: Tensor
    cov: Tensor
    breakdown: dict = field(default_factory=dict)


def vicreg_loss(z: Tensor, z_tilde: Tensor, w: Optional[VicregWeights] = None) -> VicregTerms:
    """Weighted sum; variance and covariance terms are averaged over both views."""
    w = VicregWeights() if w is None else w
    _check_pair(z, z_tilde)
    sim = invariance_loss(z, z_tilde)
    std = (variance_loss(z, w.gamma) + variance_loss(z_tilde, w.gamma)) * 0.5
    cov = (covariance_loss(z) + covariance_loss(z_tilde)) * 0.5
    total = sim * w.lambda_sim + std * w.lambda_std + cov * w.lambda_cov
    breakdown = {"sim": float(sim.data), "std": float(std.data), "cov": float(cov.data)}
    return VicregTerms(total, sim, std, cov, breakdown)
