"""Matrix-based Renyi (order 2) entropy and mutual-information losses.

For a trace-normalised PSD kernel matrix ``K`` the order-2 entropy is
``S(K) = -log2 tr(K^2)``. Because ``K`` is symmetric, ``tr(K^2)`` equals the
squared Frobenius norm, which costs O(n^2) and needs no eigendecomposition.

Mutual information between a representation and a label vector is
``S(K_z) + S(K_label) - S(K_z * K_label / tr(K_z * K_label))``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from hcd import diffcore as dc
from hcd.diffcore import NumericError, Tensor

MEDIAN = "median"
MEDIAN_GRAD = "median_grad"
BANDWIDTH_RULES = (MEDIAN, MEDIAN_GRAD)
FALLBACK_BANDWIDTH = 1.0
_JOINT_TRACE_FLOOR = 1e-15


class BatchTooSmallError(ValueError):
    """Kernel estimators need at least two samples."""


class DegenerateJointError(NumericError):
    """The Hadamard product of two kernels has (near) zero trace."""


@dataclass
class KernelMatrix:
    """Trace-normalised symmetric PSD similarity matrix over a batch.

    ``values`` is a :class:`Tensor` so gradients can flow through it.
    """

    values: Tensor

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def validate(self, atol: float = 1e-12) -> None:
        """Check symmetry, unit trace and PSD-ness (eigenvalues >= -1e-10)."""
        k = self.values.data
        if k.ndim != 2 or k.shape[0] != k.shape[1]:
            raise ValueError(f"kernel must be square, got {k.shape}")
        if not np.array_equal(k, k.T):
            raise ValueError("kernel is not symmetric")
        if abs(np.trace(k) - 1.0) > atol:
            raise ValueError(f"kernel trace is {np.trace(k)!r}, expected 1")
        if np.linalg.eigvalsh(k).min() < -1e-10:
            raise ValueError("kernel is not positive semidefinite")


def _as_labels(labels) -> np.ndarray:
    arr = np.asarray(labels)
    if arr.ndim != 1:
        raise ValueError(f"labels must be 1-D, got shape {arr.shape}")
    if arr.size and (arr.min() < 0 or not np.issubdtype(arr.dtype, np.integer)):
        raise ValueError("labels must be nonnegative integers")
    return arr.astype(np.int64)


def _median_pairs(sqdist: np.ndarray) -> np.ndarray:
    """Flat indices into ``sqdist`` of the one or two pairs whose distances
    average to the bandwidth; empty when every distance is zero.

    Zero distances are ignored when they would make the median zero.
    """
    n = sqdist.shape[0]
    iu = np.triu_indices(n, k=1)
    flat = iu[0] * n + iu[1]
    dists = np.sqrt(np.maximum(sqdist[iu], 0.0))
    if np.median(dists) <= 0.0:
        keep = dists > 0.0
        flat, dists = flat[keep], dists[keep]
    if dists.size == 0:
        return flat
    order = np.argsort(dists, kind="stable")
    m = dists.size
    mid = order[[(m - 1) // 2, m // 2]] if m % 2 == 0 else order[[m // 2]]
    return flat[mid]


def median_bandwidth(sqdist: np.ndarray) -> float:
    """Median pairwise distance; falls back when the batch is degenerate.

    If the median is zero but some distances are positive, the median of the
    positive distances is used. If all distances are zero the bandwidth is
    :data:`FALLBACK_BANDWIDTH`.
    """
    pairs = _median_pairs(sqdist)
    if pairs.size == 0:
        return FALLBACK_BANDWIDTH
    return float(np.mean(np.sqrt(np.maximum(sqdist.reshape(-1)[pairs], 0.0))))


def _median_bandwidth_tensor(sq: Tensor) -> Tensor:
    """Differentiable median bandwidth: gradient flows to the selected pairs."""
    pairs = _median_pairs(sq.data)
    if pairs.size == 0:
        return Tensor(FALLBACK_BANDWIDTH)
    picked = dc.take(dc.reshape(sq, (sq.size,)), pairs, axis=0)
    return dc.mean(dc.sqrt(picked))


def rbf_kernel(z: Tensor, bandwidth: Union[float, str] = MEDIAN) -> KernelMatrix:
    """Gaussian kernel ``exp(-||z_i - z_j||^2 / (2 s^2))`` divided by its trace.

    With ``bandwidth="median"`` the scale ``s`` is the median pairwise
    distance of this batch, treated as a constant in the backward pass.
    ``"median_grad"`` uses the same value but differentiates through it,
    which makes the gradient of any loss built on the kernel orthogonal to
    rescaling ``z`` (the value itself is scale-free).
    """
    if z.ndim != 2:
        raise ValueError(f"rbf_kernel expects (n, D) features, got {z.shape}")
    if z.shape[0] < 2:
        raise BatchTooSmallError(f"kernel estimators need n >= 2, got {z.shape[0]}")
    sq = dc.pairwise_sqdist(z)
    if isinstance(bandwidth, str):
        if bandwidth not in BANDWIDTH_RULES:
            raise ValueError(f"unknown bandwidth rule {bandwidth!r}")
        if bandwidth == MEDIAN_GRAD:
            sigma = _median_bandwidth_tensor(sq)
            gram = dc.exp(sq / (sigma * sigma * -2.0))
            return KernelMatrix(gram / dc.trace(gram))
        sigma = median_bandwidth(sq.data)
    else:
        sigma = float(bandwidth)
        if not sigma > 0.0:
            raise ValueError(f"bandwidth must be positive, got {bandwidth!r}")
    gram = dc.exp(sq * (-1.0 / (2.0 * sigma * sigma)))
    return KernelMatrix(gram / dc.trace(gram))


def label_kernel(labels) -> KernelMatrix:
    """Delta kernel on discrete labels, trace-normalised (diagonal ``1/n``)."""
    y = _as_labels(labels)
    if y.size < 2:
        raise BatchTooSmallError(f"kernel estimators need n >= 2, got {y.size}")
    same = (y[:, None] == y[None, :]).astype(np.float64)
    return KernelMatrix(Tensor(same / y.size))


def matrix_entropy(k: KernelMatrix) -> Tensor:
    """Order-2 matrix entropy ``-log2 ||K||_F^2``, in ``[0, log2 n]``."""
    purity = dc.frobenius_sq(k.values)
    if not purity.data > 0.0 or not np.isfinite(purity.data):
        raise NumericError(f"tr(K^2) = {purity.data!r}; kernel is corrupt")
    return -dc.log2(purity)


def joint_kernel(a: KernelMatrix, b: KernelMatrix) -> KernelMatrix:
    if a.n != b.n:
        raise ValueError(f"joint_kernel: batch sizes differ ({a.n} vs {b.n})")
    prod = a.values * b.values
    tr = dc.trace(prod)
    if not tr.data > _JOINT_TRACE_FLOOR:
        raise DegenerateJointError(f"trace of Hadamard product is {tr.data!r}")
    return KernelMatrix(prod / tr)


def mutual_information(kz: KernelMatrix, kl: KernelMatrix) -> Tensor:
    return matrix_entropy(kz) + matrix_entropy(kl) - matrix_entropy(joint_kernel(kz, kl))


def mi_domain_loss(z_hat: Tensor, d, bandwidth=MEDIAN) -> Tensor:
    """``I(z_hat; d)``; minimised to strip domain information."""
    return mutual_information(rbf_kernel(z_hat, bandwidth), label_kernel(d))


def mi_class_loss(z_hat: Tensor, y, bandwidth=MEDIAN) -> Tensor:
    """``-I(z_hat; y)``; minimised to keep class information."""
    return -mutual_information(rbf_kernel(z_hat, bandwidth), label_kernel(y))


def sparse_loss(mask: Tensor) -> Tensor:
    """L1 norm of each mask row divided by the channel count, batch-averaged."""
    if mask.ndim != 2:
        raise ValueError(f"sparse_loss expects (n, C) mask, got {mask.shape}")
    return dc.mean(mask)
