"""Hierarchical causal dropout: channel gating with matrix-based Renyi
mutual-information losses, StyleMix and VICReg, on a small autodiff core."""

from hcd.kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
