"""Backend selection for the hot kernels.

The compiled extension is used when it imports cleanly; otherwise, or when
``HCD_PURE_PYTHON=1`` is set, the numpy fallback is used. Both backends
produce identical bits, so the choice only affects speed.
"""

import logging
import os

import numpy as np

from hcd import _kernels_py

logger = logging.getLogger(__name__)

_compiled = None
if os.environ.get("HCD_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from hcd import _kernels as _compiled  # type: ignore[attr-defined]
    except ImportError:  # extension not built
        logger.debug("compiled kernels unavailable, using numpy fallback")
        _compiled = None

BACKEND = "compiled" if _compiled is not None else "python"
_impl = _compiled if _compiled is not None else _kernels_py


def pairwise_sqdist(z: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances between the rows of ``z`` (n x n)."""
    return _impl.pairwise_sqdist(np.ascontiguousarray(z, dtype=np.float64))


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Unfold an NCHW batch into rows of receptive fields."""
    return _impl.im2col(np.ascontiguousarray(x, dtype=np.float64), kh, kw, stride, pad)


def col2im(cols: np.ndarray, shape, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Fold receptive-field rows back into an NCHW array, summing overlaps."""
    n, c, h, w = shape
    return _impl.col2im(np.ascontiguousarray(cols, dtype=np.float64),
                        n, c, h, w, kh, kw, stride, pad)
