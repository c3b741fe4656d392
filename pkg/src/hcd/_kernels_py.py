"""Pure-numpy fallback for the compiled kernels in ``_kernels.pyx``.

Each function reproduces the compiled loop's accumulation order, so the two
backends agree bit for bit.
"""

import numpy as np


def pairwise_sqdist(z):
    z = np.ascontiguousarray(z, dtype=np.float64)
    n, d = z.shape
    out = np.zeros((n, n), dtype=np.float64)
    for k in range(d):
        diff = z[:, None, k] - z[None, :, k]
        out = out + diff * diff
    np.fill_diagonal(out, 0.0)
    return out


def _out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    ho = _out_size(h, kh, stride, pad)
    wo = _out_size(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, ho, wo, c, kh, kw), dtype=np.float64)
    for ki in range(kh):
        for kj in range(kw):
            patch = xp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride]
            cols[:, :, :, :, ki, kj] = patch.transpose(0, 2, 3, 1)
    return cols.reshape(n * ho * wo, c * kh * kw)


def col2im(cols, n, c, h, w, kh, kw, stride, pad):
    ho = _out_size(h, kh, stride, pad)
    wo = _out_size(w, kw, stride, pad)
    blocks = cols.reshape(n, ho, wo, c, kh, kw)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    for ki in range(kh):
        for kj in range(kw):
            out[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += (
                blocks[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
            )
    return np.ascontiguousarray(out[:, :, pad:pad + h, pad:pad + w])
