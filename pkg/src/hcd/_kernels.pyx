# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: pairwise squared distances and im2col/col2im.

Loop order mirrors :mod:`hcd._kernels_py` so both backends produce
bit-identical results.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def pairwise_sqdist(const double[:, ::1] z):
    cdef Py_ssize_t n = z.shape[0], d = z.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double acc, diff
    out_arr = np.zeros((n, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for i in range(n):
        for j in range(i + 1, n):
            acc = 0.0
            for k in range(d):
                diff = z[i, k] - z[j, k]
                acc = acc + diff * diff
            out[i, j] = acc
            out[j, i] = acc
    return out_arr


def im2col(const double[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - kw) // stride + 1
    cdef Py_ssize_t b, ch, ki, kj, oi, oj, ii, jj, row, col
    cols_arr = np.zeros((n * ho * wo, c * kh * kw), dtype=np.float64)
    cdef double[:, ::1] cols = cols_arr
    for b in range(n):
        for oi in range(ho):
            for oj in range(wo):
                row = (b * ho + oi) * wo + oj
                for ch in range(c):
                    for ki in range(kh):
                        ii = oi * stride + ki - pad
                        if ii < 0 or ii >= h:
                            continue
                        for kj in range(kw):
                            jj = oj * stride + kj - pad
                            if jj < 0 or jj >= w:
                                continue
                            col = (ch * kh + ki) * kw + kj
                            cols[row, col] = x[b, ch, ii, jj]
    return cols_arr


def col2im(const double[:, ::1] cols, int n, int c, int h, int w,
           int kh, int kw, int stride, int pad):
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - kw) // stride + 1
    cdef Py_ssize_t b, ch, ki, kj, oi, oj, ii, jj, row, col
    out_arr = np.zeros((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    # kernel offsets outermost: same accumulation order as the numpy path
    for ki in range(kh):
        for kj in range(kw):
            for b in range(n):
                for ch in range(c):
                    col = (ch * kh + ki) * kw + kj
                    for oi in range(ho):
                        ii = oi * stride + ki - pad
                        if ii < 0 or ii >= h:
                            continue
                        for oj in range(wo):
                            jj = oj * stride + kj - pad
                            if jj < 0 or jj >= w:
                                continue
                            row = (b * ho + oi) * wo + oj
                            out[b, ch, ii, jj] += cols[row, col]
    return out_arr
