# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled conv lowering kernels (im2col / col2im).

Mirrors _kernels_py exactly: zero padding, float64, and the same
per-element accumulation order in col2im (ascending kernel offsets),
so results are bitwise identical between backends.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def conv_out_size(int size, int k, int stride, int pad):
    return (size + 2 * pad - k) // stride + 1


def im2col(cnp.ndarray[cnp.float64_t, ndim=4] x, int kh, int kw, int stride, int pad):
    cdef int b = x.shape[0]
    cdef int c = x.shape[1]
    cdef int h = x.shape[2]
    cdef int w = x.shape[3]
    cdef int oh = (h + 2 * pad - kh) // stride + 1
    cdef int ow = (w + 2 * pad - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ValueError(
            f"im2col: kernel {kh}x{kw} with stride {stride} pad {pad} "
            f"does not fit input {h}x{w}"
        )
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.zeros(
        (b * oh * ow, c * kh * kw), dtype=np.float64
    )
    cdef double[:, :, :, ::1] xv = np.ascontiguousarray(x)
    cdef double[:, ::1] ov = out
    cdef int bi, ci, ki, kj, oi, oj, hi, wj, row, col
    for bi in range(b):
        for oi in range(oh):
            for oj in range(ow):
                row = (bi * oh + oi) * ow + oj
                for ci in range(c):
                    for ki in range(kh):
                        hi = oi * stride - pad + ki
                        if hi < 0 or hi >= h:
                            continue
                        for kj in range(kw):
                            wj = oj * stride - pad + kj
                            if wj < 0 or wj >= w:
                                continue
                            col = (ci * kh + ki) * kw + kj
                            ov[row, col] = xv[bi, ci, hi, wj]
    return out


def col2im(cnp.ndarray[cnp.float64_t, ndim=2] cols, int b, int c, int h, int w,
           int kh, int kw, int stride, int pad):
    cdef int oh = (h + 2 * pad - kh) // stride + 1
    cdef int ow = (w + 2 * pad - kw) // stride + 1
    if cols.shape[0] != b * oh * ow or cols.shape[1] != c * kh * kw:
        raise ValueError(
            f"col2im: expected cols of shape {(b * oh * ow, c * kh * kw)}, "
            f"got {(cols.shape[0], cols.shape[1])}"
        )
    cdef cnp.ndarray[cnp.float64_t, ndim=4] out = np.zeros(
        (b, c, h, w), dtype=np.float64
    )
    cdef double[:, ::1] cv = np.ascontiguousarray(cols)
    cdef double[:, :, :, ::1] ov = out
    cdef int bi, ci, ki, kj, oi, oj, hi, wj, row, col
    # Kernel offsets are the outer loops so each target element accumulates
    # its contributions in the same order as the numpy backend.
    for ki in range(kh):
        for kj in range(kw):
            for bi in range(b):
                for ci in range(c):
                    col = (ci * kh + ki) * kw + kj
                    for oi in range(oh):
                        hi = oi * stride - pad + ki
                        if hi < 0 or hi >= h:
                            continue
                        row = (bi * oh + oi) * ow
                        for oj in range(ow):
                            wj = oj * stride - pad + kj
                            if wj < 0 or wj >= w:
                                continue
                            ov[bi, ci, hi, wj] += cv[row + oj, col]
    return out
