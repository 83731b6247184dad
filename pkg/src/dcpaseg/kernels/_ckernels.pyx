# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled layer kernels (register-blocked C loops, fixed summation order).

Same call signatures and results as ``_npkernels``; results agree with it up
to floating-point summation order.
"""

import numpy as np
cimport numpy as cnp

from . import _npkernels
from cython cimport floating

cnp.import_array()

NAME = "cython"

cdef extern from "conv_kernels.h" nogil:
    unsigned int ftz_begin()
    void ftz_end(unsigned int old)
    void conv_fwd_f32(const float* x, const float* w, const float* b, float* y,
                      long N, long C, long H, long W, long Co, long k)
    void conv_fwd_f64(const double* x, const double* w, const double* b, double* y,
                      long N, long C, long H, long W, long Co, long k)
    void conv_dw_f32(const float* x, const float* dy, float* dw,
                     long N, long C, long H, long W, long Co, long k)
    void conv_dw_f64(const double* x, const double* dy, double* dw,
                     long N, long C, long H, long W, long Co, long k)


def conv2d_forward(floating[:, :, :, ::1] x, floating[:, :, :, ::1] w, floating[::1] b):
    cdef long N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef long Co = w.shape[0], k = w.shape[2]
    if k * k > 9:
        raise ValueError("compiled kernels support kernel sizes up to 3")
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((N, Co, H - k + 1, W - k + 1), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef unsigned int csr
    with nogil:
        csr = ftz_begin()
        if floating is float:
            conv_fwd_f32(&x[0, 0, 0, 0], &w[0, 0, 0, 0], &b[0], &out[0, 0, 0, 0], N, C, H, W, Co, k)
        else:
            conv_fwd_f64(&x[0, 0, 0, 0], &w[0, 0, 0, 0], &b[0], &out[0, 0, 0, 0], N, C, H, W, Co, k)
        ftz_end(csr)
    return out_arr


def conv2d_backward(floating[:, :, :, ::1] x, floating[:, :, :, ::1] w, floating[:, :, :, ::1] dy,
                    bint need_dx=True):
    cdef long N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef long Co = w.shape[0], k = w.shape[2]
    dtype = np.float32 if floating is float else np.float64
    # input gradient = valid correlation of the zero-padded output gradient
    # with the spatially flipped, in/out-swapped kernels
    dx_arr = None
    if need_dx:
        pad = k - 1
        dyp = np.zeros((N, Co, dy.shape[2] + 2 * pad, dy.shape[3] + 2 * pad), dtype=dtype)
        dyp[:, :, pad:pad + dy.shape[2], pad:pad + dy.shape[3]] = dy
        wt = np.ascontiguousarray(np.asarray(w)[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        dx_arr = conv2d_forward(dyp, wt, np.zeros(C, dtype=dtype))
    dw_arr = np.zeros((Co, C, k, k), dtype=dtype)
    cdef floating[:, :, :, ::1] dw = dw_arr
    cdef unsigned int csr
    with nogil:
        csr = ftz_begin()
        if floating is float:
            conv_dw_f32(&x[0, 0, 0, 0], &dy[0, 0, 0, 0], &dw[0, 0, 0, 0], N, C, H, W, Co, k)
        else:
            conv_dw_f64(&x[0, 0, 0, 0], &dy[0, 0, 0, 0], &dw[0, 0, 0, 0], N, C, H, W, Co, k)
        ftz_end(csr)
    db_arr = np.asarray(dy).sum(axis=(0, 2, 3))
    return dx_arr, dw_arr, db_arr


def maxpool2_forward(floating[:, :, :, ::1] x):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = H // 2, Wo = W // 2
    dtype = np.float32 if floating is float else np.float64
    y_arr = np.empty((N, C, Ho, Wo), dtype=dtype)
    idx_arr = np.empty((N, C, Ho, Wo), dtype=np.int8)
    cdef floating[:, :, :, ::1] y = y_arr
    cdef signed char[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t n, c, i, j
    cdef floating best, v
    cdef signed char arg
    with nogil:
        for n in range(N):
            for c in range(C):
                for i in range(Ho):
                    for j in range(Wo):
                        # row-major scan, strict '>' keeps the first maximum
                        best = x[n, c, 2 * i, 2 * j]
                        arg = 0
                        v = x[n, c, 2 * i, 2 * j + 1]
                        if v > best:
                            best = v
                            arg = 1
                        v = x[n, c, 2 * i + 1, 2 * j]
                        if v > best:
                            best = v
                            arg = 2
                        v = x[n, c, 2 * i + 1, 2 * j + 1]
                        if v > best:
                            best = v
                            arg = 3
                        y[n, c, i, j] = best
                        idx[n, c, i, j] = arg
    return y_arr, idx_arr


def maxpool2_backward(floating[:, :, :, ::1] dy, signed char[:, :, :, ::1] idx):
    cdef Py_ssize_t N = dy.shape[0], C = dy.shape[1], Ho = dy.shape[2], Wo = dy.shape[3]
    dtype = np.float32 if floating is float else np.float64
    dx_arr = np.zeros((N, C, 2 * Ho, 2 * Wo), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t n, c, i, j
    cdef signed char a
    with nogil:
        for n in range(N):
            for c in range(C):
                for i in range(Ho):
                    for j in range(Wo):
                        a = idx[n, c, i, j]
                        dx[n, c, 2 * i + (a >> 1), 2 * j + (a & 1)] = dy[n, c, i, j]
    return dx_arr


def upconv2_forward(floating[:, :, :, ::1] x, floating[:, :, :, ::1] w, floating[::1] b):
    cdef Py_ssize_t N = x.shape[0], Ci = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Co = w.shape[1]
    dtype = np.float32 if floating is float else np.float64
    y_arr = np.empty((N, Co, 2 * H, 2 * W), dtype=dtype)
    cdef floating[:, :, :, ::1] y = y_arr
    cdef Py_ssize_t n, co, ci, i, j, a
    cdef floating w0, w1
    cdef floating* yr
    cdef const floating* xr
    cdef unsigned int csr
    with nogil:
        csr = ftz_begin()
        for n in range(N):
            for co in range(Co):
                for i in range(2 * H):
                    yr = &y[n, co, i, 0]
                    for j in range(2 * W):
                        yr[j] = b[co]
                for ci in range(Ci):
                    for i in range(H):
                        xr = &x[n, ci, i, 0]
                        for a in range(2):
                            w0 = w[ci, co, a, 0]
                            w1 = w[ci, co, a, 1]
                            yr = &y[n, co, 2 * i + a, 0]
                            for j in range(W):
                                yr[2 * j] += xr[j] * w0
                                yr[2 * j + 1] += xr[j] * w1
        ftz_end(csr)
    return y_arr


def upconv2_backward(x, w, dy):
    # the GEMM formulation through BLAS beats strided scalar loops here
    return _npkernels.upconv2_backward(np.asarray(x), np.asarray(w), np.asarray(dy))


def relu_forward(floating[::1] x):
    """Flat ``max(x, 0)``."""
    cdef Py_ssize_t i, n = x.shape[0]
    dtype = np.float32 if floating is float else np.float64
    y_arr = np.empty(n, dtype=dtype)
    cdef floating[::1] y = y_arr
    with nogil:
        for i in range(n):
            y[i] = x[i] if x[i] > 0 else 0
    return y_arr


def relu_backward(floating[::1] y, floating[::1] g):
    """Flat gradient of relu given its output ``y``."""
    cdef Py_ssize_t i, n = y.shape[0]
    dtype = np.float32 if floating is float else np.float64
    dx_arr = np.empty(n, dtype=dtype)
    cdef floating[::1] dx = dx_arr
    with nogil:
        for i in range(n):
            dx[i] = g[i] if y[i] > 0 else 0
    return dx_arr
