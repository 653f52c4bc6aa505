# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row-wise kernels for the autograd engine.

Each function fuses the several numpy passes of its counterpart in
``_kernels_py`` into one or two loops per row.  Inputs must be C-contiguous
and share a floating dtype (float32 or float64).

GELU is not compiled: numpy's vectorized tanh beats a scalar libm loop, so
the module re-exports the numpy versions.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, exp, expf, INFINITY

cnp.import_array()

ctypedef fused real:
    float
    double


def layer_norm_fwd(real[:, ::1] x, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    dtype = np.float32 if real is float else np.float64
    y_arr = np.empty((n, d), dtype=dtype)
    r_arr = np.empty(n, dtype=dtype)
    cdef real[:, ::1] y = y_arr
    cdef real[::1] rstd = r_arr
    cdef double shift, mean, var, diff, r
    with nogil:
        for i in range(n):
            shift = x[i, 0]
            mean = 0.0
            for j in range(d):
                mean += x[i, j] - shift
            mean /= d
            var = 0.0
            for j in range(d):
                diff = (x[i, j] - shift) - mean
                var += diff * diff
            var /= d
            r = 1.0 / sqrt(var + eps)
            rstd[i] = <real>r
            for j in range(d):
                y[i, j] = <real>(((x[i, j] - shift) - mean) * r)
    return y_arr, r_arr


def layer_norm_bwd(real[:, ::1] dy, real[:, ::1] y, real[::1] rstd):
    cdef Py_ssize_t n = dy.shape[0], d = dy.shape[1], i, j
    dtype = np.float32 if real is float else np.float64
    dx_arr = np.empty((n, d), dtype=dtype)
    cdef real[:, ::1] dx = dx_arr
    cdef double m1, m2
    with nogil:
        for i in range(n):
            m1 = 0.0
            m2 = 0.0
            for j in range(d):
                m1 += dy[i, j]
                m2 += dy[i, j] * y[i, j]
            m1 /= d
            m2 /= d
            for j in range(d):
                dx[i, j] = <real>((dy[i, j] - m1 - y[i, j] * m2) * rstd[i])
    return dx_arr


def masked_softmax_fwd(real[:, ::1] x, const unsigned char[:, ::1] keep):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    dtype = np.float32 if real is float else np.float64
    p_arr = np.zeros((n, d), dtype=dtype)
    cdef real[:, ::1] p = p_arr
    cdef double zmax, s, e
    with nogil:
        for i in range(n):
            zmax = -INFINITY
            for j in range(d):
                if keep[i, j] and x[i, j] > zmax:
                    zmax = x[i, j]
            if zmax == -INFINITY:
                continue
            s = 0.0
            for j in range(d):
                if keep[i, j]:
                    if real is float:
                        e = expf(<float>(x[i, j] - zmax))
                    else:
                        e = exp(x[i, j] - zmax)
                    p[i, j] = <real>e
                    s += e
            for j in range(d):
                if keep[i, j]:
                    p[i, j] = <real>(p[i, j] / s)
    return p_arr


def masked_softmax_bwd(real[:, ::1] dp, real[:, ::1] p):
    cdef Py_ssize_t n = dp.shape[0], d = dp.shape[1], i, j
    dtype = np.float32 if real is float else np.float64
    dx_arr = np.empty((n, d), dtype=dtype)
    cdef real[:, ::1] dx = dx_arr
    cdef double dot
    with nogil:
        for i in range(n):
            dot = 0.0
            for j in range(d):
                dot += dp[i, j] * p[i, j]
            for j in range(d):
                dx[i, j] = <real>(p[i, j] * (dp[i, j] - dot))
    return dx_arr


from ._kernels_py import gelu_bwd, gelu_fwd  # noqa: E402
