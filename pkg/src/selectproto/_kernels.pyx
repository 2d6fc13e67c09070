# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled episode-head kernels. Same signatures as ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log

cnp.import_array()


def pairwise_sqdist(const double[:, ::1] a, const double[:, ::1] b):
    cdef Py_ssize_t m = a.shape[0], n = b.shape[0], e = a.shape[1]
    cdef Py_ssize_t i, j, t
    cdef double acc, diff
    out = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] o = out
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(e):
                diff = a[i, t] - b[j, t]
                acc += diff * diff
            o[i, j] = acc
    return out


def pairwise_sqdist_backward(const double[:, ::1] a, const double[:, ::1] b,
                             const double[:, ::1] g):
    cdef Py_ssize_t m = a.shape[0], n = b.shape[0], e = a.shape[1]
    cdef Py_ssize_t i, j, t
    cdef double gij, diff
    ga_arr = np.zeros((m, e), dtype=np.float64)
    gb_arr = np.zeros((n, e), dtype=np.float64)
    cdef double[:, ::1] ga = ga_arr
    cdef double[:, ::1] gb = gb_arr
    for i in range(m):
        for j in range(n):
            gij = 2.0 * g[i, j]
            if gij == 0.0:
                continue
            for t in range(e):
                diff = gij * (a[i, t] - b[j, t])
                ga[i, t] += diff
                gb[j, t] -= diff
    return ga_arr, gb_arr


def proto_xent(const double[:, ::1] d, const cnp.int64_t[::1] y):
    cdef Py_ssize_t m = d.shape[0], n = d.shape[1]
    cdef Py_ssize_t i, j
    cdef double top, s, lse, total = 0.0, inv_m = 1.0 / m
    grad_arr = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] grad = grad_arr
    for i in range(m):
        top = -d[i, 0]
        for j in range(1, n):
            if -d[i, j] > top:
                top = -d[i, j]
        s = 0.0
        for j in range(n):
            grad[i, j] = exp(-d[i, j] - top)
            s += grad[i, j]
        lse = top + log(s)
        total += d[i, y[i]] + lse
        for j in range(n):
            grad[i, j] = -grad[i, j] / s * inv_m
        grad[i, y[i]] += inv_m
    return total * inv_m, grad_arr


def segment_weighted_mean(const double[:, ::1] z, const double[::1] w,
                          const cnp.int64_t[::1] labels, Py_ssize_t n, bint normalize):
    cdef Py_ssize_t s = z.shape[0], e = z.shape[1]
    cdef Py_ssize_t i, t, c
    out_arr = np.zeros((n, e), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[::1] denom = np.zeros(n, dtype=np.float64)
    for i in range(s):
        c = labels[i]
        denom[c] += w[i] if normalize else 1.0
        for t in range(e):
            out[c, t] += w[i] * z[i, t]
    for c in range(n):
        for t in range(e):
            out[c, t] /= denom[c]
    return out_arr


def segment_weighted_mean_backward(const double[:, ::1] z, const double[::1] w,
                                   const cnp.int64_t[::1] labels, Py_ssize_t n,
                                   const double[:, ::1] g, bint normalize):
    cdef Py_ssize_t s = z.shape[0], e = z.shape[1]
    cdef Py_ssize_t i, t, c
    cdef double acc, gl
    gz_arr = np.empty((s, e), dtype=np.float64)
    gw_arr = np.empty(s, dtype=np.float64)
    cdef double[:, ::1] gz = gz_arr
    cdef double[::1] gw = gw_arr
    cdef double[::1] denom = np.zeros(n, dtype=np.float64)
    cdef double[:, ::1] cent
    for i in range(s):
        denom[labels[i]] += w[i] if normalize else 1.0
    if normalize:
        cent = segment_weighted_mean(z, w, labels, n, True)
    for i in range(s):
        c = labels[i]
        acc = 0.0
        for t in range(e):
            gl = g[c, t] / denom[c]
            gz[i, t] = gl * w[i]
            if normalize:
                acc += (z[i, t] - cent[c, t]) * gl
            else:
                acc += z[i, t] * gl
        gw[i] = acc
    return gz_arr, gw_arr
