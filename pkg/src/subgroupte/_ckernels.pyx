# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled clustering kernels. Same contracts as ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, fabs

cnp.import_array()


def kde_adjust(const double[::1] mu, const double[::1] te, double h):
    cdef Py_ssize_t n = te.shape[0], k = mu.shape[0], i, j
    cdef double m, d, e, emax, wsum, dsum
    out = np.empty(k, dtype=np.float64)
    cdef double[::1] o = out
    for j in range(k):
        m = mu[j]
        emax = -1e308
        for i in range(n):
            d = (te[i] - m) / h
            e = -0.5 * d * d
            if e > emax:
                emax = e
        wsum = 0.0
        dsum = 0.0
        for i in range(n):
            d = te[i] - m
            e = exp(-0.5 * (d / h) * (d / h) - emax)
            wsum += e
            dsum += e * d
        o[j] = m + dsum / wsum
    return out


def hard_assign(const double[::1] mu, const double[::1] te):
    cdef Py_ssize_t n = te.shape[0], k = mu.shape[0], i, j, best
    cdef double bd, d
    out = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] o = out
    for i in range(n):
        best = 0
        bd = fabs(te[i] - mu[0])
        for j in range(1, k):
            d = fabs(te[i] - mu[j])
            if d < bd:
                bd = d
                best = j
        o[i] = best
    return out


def update_centroids(const double[::1] mu_star, const cnp.int64_t[::1] labels,
                     const double[::1] te):
    cdef Py_ssize_t n = te.shape[0], k = mu_star.shape[0], i, j
    sums = np.zeros(k, dtype=np.float64)
    counts = np.zeros(k, dtype=np.int64)
    cdef double[::1] s = sums
    cdef cnp.int64_t[::1] c = counts
    for i in range(n):
        s[labels[i]] += te[i]
        c[labels[i]] += 1
    out = np.empty(k, dtype=np.float64)
    cdef double[::1] o = out
    for j in range(k):
        o[j] = s[j] / c[j] if c[j] > 0 else mu_star[j]
    return out


def soft_probabilities(const double[::1] mu, const double[::1] te):
    cdef Py_ssize_t n = te.shape[0], k = mu.shape[0], i, j
    cdef double dmin, d, tot
    out = np.empty((n, k), dtype=np.float64)
    cdef double[:, ::1] o = out
    for i in range(n):
        dmin = fabs(te[i] - mu[0])
        for j in range(1, k):
            d = fabs(te[i] - mu[j])
            if d < dmin:
                dmin = d
        tot = 0.0
        for j in range(k):
            o[i, j] = exp(-(fabs(te[i] - mu[j]) - dmin))
            tot += o[i, j]
        for j in range(k):
            o[i, j] /= tot
    return out
