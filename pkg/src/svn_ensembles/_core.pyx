# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels; same contracts as ``_pure``."""

import numpy as np
from libc.math cimport exp


def kernel_state(const double[:, ::1] phi, const double[:, ::1] mphi, double scale):
    cdef Py_ssize_t n = phi.shape[0], d = phi.shape[1], i, j, t
    values_arr = np.ones((n, n))
    grads_arr = np.zeros((n, n, d))
    cdef double[:, ::1] values = values_arr
    cdef double[:, :, ::1] grads = grads_arr
    cdef double sq, kv, c
    with nogil:
        for i in range(n):
            for j in range(i + 1, n):
                sq = 0.0
                for t in range(d):
                    sq += (phi[i, t] - phi[j, t]) * (mphi[i, t] - mphi[j, t])
                if sq < 0.0:
                    sq = 0.0
                kv = exp(-scale * sq)
                values[i, j] = kv
                values[j, i] = kv
                c = -2.0 * scale * kv
                for t in range(d):
                    grads[i, j, t] = c * (mphi[i, t] - mphi[j, t])
                    grads[j, i, t] = -grads[i, j, t]
    return values_arr, grads_arr


def svgd_direction(const double[:, ::1] kvals, const double[:, :, ::1] kgrads,
                   const double[:, ::1] grads):
    cdef Py_ssize_t n = kvals.shape[0], d = grads.shape[1], i, j, t
    out_arr = np.zeros((n, d))
    cdef double[:, ::1] out = out_arr
    cdef double inv_n = 1.0 / n, kv
    with nogil:
        for i in range(n):
            for j in range(n):
                kv = kvals[j, i]
                for t in range(d):
                    out[i, t] += kv * grads[j, t] + kgrads[j, i, t]
            for t in range(d):
                out[i, t] *= inv_n
    return out_arr


cdef void _repulsion(const double[:, :, ::1] kgrads, const double[:, ::1] alpha,
                     double[:, ::1] out, double[:, ::1] dots) noexcept nogil:
    # out[m] += (1/N) sum_p sum_n kgrads[p, n] * <kgrads[p, m], alpha[n]>
    cdef Py_ssize_t n = kgrads.shape[0], d = kgrads.shape[2], p, m, q, t
    cdef double inv_n = 1.0 / n, s
    for p in range(n):
        for m in range(n):
            for q in range(n):
                s = 0.0
                for t in range(d):
                    s += kgrads[p, m, t] * alpha[q, t]
                dots[m, q] = s
        for m in range(n):
            for q in range(n):
                s = dots[m, q] * inv_n
                if s != 0.0:
                    for t in range(d):
                        out[m, t] += s * kgrads[p, q, t]


def repulsion_matvec(const double[:, :, ::1] kgrads, const double[:, ::1] alpha):
    cdef Py_ssize_t n = kgrads.shape[0], d = kgrads.shape[2]
    out_arr = np.zeros((n, d))
    cdef double[:, ::1] out = out_arr
    cdef double[:, ::1] dots = np.empty((n, n))
    with nogil:
        _repulsion(kgrads, alpha, out, dots)
    return out_arr


cdef void _mix(const double[:, ::1] kvals, const double[:, ::1] alpha,
               double[:, ::1] u) noexcept nogil:
    # u[p] = sum_q k[p, q] alpha[q]
    cdef Py_ssize_t n = kvals.shape[0], d = alpha.shape[1], p, q, t
    cdef double kv
    for p in range(n):
        for t in range(d):
            u[p, t] = 0.0
        for q in range(n):
            kv = kvals[p, q]
            for t in range(d):
                u[p, t] += kv * alpha[q, t]


cdef void _unmix(const double[:, ::1] kvals, const double[:, ::1] w,
                 double[:, ::1] out) noexcept nogil:
    # out[m] += (1/N) sum_p k[p, m] w[p]
    cdef Py_ssize_t n = kvals.shape[0], d = w.shape[1], p, m, t
    cdef double kv, inv_n = 1.0 / n
    for m in range(n):
        for p in range(n):
            kv = kvals[p, m] * inv_n
            for t in range(d):
                out[m, t] += kv * w[p, t]


def svn_matvec_dense(const double[:, ::1] kvals, const double[:, :, ::1] kgrads,
                     const double[:, :, ::1] hess, const double[:, ::1] alpha):
    cdef Py_ssize_t n = kvals.shape[0], d = alpha.shape[1], p, r, c
    out_arr = np.zeros((n, d))
    cdef double[:, ::1] out = out_arr
    cdef double[:, ::1] u = np.empty((n, d))
    cdef double[:, ::1] w = np.empty((n, d))
    cdef double[:, ::1] dots = np.empty((n, n))
    cdef double s
    with nogil:
        _mix(kvals, alpha, u)
        for p in range(n):
            for r in range(d):
                s = 0.0
                for c in range(d):
                    s += hess[p, r, c] * u[p, c]
                w[p, r] = s
        _unmix(kvals, w, out)
        _repulsion(kgrads, alpha, out, dots)
    return out_arr


def svn_matvec_diag(const double[:, ::1] kvals, const double[:, :, ::1] kgrads,
                    const double[:, ::1] diag, const double[:, ::1] alpha):
    cdef Py_ssize_t n = kvals.shape[0], d = alpha.shape[1], p, r
    out_arr = np.zeros((n, d))
    cdef double[:, ::1] out = out_arr
    cdef double[:, ::1] u = np.empty((n, d))
    cdef double[:, ::1] dots = np.empty((n, n))
    with nogil:
        _mix(kvals, alpha, u)
        for p in range(n):
            for r in range(d):
                u[p, r] *= diag[p, r]
        _unmix(kvals, u, out)
        _repulsion(kgrads, alpha, out, dots)
    return out_arr
