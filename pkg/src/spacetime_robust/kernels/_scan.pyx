# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled companion-form scan kernels.

Array layout matches :mod:`spacetime_robust.kernels.fallback` exactly; the two
modules are interchangeable.
"""
import numpy as np


def scan_states(const double[:, ::1] a, const double[:, :, ::1] u, x0=None):
    cdef Py_ssize_t B = u.shape[0], L = u.shape[1], D = u.shape[2]
    cdef Py_ssize_t n = a.shape[1]
    cdef Py_ssize_t b, t, d, i
    cdef double acc
    if a.shape[0] != D:
        raise ValueError("channel mismatch between coefficients and inputs")
    out = np.zeros((B, L + 1, D, n))
    cdef double[:, :, :, ::1] x = out
    cdef const double[:, :, ::1] x0v
    if x0 is not None:
        x0v = np.ascontiguousarray(x0, dtype=np.float64)
        for b in range(B):
            for d in range(D):
                for i in range(n):
                    x[b, 0, d, i] = x0v[b, d, i]
    with nogil:
        for b in range(B):
            for t in range(L):
                for d in range(D):
                    acc = u[b, t, d]
                    for i in range(n):
                        acc = acc + a[d, i] * x[b, t, d, i]
                    for i in range(n - 1):
                        x[b, t + 1, d, i] = x[b, t, d, i + 1]
                    x[b, t + 1, d, n - 1] = acc
    return out


def scan_states_backward(const double[:, ::1] a, const double[:, :, :, ::1] X,
                         const double[:, :, :, ::1] gX):
    cdef Py_ssize_t B = X.shape[0], T = X.shape[1], D = X.shape[2], n = X.shape[3]
    cdef Py_ssize_t L = T - 1
    cdef Py_ssize_t b, t, d, i
    cdef double top
    g_a_arr = np.zeros((D, n))
    g_u_arr = np.zeros((B, L, D))
    g_x0_arr = np.zeros((B, D, n))
    lam_arr = np.zeros(n)
    prev_arr = np.zeros(n)
    cdef double[:, ::1] g_a = g_a_arr
    cdef double[:, :, ::1] g_u = g_u_arr
    cdef double[:, :, ::1] g_x0 = g_x0_arr
    cdef double[::1] lam = lam_arr
    cdef double[::1] prev = prev_arr
    with nogil:
        for b in range(B):
            for d in range(D):
                for i in range(n):
                    lam[i] = gX[b, L, d, i]
                for t in range(L, 0, -1):
                    top = lam[n - 1]
                    g_u[b, t - 1, d] = top
                    for i in range(n):
                        g_a[d, i] += top * X[b, t - 1, d, i]
                    prev[0] = gX[b, t - 1, d, 0] + a[d, 0] * top
                    for i in range(1, n):
                        prev[i] = gX[b, t - 1, d, i] + lam[i - 1] + a[d, i] * top
                    for i in range(n):
                        lam[i] = prev[i]
                for i in range(n):
                    g_x0[b, d, i] = lam[i]
    return g_a_arr, g_u_arr, g_x0_arr
