# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops. Signatures mirror :mod:`prefact._kernels_py` exactly."""

import numpy as np

from libc.math cimport fabs, sqrt

BACKEND = "cython"


def jacobi_sweeps(double[:, ::1] at, double[:, ::1] vt, int[:, :, ::1] schedule,
                  double tol, int max_sweeps):
    """One-sided Jacobi on the rows of ``at`` (the columns of the tall matrix).

    Rotations are mirrored on the rows of ``vt``. ``schedule`` holds the
    round-robin pairings (rounds, pairs, 2); -1 marks the bye slot.
    Returns ``(sweeps, off)`` where ``off`` is the largest normalised inner
    product seen in the last sweep.
    """
    cdef Py_ssize_t m = at.shape[1]
    cdef Py_ssize_t nv = vt.shape[1]
    cdef Py_ssize_t n_rounds = schedule.shape[0]
    cdef Py_ssize_t n_pairs = schedule.shape[1]
    cdef Py_ssize_t rnd, q, t
    cdef int i, j, sweep = 0
    cdef double alpha, beta, gamma, ratio, zeta, tan_, c, s, ai, aj, off = 0.0

    with nogil:
        while sweep < max_sweeps:
            sweep += 1
            off = 0.0
            for rnd in range(n_rounds):
                for q in range(n_pairs):
                    i = schedule[rnd, q, 0]
                    j = schedule[rnd, q, 1]
                    if i < 0 or j < 0:
                        continue
                    alpha = 0.0
                    beta = 0.0
                    gamma = 0.0
                    for t in range(m):
                        ai = at[i, t]
                        aj = at[j, t]
                        alpha = alpha + ai * ai
                        beta = beta + aj * aj
                        gamma = gamma + ai * aj
                    if alpha == 0.0 or beta == 0.0:
                        continue
                    ratio = fabs(gamma) / (sqrt(alpha) * sqrt(beta))
                    if ratio > off:
                        off = ratio
                    if ratio <= tol:
                        continue
                    zeta = (beta - alpha) / (2.0 * gamma)
                    if fabs(zeta) > 1e150:
                        tan_ = 0.5 / zeta
                    elif zeta >= 0.0:
                        tan_ = 1.0 / (zeta + sqrt(1.0 + zeta * zeta))
                    else:
                        tan_ = -1.0 / (-zeta + sqrt(1.0 + zeta * zeta))
                    c = 1.0 / sqrt(1.0 + tan_ * tan_)
                    s = c * tan_
                    for t in range(m):
                        ai = at[i, t]
                        aj = at[j, t]
                        at[i, t] = c * ai - s * aj
                        at[j, t] = s * ai + c * aj
                    for t in range(nv):
                        ai = vt[i, t]
                        aj = vt[j, t]
                        vt[i, t] = c * ai - s * aj
                        vt[j, t] = s * ai + c * aj
            if off <= tol:
                break
    return sweep, off


def im2col(double[:, :, :, ::1] x, int k, int stride, int pad):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = (H + 2 * pad - k) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - k) // stride + 1
    out = np.zeros((C * k * k, B * Ho * Wo), dtype=np.float64)
    cdef double[:, ::1] cols = out
    cdef Py_ssize_t b, c, ky, kx, oy, ox, iy, ix, row, col
    with nogil:
        for c in range(C):
            for ky in range(k):
                for kx in range(k):
                    row = (c * k + ky) * k + kx
                    for b in range(B):
                        for oy in range(Ho):
                            iy = oy * stride + ky - pad
                            if iy < 0 or iy >= H:
                                continue
                            col = (b * Ho + oy) * Wo
                            for ox in range(Wo):
                                ix = ox * stride + kx - pad
                                if ix >= 0 and ix < W:
                                    cols[row, col + ox] = x[b, c, iy, ix]
    return out


def col2im(double[:, ::1] cols, int B, int C, int H, int W, int k, int stride, int pad):
    cdef Py_ssize_t Ho = (H + 2 * pad - k) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - k) // stride + 1
    out = np.zeros((B, C, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] x = out
    cdef Py_ssize_t b, c, ky, kx, oy, ox, iy, ix, row, col
    with nogil:
        for c in range(C):
            for ky in range(k):
                for kx in range(k):
                    row = (c * k + ky) * k + kx
                    for b in range(B):
                        for oy in range(Ho):
                            iy = oy * stride + ky - pad
                            if iy < 0 or iy >= H:
                                continue
                            col = (b * Ho + oy) * Wo
                            for ox in range(Wo):
                                ix = ox * stride + kx - pad
                                if ix >= 0 and ix < W:
                                    x[b, c, iy, ix] += cols[row, col + ox]
    return out
