# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: patch extraction for convolutions and windowed KDE.

Every function here has a numpy twin in ``_kernels_py`` with the same
signature and the same results (up to summation order).
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, sqrt, M_PI

cnp.import_array()


def im2col(const double[:, :, :, ::1] xp, int kh, int kw, int stride):
    """Patches of a padded batch ``[B, C, Hp, Wp]`` as ``[B, Ho, Wo, C*kh*kw]``."""
    cdef Py_ssize_t B = xp.shape[0], C = xp.shape[1]
    cdef Py_ssize_t Hp = xp.shape[2], Wp = xp.shape[3]
    cdef Py_ssize_t Ho = (Hp - kh) // stride + 1
    cdef Py_ssize_t Wo = (Wp - kw) // stride + 1
    out_arr = np.empty((B, Ho, Wo, C * kh * kw), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, c, i, j, p, q, col
    with nogil:
        for b in range(B):
            for i in range(Ho):
                for j in range(Wo):
                    col = 0
                    for c in range(C):
                        for p in range(kh):
                            for q in range(kw):
                                out[b, i, j, col] = xp[b, c, i * stride + p, j * stride + q]
                                col += 1
    return out_arr


def col2im(const double[:, :, :, ::1] cols, int C, int Hp, int Wp,
           int kh, int kw, int stride):
    """Adjoint of :func:`im2col`: scatter-add patches into ``[B, C, Hp, Wp]``."""
    cdef Py_ssize_t B = cols.shape[0], Ho = cols.shape[1], Wo = cols.shape[2]
    out_arr = np.zeros((B, C, Hp, Wp), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, c, i, j, p, q, col
    with nogil:
        for b in range(B):
            for i in range(Ho):
                for j in range(Wo):
                    col = 0
                    for c in range(C):
                        for p in range(kh):
                            for q in range(kw):
                                out[b, c, i * stride + p, j * stride + q] += cols[b, i, j, col]
                                col += 1
    return out_arr


def kde_log_density_sorted(const double[::1] xs, double h, double cutoff):
    """Gaussian KDE log-density at each point of the sorted sample ``xs``.

    Kernel contributions beyond ``cutoff * h`` are dropped; the sample is its
    own evaluation set (self term included).
    """
    cdef Py_ssize_t n = xs.shape[0]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double reach = cutoff * h
    cdef double inv_h = 1.0 / h
    cdef double norm = 1.0 / (n * h * sqrt(2.0 * M_PI))
    cdef Py_ssize_t i, j, lo = 0, hi = 0
    cdef double acc, d
    with nogil:
        for i in range(n):
            while xs[i] - xs[lo] > reach:
                lo += 1
            if hi < i:
                hi = i
            while hi + 1 < n and xs[hi + 1] - xs[i] <= reach:
                hi += 1
            acc = 0.0
            for j in range(lo, hi + 1):
                d = (xs[i] - xs[j]) * inv_h
                acc += exp(-0.5 * d * d)
            out[i] = log(acc * norm)
    return out_arr


def kde_log_density_binned(const double[::1] xs, double h, double cutoff, double lo, double step, int n_grid):
    """Binned approximation of :func:`kde_log_density_sorted`.

    Points are linearly binned onto ``n_grid`` nodes starting at ``lo`` with
    spacing ``step``; the grid is convolved with the truncated Gaussian and
    read back by linear interpolation.
    """
    cdef Py_ssize_t n = xs.shape[0]
    cdef Py_ssize_t G = n_grid
    counts_arr = np.zeros(G, dtype=np.float64)
    dens_arr = np.zeros(G, dtype=np.float64)
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] counts = counts_arr
    cdef double[::1] dens = dens_arr
    cdef double[::1] out = out_arr
    cdef Py_ssize_t L = <Py_ssize_t>(cutoff * h / step) + 1
    weights_arr = np.empty(2 * L + 1, dtype=np.float64)
    cdef double[::1] weights = weights_arr
    cdef double norm = 1.0 / (n * h * sqrt(2.0 * M_PI))
    cdef Py_ssize_t i, g, m, g0
    cdef double pos, frac, d
    with nogil:
        for m in range(-L, L + 1):
            d = m * step / h
            weights[m + L] = exp(-0.5 * d * d)
        for i in range(n):
            pos = (xs[i] - lo) / step
            g0 = <Py_ssize_t>pos
            if g0 >= G - 1:
                g0 = G - 2
            frac = pos - g0
            counts[g0] += 1.0 - frac
            counts[g0 + 1] += frac
        for g in range(G):
            if counts[g] == 0.0:
                continue
            for m in range(-L, L + 1):
                if 0 <= g + m < G:
                    dens[g + m] += counts[g] * weights[m + L]
        for i in range(n):
            pos = (xs[i] - lo) / step
            g0 = <Py_ssize_t>pos
            if g0 >= G - 1:
                g0 = G - 2
            frac = pos - g0
            out[i] = log(((1.0 - frac) * dens[g0] + frac * dens[g0 + 1]) * norm)
    return out_arr
