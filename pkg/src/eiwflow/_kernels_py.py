"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``."""
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_KDE_BLOCK = 256


def im2col(xp, kh, kw, stride):
    B, C, Hp, Wp = xp.shape
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: [B, C, Ho, Wo, kh, kw] -> [B, Ho, Wo, C*kh*kw]
    Ho, Wo = win.shape[2], win.shape[3]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B, Ho, Wo, C * kh * kw)


def col2im(cols, C, Hp, Wp, kh, kw, stride):
    B, Ho, Wo, _ = cols.shape
    out = np.zeros((B, C, Hp, Wp))
    g = cols.reshape(B, Ho, Wo, C, kh, kw)
    for p in range(kh):
        for q in range(kw):
            out[:, :, p:p + stride * Ho:stride, q:q + stride * Wo:stride] += g[:, :, :, :, p, q].transpose(0, 3, 1, 2)
    return out


def kde_log_density_sorted(xs, h, cutoff):
    n = xs.shape[0]
    reach = cutoff * h
    out = np.empty(n)
    norm = 1.0 / (n * h * math.sqrt(2.0 * math.pi))
    for start in range(0, n, _KDE_BLOCK):
        q = xs[start:start + _KDE_BLOCK]
        lo = np.searchsorted(xs, q[0] - reach, side="left")
        hi = np.searchsorted(xs, q[-1] + reach, side="right")
        d = (q[:, None] - xs[None, lo:hi]) / h
        k = np.exp(-0.5 * d * d)
        k[np.abs(q[:, None] - xs[None, lo:hi]) > reach] = 0.0
        out[start:start + _KDE_BLOCK] = np.log(k.sum(axis=1) * norm)
    return out


def kde_log_density_binned(xs, h, cutoff, lo, step, n_grid):
    n = xs.shape[0]
    L = int(cutoff * h / step) + 1
    pos = (xs - lo) / step
    g0 = np.minimum(pos.astype(np.intp), n_grid - 2)
    frac = pos - g0
    counts = np.bincount(g0, weights=1.0 - frac, minlength=n_grid)
    counts += np.bincount(g0 + 1, weights=frac, minlength=n_grid)
    m = np.arange(-L, L + 1)
    weights = np.exp(-0.5 * (m * step / h) ** 2)
    dens = np.convolve(counts, weights)[L:L + n_grid]
    norm = 1.0 / (n * h * math.sqrt(2.0 * math.pi))
    return np.log(((1.0 - frac) * dens[g0] + frac * dens[g0 + 1]) * norm)
