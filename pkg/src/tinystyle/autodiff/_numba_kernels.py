"""Numba-jitted 3x3 convolution kernels.

Both kernels take the input pre-padded by one pixel on each spatial side.
Every prange index owns a disjoint slice of the output and the inner loops
run in a fixed order, so results are bit-identical across runs and thread
counts. fastmath only reassociates the per-element accumulations, which is
deterministic for a fixed build.
"""

import numpy as np
from numba import njit, prange


@njit(parallel=True, cache=True, fastmath=True)
def conv3x3_padded(xp, k):
    """Cross-correlate padded (n,c,h+2,w+2) input with (co,c,3,3) kernels."""
    n, c, hp, wp = xp.shape
    h = hp - 2
    w = wp - 2
    co = k.shape[0]
    out = np.zeros((n, co, h, w), dtype=xp.dtype)
    for t in prange(n * co):
        ni = t // co
        o = t - ni * co
        orow = out[ni, o]
        for ci in range(c):
            k00 = k[o, ci, 0, 0]; k01 = k[o, ci, 0, 1]; k02 = k[o, ci, 0, 2]
            k10 = k[o, ci, 1, 0]; k11 = k[o, ci, 1, 1]; k12 = k[o, ci, 1, 2]
            k20 = k[o, ci, 2, 0]; k21 = k[o, ci, 2, 1]; k22 = k[o, ci, 2, 2]
            for p in range(h):
                x0 = xp[ni, ci, p]
                x1 = xp[ni, ci, p + 1]
                x2 = xp[ni, ci, p + 2]
                op = orow[p]
                for q in range(w):
                    op[q] += (k00 * x0[q] + k01 * x0[q + 1] + k02 * x0[q + 2]
                              + k10 * x1[q] + k11 * x1[q + 1] + k12 * x1[q + 2]
                              + k20 * x2[q] + k21 * x2[q + 1] + k22 * x2[q + 2])
    return out


@njit(parallel=True, cache=True, fastmath=True)
def conv3x3_wgrad_padded(xp, gy):
    """Kernel gradient: correlate padded (n,c,h+2,w+2) input with (n,co,h,w) output grads."""
    n, c, hp, wp = xp.shape
    h = hp - 2
    w = wp - 2
    co = gy.shape[1]
    out = np.empty((co, c, 3, 3), dtype=xp.dtype)
    for t in prange(co * c):
        o = t // c
        ci = t - o * c
        a00 = 0.0; a01 = 0.0; a02 = 0.0
        a10 = 0.0; a11 = 0.0; a12 = 0.0
        a20 = 0.0; a21 = 0.0; a22 = 0.0
        for ni in range(n):
            for p in range(h):
                g = gy[ni, o, p]
                x0 = xp[ni, ci, p]
                x1 = xp[ni, ci, p + 1]
                x2 = xp[ni, ci, p + 2]
                for q in range(w):
                    gq = g[q]
                    a00 += gq * x0[q]; a01 += gq * x0[q + 1]; a02 += gq * x0[q + 2]
                    a10 += gq * x1[q]; a11 += gq * x1[q + 1]; a12 += gq * x1[q + 2]
                    a20 += gq * x2[q]; a21 += gq * x2[q + 1]; a22 += gq * x2[q + 2]
        out[o, ci, 0, 0] = a00; out[o, ci, 0, 1] = a01; out[o, ci, 0, 2] = a02
        out[o, ci, 1, 0] = a10; out[o, ci, 1, 1] = a11; out[o, ci, 1, 2] = a12
        out[o, ci, 2, 0] = a20; out[o, ci, 2, 1] = a21; out[o, ci, 2, 2] = a22
    return out
