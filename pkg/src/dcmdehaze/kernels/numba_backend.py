"""Numba-jitted versions of the hot inner kernels.

Every output element is written by exactly one prange iteration, so results
are bitwise-reproducible regardless of thread count or scheduling. fastmath
stays off to keep IEEE semantics aligned with the numpy fallback. Inner
loops run over the fastest-varying axis with unit stride (a dedicated branch
handles stride 1) so LLVM can vectorize them.
"""

import numpy as np
from numba import njit, prange

NAME = "numba"


@njit(cache=True, parallel=True)
def im2col(xp, kh, kw, sh, sw):
    b, c, hp, wp = xp.shape
    oh = (hp - kh) // sh + 1
    ow = (wp - kw) // sw + 1
    k = c * kh * kw
    cols = np.empty((b, k, oh * ow), dtype=xp.dtype)
    for bk in prange(b * k):
        bi = bk // k
        ki = bk % k
        ci = ki // (kh * kw)
        u = (ki // kw) % kh
        v = ki % kw
        if sw == 1:
            for i in range(oh):
                base = i * ow
                row = i * sh + u
                for j in range(ow):
                    cols[bi, ki, base + j] = xp[bi, ci, row, v + j]
        else:
            for i in range(oh):
                base = i * ow
                row = i * sh + u
                for j in range(ow):
                    cols[bi, ki, base + j] = xp[bi, ci, row, j * sw + v]
    return cols


@njit(cache=True, parallel=True)
def col2im(cols, b, c, hp, wp, kh, kw, sh, sw, oh, ow):
    dxp = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    kk = kh * kw
    for bc in prange(b * c):
        bi = bc // c
        ci = bc % c
        for u in range(kh):
            for v in range(kw):
                ki = ci * kk + u * kw + v
                if sw == 1:
                    for i in range(oh):
                        base = i * ow
                        row = i * sh + u
                        for j in range(ow):
                            dxp[bi, ci, row, v + j] += cols[bi, ki, base + j]
                else:
                    for i in range(oh):
                        base = i * ow
                        row = i * sh + u
                        for j in range(ow):
                            dxp[bi, ci, row, j * sw + v] += cols[bi, ki, base + j]
    return dxp


@njit(cache=True, parallel=True)
def depthwise_forward(xp, w):
    b, c, hp, wp = xp.shape
    kh, kw = w.shape[1], w.shape[2]
    oh = hp - kh + 1
    ow = wp - kw + 1
    out = np.zeros((b, c, oh, ow), dtype=xp.dtype)
    for bc in prange(b * c):
        bi = bc // c
        ci = bc % c
        for u in range(kh):
            for v in range(kw):
                wv = w[ci, u, v]
                for i in range(oh):
                    for j in range(ow):
                        out[bi, ci, i, j] += xp[bi, ci, i + u, v + j] * wv
    return out


@njit(cache=True, parallel=True)
def depthwise_input_grad(dout, w, hp, wp):
    b, c, oh, ow = dout.shape
    kh, kw = w.shape[1], w.shape[2]
    dxp = np.zeros((b, c, hp, wp), dtype=dout.dtype)
    for bc in prange(b * c):
        bi = bc // c
        ci = bc % c
        for u in range(kh):
            for v in range(kw):
                wv = w[ci, u, v]
                for i in range(oh):
                    for j in range(ow):
                        dxp[bi, ci, i + u, v + j] += dout[bi, ci, i, j] * wv
    return dxp


@njit(cache=True, parallel=True)
def depthwise_weight_grad(xp, dout, kh, kw):
    b, c, oh, ow = dout.shape
    dw = np.zeros((c, kh, kw), dtype=dout.dtype)
    for ci in prange(c):
        for bi in range(b):
            for i in range(oh):
                for j in range(ow):
                    g = dout[bi, ci, i, j]
                    for u in range(kh):
                        for v in range(kw):
                            dw[ci, u, v] += xp[bi, ci, i + u, j + v] * g
    return dw
