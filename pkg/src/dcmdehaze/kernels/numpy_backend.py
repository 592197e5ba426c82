"""Pure-numpy implementations of the hot inner kernels.

These are the fallback path when numba is unavailable or disabled via
DCM_NUMBA=0. Shapes follow the conventions used by the autodiff layer:
feature maps are (B, C, H, W), im2col matrices are (B, C*kh*kw, OH*OW)
with the patch index varying fastest over (c, u, v).
"""

import numpy as np

NAME = "numpy"


def im2col(xp, kh, kw, sh, sw):
    b, c, hp, wp = xp.shape
    oh = (hp - kh) // sh + 1
    ow = (wp - kw) // sw + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::sh, ::sw]  # (B, C, OH, OW, kh, kw)
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * kh * kw, oh * ow)
    return np.ascontiguousarray(cols)


def col2im(cols, b, c, hp, wp, kh, kw, sh, sw, oh, ow):
    dxp = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    cols6 = cols.reshape(b, c, kh, kw, oh, ow)
    for u in range(kh):
        for v in range(kw):
            dxp[:, :, u:u + sh * oh:sh, v:v + sw * ow:sw] += cols6[:, :, u, v]
    return dxp


def depthwise_forward(xp, w):
    kh, kw = w.shape[1], w.shape[2]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return np.einsum("bchwuv,cuv->bchw", win, w, optimize=True)


def depthwise_input_grad(dout, w, hp, wp):
    b, c, oh, ow = dout.shape
    kh, kw = w.shape[1], w.shape[2]
    dxp = np.zeros((b, c, hp, wp), dtype=dout.dtype)
    for u in range(kh):
        for v in range(kw):
            dxp[:, :, u:u + oh, v:v + ow] += dout * w[:, u, v][None, :, None, None]
    return dxp


def depthwise_weight_grad(xp, dout, kh, kw):
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return np.einsum("bchwuv,bchw->cuv", win, dout, optimize=True)
