"""Compiled loops for depthwise convolution (one pass, no temporaries)."""

import numba
import numpy as np


@numba.njit(cache=True)
def depthwise_forward(xp, w, stride, Ho, Wo):
    B, C = xp.shape[0], xp.shape[1]
    kh, kw = w.shape[2], w.shape[3]
    out = np.zeros((B, C, Ho, Wo))
    for b in range(B):
        for c in range(C):
            for i in range(kh):
                for j in range(kw):
                    wij = w[c, 0, i, j]
                    for h in range(Ho):
                        for q in range(Wo):
                            out[b, c, h, q] += wij * xp[b, c, h * stride + i, q * stride + j]
    return out


@numba.njit(cache=True)
def depthwise_backward(g, xp, w, stride, need_x, need_w):
    B, C, Ho, Wo = g.shape
    kh, kw = w.shape[2], w.shape[3]
    gxp = np.zeros(xp.shape) if need_x else np.zeros((1, 1, 1, 1))
    gw = np.zeros(w.shape)
    for b in range(B):
        for c in range(C):
            for i in range(kh):
                for j in range(kw):
                    wij = w[c, 0, i, j]
                    acc = 0.0
                    for h in range(Ho):
                        for q in range(Wo):
                            gv = g[b, c, h, q]
                            r = h * stride + i
                            s = q * stride + j
                            if need_w:
                                acc += gv * xp[b, c, r, s]
                            if need_x:
                                gxp[b, c, r, s] += gv * wij
                    gw[c, 0, i, j] += acc
    return gxp, gw
