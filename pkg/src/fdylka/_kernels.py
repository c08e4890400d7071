"""Compiled inner loops for depthwise convolution (stride 1, any dilation)."""

import numpy as np
from numba import njit


@njit(cache=True, fastmath=True)
def depthwise_forward(xp, k, dt, df, out):
    """out[b, c] = valid cross-correlation of xp[b, c] with dilated k[c]."""
    B, C, To, Fo = out.shape
    kT, kF = k.shape[1], k.shape[2]
    acc = np.empty(Fo)
    for b in range(B):
        for c in range(C):
            src = xp[b, c]
            dst = out[b, c]
            for t in range(To):
                acc[:] = 0.0
                for i in range(kT):
                    row = src[t + i * dt]
                    for j in range(kF):
                        w = k[c, i, j]
                        seg = row[j * df : j * df + Fo]
                        for f in range(Fo):
                            acc[f] += w * seg[f]
                dst[t, :] = acc


@njit(cache=True, fastmath=True)
def depthwise_backward_kernel(g, xp, dt, df, gk):
    B, C, To, Fo = g.shape
    kT, kF = gk.shape[1], gk.shape[2]
    gk[:] = 0.0
    for b in range(B):
        for c in range(C):
            gp = g[b, c]
            xq = xp[b, c]
            for i in range(kT):
                for j in range(kF):
                    s = 0.0
                    for t in range(To):
                        grow = gp[t]
                        seg = xq[t + i * dt, j * df : j * df + Fo]
                        for f in range(Fo):
                            s += grow[f] * seg[f]
                    gk[c, i, j] += s
