"""Compiled inner loops for stride-1 3D convolution.

Arrays here are channel-first (C, D, H, W) so the innermost loop runs over
the contiguous width axis. Callers in :mod:`tversky3d.nn` handle the
transposition from the public depth x height x width x channels layout.
"""
import numba
import numpy as np


@numba.njit(cache=True, fastmath=True)
def conv_valid_forward(xp, w, b, out):
    co_n, d_n, h_n, w_n = out.shape
    k0, k1, k2, ci_n = w.shape[0], w.shape[1], w.shape[2], w.shape[3]
    for co in range(co_n):
        for d in range(d_n):
            for h in range(h_n):
                o = out[co, d, h]
                for x in range(w_n):
                    o[x] = b[co]
                for a in range(k0):
                    for bb in range(k1):
                        for ci in range(ci_n):
                            row = xp[ci, d + a, h + bb]
                            for c in range(k2):
                                wv = w[a, bb, c, ci, co]
                                for x in range(w_n):
                                    o[x] += wv * row[x + c]


@numba.njit(cache=True, fastmath=True)
def conv_valid_backward(xp, w, g, gxp, gw):
    # gxp and gw are accumulated into; callers pass zeroed buffers.
    co_n, d_n, h_n, w_n = g.shape
    k0, k1, k2, ci_n = w.shape[0], w.shape[1], w.shape[2], w.shape[3]
    for co in range(co_n):
        for d in range(d_n):
            for h in range(h_n):
                gr = g[co, d, h]
                for a in range(k0):
                    for bb in range(k1):
                        for ci in range(ci_n):
                            row = xp[ci, d + a, h + bb]
                            grow = gxp[ci, d + a, h + bb]
                            for c in range(k2):
                                wv = w[a, bb, c, ci, co]
                                s = 0.0
                                for x in range(w_n):
                                    s += row[x + c] * gr[x]
                                    grow[x + c] += wv * gr[x]
                                gw[a, bb, c, ci, co] += s


def warmup() -> None:
    """Trigger compilation on tiny inputs."""
    xp = np.zeros((1, 3, 3, 3))
    w = np.zeros((3, 3, 3, 1, 1))
    out = np.zeros((1, 1, 1, 1))
    conv_valid_forward(xp, w, np.zeros(1), out)
    conv_valid_backward(xp, w, out, np.zeros_like(xp), np.zeros_like(w))
