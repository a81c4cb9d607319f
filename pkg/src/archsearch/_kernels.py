"""Compiled loops for the spatial ops that vectorise poorly in numpy.

All kernels run single-threaded with strict IEEE semantics so results are
bitwise reproducible.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def dw_forward(xp, w, stride, dil, ho, wo):
    b, c = xp.shape[0], xp.shape[1]
    kh, kw = w.shape[1], w.shape[2]
    y = np.zeros((b, c, ho, wo))
    for n in range(b):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    wv = w[ch, i, j]
                    for p in range(ho):
                        r = p * stride + i * dil
                        for q in range(wo):
                            y[n, ch, p, q] += wv * xp[n, ch, r, q * stride + j * dil]
    return y


@njit(cache=True)
def dw_backward(xp, w, g, stride, dil):
    b, c, ho, wo = g.shape
    kh, kw = w.shape[1], w.shape[2]
    gxp = np.zeros(xp.shape)
    gw = np.zeros(w.shape)
    for n in range(b):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    wv = w[ch, i, j]
                    acc = 0.0
                    for p in range(ho):
                        r = p * stride + i * dil
                        for q in range(wo):
                            s = q * stride + j * dil
                            gv = g[n, ch, p, q]
                            acc += gv * xp[n, ch, r, s]
                            gxp[n, ch, r, s] += gv * wv
                    gw[ch, i, j] += acc
    return gxp, gw


@njit(cache=True)
def maxpool_forward(xp, stride, ho, wo):
    """3x3 max over a (-inf padded) input; ties keep the first tap in raster order."""
    b, c = xp.shape[0], xp.shape[1]
    y = np.empty((b, c, ho, wo))
    arg = np.empty((b, c, ho, wo), dtype=np.int8)
    for n in range(b):
        for ch in range(c):
            for p in range(ho):
                for q in range(wo):
                    best = -np.inf
                    k = 0
                    for t in range(9):
                        v = xp[n, ch, p * stride + t // 3, q * stride + t % 3]
                        if v > best:
                            best = v
                            k = t
                    y[n, ch, p, q] = best
                    arg[n, ch, p, q] = k
    return y, arg


@njit(cache=True)
def maxpool_backward(g, arg, stride, hp, wp):
    b, c, ho, wo = g.shape
    gxp = np.zeros((b, c, hp, wp))
    for n in range(b):
        for ch in range(c):
            for p in range(ho):
                for q in range(wo):
                    t = arg[n, ch, p, q]
                    gxp[n, ch, p * stride + t // 3, q * stride + t % 3] += g[n, ch, p, q]
    return gxp


@njit(cache=True)
def bn_forward(x, gamma, beta, mu, var, eps):
    """y = (x - mu) / sqrt(var + eps) * gamma + beta on a (B, C, P) array.

    ``mu``/``var`` of length zero request batch statistics, which are
    returned together with xhat and 1/sqrt(var + eps).
    """
    b, c, p = x.shape
    batch = mu.shape[0] == 0
    m = b * p
    mu_o = np.empty(c)
    var_o = np.empty(c)
    inv = np.empty(c)
    xhat = np.empty(x.shape)
    y = np.empty(x.shape)
    for ch in range(c):
        if batch:
            s = 0.0
            for n in range(b):
                for i in range(p):
                    s += x[n, ch, i]
            mean = s / m
            s2 = 0.0
            for n in range(b):
                for i in range(p):
                    d = x[n, ch, i] - mean
                    s2 += d * d
            v = s2 / m
        else:
            mean = mu[ch]
            v = var[ch]
        mu_o[ch] = mean
        var_o[ch] = v
        iv = 1.0 / np.sqrt(v + eps)
        inv[ch] = iv
        gm, bt = gamma[ch], beta[ch]
        for n in range(b):
            for i in range(p):
                xh = (x[n, ch, i] - mean) * iv
                xhat[n, ch, i] = xh
                y[n, ch, i] = xh * gm + bt
    return y, xhat, mu_o, var_o, inv


@njit(cache=True)
def bn_backward(g, xhat, gamma, inv, batch):
    b, c, p = g.shape
    m = b * p
    gx = np.empty(g.shape)
    gg = np.empty(c)
    gb = np.empty(c)
    for ch in range(c):
        sg = 0.0
        sgx = 0.0
        for n in range(b):
            for i in range(p):
                sg += g[n, ch, i]
                sgx += g[n, ch, i] * xhat[n, ch, i]
        gb[ch] = sg
        gg[ch] = sgx
        scale = gamma[ch] * inv[ch]
        if batch:
            for n in range(b):
                for i in range(p):
                    gx[n, ch, i] = scale * (g[n, ch, i] - (sg + xhat[n, ch, i] * sgx) / m)
        else:
            for n in range(b):
                for i in range(p):
                    gx[n, ch, i] = scale * g[n, ch, i]
    return gx, gg, gb


@njit(cache=True)
def im2col(xp, taps, stride, dil, ho, wo):
    """Gather the (row, col) kernel offsets listed in ``taps`` into (B, C, T, Ho, Wo)."""
    b, c = xp.shape[0], xp.shape[1]
    nt = taps.shape[0]
    cols = np.empty((b, c, nt, ho, wo))
    for n in range(b):
        for ch in range(c):
            for t in range(nt):
                i, j = taps[t, 0], taps[t, 1]
                for p in range(ho):
                    r = p * stride + i * dil
                    for q in range(wo):
                        cols[n, ch, t, p, q] = xp[n, ch, r, q * stride + j * dil]
    return cols


@njit(cache=True)
def col2im(gcols, taps, hp, wp, stride, dil):
    b, c, nt, ho, wo = gcols.shape
    gxp = np.zeros((b, c, hp, wp))
    for n in range(b):
        for ch in range(c):
            for t in range(nt):
                i, j = taps[t, 0], taps[t, 1]
                for p in range(ho):
                    r = p * stride + i * dil
                    for q in range(wo):
                        gxp[n, ch, r, q * stride + j * dil] += gcols[n, ch, t, p, q]
    return gxp
