"""Numba-jitted implementations of the hot kernels.

Explicit loops over pre-padded inputs; the innermost loop runs over the
output row so LLVM can vectorize it. cache=True keeps recompiles out of
repeat runs.
"""

import numpy as np
from numba import njit

NAME = "numba"


@njit(cache=True, fastmath=True)
def _conv2d_core(xp, w, bias, stride, ho, wo):
    cout, cin, kh, kw = w.shape
    out = np.empty((cout, ho, wo))
    for co in range(cout):
        for oy in range(ho):
            row = out[co, oy]
            row[:] = bias[co]
            iy0 = oy * stride
            for ci in range(cin):
                for ky in range(kh):
                    xrow = xp[ci, iy0 + ky]
                    for kx in range(kw):
                        wv = w[co, ci, ky, kx]
                        for ox in range(wo):
                            row[ox] += xrow[ox * stride + kx] * wv
    return out


@njit(cache=True)
def _pad_core(x, pad):
    c, h, w = x.shape
    out = np.zeros((c, h + 2 * pad, w + 2 * pad))
    out[:, pad:pad + h, pad:pad + w] = x
    return out


def _pad(x, pad):
    if pad == 0:
        return np.ascontiguousarray(x)
    return _pad_core(np.ascontiguousarray(x), pad)


def conv2d_forward(x, w, bias, stride, pad):
    """x: (cin,h,w), w: (cout,cin,kh,kw), bias: (cout,) -> (cout,ho,wo)."""
    kh, kw = w.shape[2], w.shape[3]
    ho = (x.shape[1] + 2 * pad - kh) // stride + 1
    wo = (x.shape[2] + 2 * pad - kw) // stride + 1
    return _conv2d_core(_pad(x, pad), w, bias, stride, ho, wo)


@njit(cache=True, fastmath=True)
def _conv2d_grad_input_core(g, w, stride, hp, wp):
    cout, cin, kh, kw = w.shape
    ho, wo = g.shape[1], g.shape[2]
    gxp = np.zeros((cin, hp, wp))
    for co in range(cout):
        for oy in range(ho):
            grow = g[co, oy]
            iy0 = oy * stride
            for ci in range(cin):
                for ky in range(kh):
                    xrow = gxp[ci, iy0 + ky]
                    for kx in range(kw):
                        wv = w[co, ci, ky, kx]
                        for ox in range(wo):
                            xrow[ox * stride + kx] += grow[ox] * wv
    return gxp


def conv2d_grad_input(g, w, stride, pad, h, wd):
    """Gradient of conv2d_forward w.r.t. x, for upstream grad g (cout,ho,wo)."""
    gxp = _conv2d_grad_input_core(
        np.ascontiguousarray(g), w, stride, h + 2 * pad, wd + 2 * pad
    )
    if pad == 0:
        return gxp
    return gxp[:, pad:pad + h, pad:pad + wd]


@njit(cache=True, fastmath=True)
def _conv2d_grad_weight_core(g, xp, stride, kh, kw):
    cout, ho, wo = g.shape
    cin = xp.shape[0]
    gw = np.zeros((cout, cin, kh, kw))
    for co in range(cout):
        for oy in range(ho):
            grow = g[co, oy]
            iy0 = oy * stride
            for ci in range(cin):
                for ky in range(kh):
                    xrow = xp[ci, iy0 + ky]
                    for kx in range(kw):
                        acc = 0.0
                        for ox in range(wo):
                            acc += grow[ox] * xrow[ox * stride + kx]
                        gw[co, ci, ky, kx] += acc
    return gw


def conv2d_grad_weight(g, x, stride, pad, kh, kw):
    """Gradient of conv2d_forward w.r.t. w; g: (cout,ho,wo), x: (cin,h,w)."""
    return _conv2d_grad_weight_core(np.ascontiguousarray(g), _pad(x, pad), stride, kh, kw)


@njit(cache=True)
def _bilinear_coords(n_out, n_in):
    i0 = np.empty(n_out, dtype=np.int64)
    i1 = np.empty(n_out, dtype=np.int64)
    t = np.empty(n_out)
    for i in range(n_out):
        s = (i + 0.5) * (n_in / n_out) - 0.5
        if s < 0.0:
            s = 0.0
        if s > n_in - 1.0:
            s = n_in - 1.0
        j0 = int(np.floor(s))
        if j0 > n_in - 1:
            j0 = n_in - 1
        j1 = j0 + 1
        if j1 > n_in - 1:
            j1 = n_in - 1
        i0[i] = j0
        i1[i] = j1
        t[i] = s - j0
    return i0, i1, t


@njit(cache=True)
def _bilinear_forward_core(x, ho, wo):
    c, h, w = x.shape
    y0, y1, ty = _bilinear_coords(ho, h)
    x0, x1, tx = _bilinear_coords(wo, w)
    out = np.empty((c, ho, wo))
    for ci in range(c):
        for oy in range(ho):
            r0 = x[ci, y0[oy]]
            r1 = x[ci, y1[oy]]
            a = ty[oy]
            for ox in range(wo):
                bx = tx[ox]
                top = r0[x0[ox]] * (1.0 - bx) + r0[x1[ox]] * bx
                bot = r1[x0[ox]] * (1.0 - bx) + r1[x1[ox]] * bx
                out[ci, oy, ox] = top * (1.0 - a) + bot * a
    return out


def bilinear_forward(x, ho, wo):
    """x: (c,h,w) -> (c,ho,wo), align_corners=False with edge clamping."""
    return _bilinear_forward_core(np.ascontiguousarray(x), ho, wo)


@njit(cache=True)
def _bilinear_grad_core(g, h, w):
    c, ho, wo = g.shape
    y0, y1, ty = _bilinear_coords(ho, h)
    x0, x1, tx = _bilinear_coords(wo, w)
    gx = np.zeros((c, h, w))
    for ci in range(c):
        for oy in range(ho):
            a = ty[oy]
            for ox in range(wo):
                bx = tx[ox]
                gv = g[ci, oy, ox]
                gx[ci, y0[oy], x0[ox]] += gv * (1.0 - a) * (1.0 - bx)
                gx[ci, y0[oy], x1[ox]] += gv * (1.0 - a) * bx
                gx[ci, y1[oy], x0[ox]] += gv * a * (1.0 - bx)
                gx[ci, y1[oy], x1[ox]] += gv * a * bx
    return gx


def bilinear_grad(g, h, w):
    """Gradient of bilinear_forward w.r.t. x; g: (c,ho,wo) -> (c,h,w)."""
    return _bilinear_grad_core(np.ascontiguousarray(g), h, w)
