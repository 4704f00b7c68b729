"""Pure-numpy implementations of the hot kernels.

Convolutions go through an im2col view + tensordot (BLAS); the bilinear
pair uses fancy indexing / np.add.at. Same signatures as the numba
backend, float64 in and out.
"""

import numpy as np

NAME = "numpy"


def _col_view(xp, kh, kw, stride, ho, wo):
    # (cin, kh, kw, ho, wo) strided view over the padded input
    cs, hs, ws = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(xp.shape[0], kh, kw, ho, wo),
        strides=(cs, hs, ws, hs * stride, ws * stride),
        writeable=False,
    )


def _pad(x, pad):
    if pad == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad)))


def conv2d_forward(x, w, bias, stride, pad):
    """x: (cin,h,w), w: (cout,cin,kh,kw), bias: (cout,) -> (cout,ho,wo)."""
    cout, cin, kh, kw = w.shape
    h, wd = x.shape[1], x.shape[2]
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    cols = _col_view(_pad(x, pad), kh, kw, stride, ho, wo)
    out = np.tensordot(w, cols, axes=([1, 2, 3], [0, 1, 2]))
    out += bias[:, None, None]
    return out


def conv2d_grad_input(g, w, stride, pad, h, wd):
    """Gradient of conv2d_forward w.r.t. x, for upstream grad g (cout,ho,wo)."""
    cout, cin, kh, kw = w.shape
    ho, wo = g.shape[1], g.shape[2]
    cols_g = np.tensordot(w, g, axes=([0], [0]))  # (cin,kh,kw,ho,wo)
    gxp = np.zeros((cin, h + 2 * pad, wd + 2 * pad))
    for ky in range(kh):
        for kx in range(kw):
            gxp[:, ky:ky + ho * stride:stride, kx:kx + wo * stride:stride] += cols_g[:, ky, kx]
    if pad == 0:
        return gxp
    return gxp[:, pad:pad + h, pad:pad + wd]


def conv2d_grad_weight(g, x, stride, pad, kh, kw):
    """Gradient of conv2d_forward w.r.t. w; g: (cout,ho,wo), x: (cin,h,w)."""
    ho, wo = g.shape[1], g.shape[2]
    cols = _col_view(_pad(x, pad), kh, kw, stride, ho, wo)
    return np.tensordot(g, cols, axes=([1, 2], [3, 4]))


def _bilinear_coords(n_out, n_in):
    # align_corners=False source coordinates, clamped to the valid range
    s = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    s = np.clip(s, 0.0, n_in - 1.0)
    i0 = np.floor(s).astype(np.int64)
    i0 = np.minimum(i0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    t = s - i0
    return i0, i1, t


def bilinear_forward(x, ho, wo):
    """x: (c,h,w) -> (c,ho,wo), align_corners=False with edge clamping."""
    c, h, w = x.shape
    y0, y1, ty = _bilinear_coords(ho, h)
    x0, x1, tx = _bilinear_coords(wo, w)
    ty = ty[None, :, None]
    tx = tx[None, None, :]
    top = x[:, y0][:, :, x0] * (1 - tx) + x[:, y0][:, :, x1] * tx
    bot = x[:, y1][:, :, x0] * (1 - tx) + x[:, y1][:, :, x1] * tx
    return top * (1 - ty) + bot * ty


def bilinear_grad(g, h, w):
    """Gradient of bilinear_forward w.r.t. x; g: (c,ho,wo) -> (c,h,w)."""
    c, ho, wo = g.shape
    y0, y1, ty = _bilinear_coords(ho, h)
    x0, x1, tx = _bilinear_coords(wo, w)
    ty = ty[None, :, None]
    tx = tx[None, None, :]
    ci = np.arange(c)[:, None, None]
    gx = np.zeros((c, h, w))
    yy0 = y0[None, :, None]
    yy1 = y1[None, :, None]
    xx0 = x0[None, None, :]
    xx1 = x1[None, None, :]
    np.add.at(gx, (ci, yy0, xx0), g * (1 - ty) * (1 - tx))
    np.add.at(gx, (ci, yy0, xx1), g * (1 - ty) * tx)
    np.add.at(gx, (ci, yy1, xx0), g * ty * (1 - tx))
    np.add.at(gx, (ci, yy1, xx1), g * ty * tx)
    return gx
