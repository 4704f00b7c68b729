"""Box masks, shape decoupling, and proxy-map construction.

A prediction is squeezed into its row-wise and column-wise maxima and
re-projected as their outer product: location and extent survive, shape
does not. Re-projecting a multi-box mask creates false support where one
box's rows cross another's columns; those confusion pixels are detected
on the box mask itself (which re-projection must leave unchanged) and
swapped back to raw prediction values.
"""

import numpy as np

from . import tensor as T
from .errors import ShapeError


def validate_boxes(boxes, h, w):
    """Each box is (x0, y0, x1, y1), corners inclusive, inside the frame."""
    for i, box in enumerate(boxes):
        if len(box) != 4:
            raise ValueError(f"box {i}: expected 4 coordinates, got {len(box)}")
        x0, y0, x1, y1 = (int(v) for v in box)
        if not (0 <= x0 <= x1 < w and 0 <= y0 <= y1 < h):
            raise ValueError(f"box {i}: ({x0},{y0},{x1},{y1}) out of range for {w}x{h}")


def boxes_to_mask(boxes, h, w):
    """Union indicator of inclusive rectangles, as a float64 0/1 array."""
    validate_boxes(boxes, h, w)
    mask = np.zeros((h, w))
    for x0, y0, x1, y1 in boxes:
        mask[int(y0):int(y1) + 1, int(x0):int(x1) + 1] = 1.0
    return mask


def decouple_projections(x):
    """Row maxima (...,H,1) and column maxima (...,1,W) of a plain array."""
    x = np.asarray(x, dtype=np.float64)
    return x.max(axis=-1, keepdims=True), x.max(axis=-2, keepdims=True)


def decouple_array(x):
    """Preliminary proxy of a plain array: outer product of its projections.

    Broadcasts over leading axes, so a (N,H,W) batch works in one call.
    """
    rows, cols = decouple_projections(x)
    return rows * cols


def shape_decouple(m):
    """Differentiable shape decoupling of a 2D map.

    Returns ((o, v), prelim) where o, v are the (H,1)/(1,W) max
    projections and prelim is their outer product.
    """
    o, v = T.rowcol_maxpool(m)
    return (o, v), T.outer_product(o, v)


def confusion_mask(b):
    """Pixels the re-projection of a box mask adds on top of the mask itself.

    c = decouple(b) - b; binary and zero wherever b is 1. Accepts leading
    batch axes.
    """
    b = np.asarray(b, dtype=np.float64)
    return decouple_array(b) - b


def swap_confusion(prelim, m, c):
    """Per-pixel select: raw prediction inside confusion pixels, proxy elsewhere.

    p = m*c + prelim*(1-c), with c a constant binary map.
    """
    c = np.asarray(c, dtype=np.float64)
    if c.shape != m.shape or c.shape != prelim.shape:
        raise ShapeError(f"swap_confusion: shapes {prelim.shape}/{m.shape}/{c.shape}")
    if not np.all((c == 0.0) | (c == 1.0)):
        raise ValueError("swap_confusion: confusion mask must be binary")
    cT = T.constant(c)
    return T.add(T.multiply(m, cT), T.multiply(prelim, T.complement(cT)))


def build_proxy(m, b, *, swap=True):
    """Full proxy construction: decouple m, then swap confusion regions of b.

    With swap=False the preliminary (unswapped) proxy is returned, which
    is the single-box-only variant used as an ablation.
    """
    b = np.asarray(b, dtype=np.float64)
    if b.shape != m.shape:
        raise ShapeError(f"build_proxy: m {m.shape} vs b {b.shape}")
    _, prelim = shape_decouple(m)
    if not swap:
        return prelim
    return swap_confusion(prelim, m, confusion_mask(b))
