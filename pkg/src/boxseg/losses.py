"""The four training objectives.

All are negative soft-dice terms in [-1, 0]:

  box term      dice(proxy(m), b) on the shape-decoupled, confusion-swapped
                prediction
  contrast term dice(proxy(upsampled contrastive map), b)
  pixel term    dice(m, b * binarized teacher mask)
  total         unweighted sum of the three

Teacher quantities enter as constants; no gradient reaches them.
"""

from dataclasses import dataclass

import numpy as np

from . import boxops
from . import teacher as tch
from . import tensor as T
from .errors import ShapeError


@dataclass
class LossFlags:
    """Ablation switches. Disabled terms contribute a constant 0."""
    ibox: bool = True
    cla: bool = True
    px: bool = True
    swap_confusion: bool = True
    decouple: bool = True


@dataclass
class LossBundle:
    ibox: T.DiffTensor
    cla: T.DiffTensor
    px: T.DiffTensor
    total: T.DiffTensor

    def as_floats(self):
        return {
            "ibox": self.ibox.item(),
            "cla": self.cla.item(),
            "px": self.px.item(),
            "total": self.total.item(),
        }


def _zero():
    return T.constant(0.0)


def ibox_loss(m, b, *, decouple=True, swap=True):
    """Soft dice between the proxy of m and the box mask b.

    decouple=False skips proxy construction entirely (plain dice against
    the box-filled mask, the collapse baseline); swap=False keeps the
    preliminary proxy.
    """
    b = np.asarray(b, dtype=np.float64)
    if b.shape != m.shape:
        raise ShapeError(f"ibox_loss: m {m.shape} vs b {b.shape}")
    if not decouple:
        return T.soft_dice(m, T.constant(b))
    proxy = boxops.build_proxy(m, b, swap=swap)
    return T.soft_dice(proxy, T.constant(b))


def cla_loss(m_ctr, b, *, swap=True):
    """Box-dice on the upsampled contrastive map, via the same proxy pipeline."""
    b = np.asarray(b, dtype=np.float64)
    if m_ctr.ndim != 2:
        raise ShapeError(f"cla_loss: contrastive map must be 2D, got {m_ctr.shape}")
    up = T.bilinear_upsample(m_ctr, b.shape[0], b.shape[1])
    return ibox_loss(up, b, decouple=True, swap=swap)


def px_loss(m, m_tea, b):
    """Teacher-guided pixel dice.

    Target is b * binarize(m_tea, 0.5), a constant; the model keeps its
    mass inside the teacher's confident in-box region.
    """
    m_tea = np.asarray(m_tea, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if m_tea.shape != m.shape or b.shape != m.shape:
        raise ShapeError(f"px_loss: m {m.shape} vs m_tea {m_tea.shape} vs b {b.shape}")
    target = b * (m_tea >= 0.5)
    return T.soft_dice(m, T.constant(target))


def total_loss(m, f, b, m_tea, f_tea, flags=None, anchors=None):
    """All three terms plus their sum, honoring the ablation flags.

    The contrast term needs anchors; they are derived from the teacher
    outputs here unless passed in. When either anchor side is empty the
    term contributes 0 for this step. Returns (bundle, anchors).
    """
    flags = flags or LossFlags()
    if flags.ibox:
        l_ibox = ibox_loss(m, b, decouple=flags.decouple, swap=flags.swap_confusion)
    else:
        l_ibox = _zero()

    l_cla = _zero()
    if flags.cla:
        if anchors is None:
            sel = tch.select_features(f_tea, b, m_tea)
            anchors = tch.make_anchors(sel, f_tea)
        if anchors.valid:
            m_ctr = tch.contrastive_map(f, anchors)
            l_cla = cla_loss(m_ctr, b, swap=flags.swap_confusion)

    l_px = px_loss(m, m_tea, b) if flags.px else _zero()

    total = T.add(T.add(l_ibox, l_cla), l_px)
    return LossBundle(ibox=l_ibox, cla=l_cla, px=l_px, total=total), anchors
