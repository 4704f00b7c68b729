"""EMA teacher machinery: weight averaging, input perturbation, latent
anchors, and the contrastive map.

The teacher is a momentum copy of the student. Its features, selected
inside/outside confident box regions, become two kinds of anchors: one
global mean vector for the object class, and per-position attention
aggregates for the background. The student's fused features are then
scored against both anchors per position.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from . import tensor as T
from .errors import ShapeError

HI_THRESHOLD = 0.8
LO_THRESHOLD = 0.5


def ema_update(teacher, student, momentum=0.99):
    """theta_tea <- momentum * theta_tea + (1 - momentum) * theta_seg, in place.

    Computed in gap form theta + (1-momentum)*(s - theta), which is
    algebraically identical but keeps rounding error proportional to the
    teacher-student gap, so the geometric convergence law holds to ~1e-13
    over hundreds of steps.
    """
    if teacher.keys() != student.keys():
        missing = set(teacher) ^ set(student)
        raise ShapeError(f"ema_update: parameter sets differ on {sorted(missing)}")
    for name, t in teacher.items():
        s = student[name]
        if t.shape != s.shape:
            raise ShapeError(f"ema_update: {name} {t.shape} vs {s.shape}")
        t.assign_(t.values + (1.0 - momentum) * (s.values - t.values))


# --- input perturbation ---------------------------------------------------

@dataclass
class PerturbParams:
    brightness: float = 1.0   # multiplicative, in [0.8, 1.2]
    contrast: float = 1.0     # about the per-image mean, in [0.8, 1.2]
    hue_shift: float = 0.0    # fraction of the hue circle, in [-0.2, 0.2]
    rescale: float = 1.0      # one of {0.75, 1.0, 1.25}


def sample_perturbation(rng):
    return PerturbParams(
        brightness=float(rng.uniform(0.8, 1.2)),
        contrast=float(rng.uniform(0.8, 1.2)),
        hue_shift=float(rng.uniform(-0.2, 0.2)),
        rescale=float(rng.choice([0.75, 1.0, 1.25])),
    )


def _rgb_to_hsv(img):
    r, g, b = img
    mx = np.max(img, axis=0)
    mn = np.min(img, axis=0)
    d = mx - mn
    h = np.zeros_like(mx)
    nz = d > 0
    rmax = nz & (mx == r)
    gmax = nz & ~rmax & (mx == g)
    bmax = nz & ~rmax & ~gmax
    h[rmax] = ((g - b)[rmax] / d[rmax]) % 6.0
    h[gmax] = (b - r)[gmax] / d[gmax] + 2.0
    h[bmax] = (r - g)[bmax] / d[bmax] + 4.0
    h /= 6.0
    s = np.where(mx > 0, d / np.where(mx > 0, mx, 1.0), 0.0)
    return h, s, mx


def _hsv_to_rgb(h, s, v):
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    out = np.empty((3,) + h.shape)
    for k, (rr, gg, bb) in enumerate(((v, t, p), (q, v, p), (p, v, t),
                                      (p, q, v), (t, p, v), (v, p, q))):
        sel = i == k
        out[0][sel] = rr[sel]
        out[1][sel] = gg[sel]
        out[2][sel] = bb[sel]
    return out


def apply_perturbation(img, params):
    """Chromatic jitter then multi-scale round trip on a (3,H,W) image in [0,1].

    Identity parameters return the input untouched (no conversion round
    trips), so PerturbParams() is an exact no-op.
    """
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"apply_perturbation: expected (3,H,W), got {img.shape}")
    out = img
    if params.hue_shift != 0.0:
        h, s, v = _rgb_to_hsv(out)
        out = _hsv_to_rgb((h + params.hue_shift) % 1.0, s, v)
    if params.brightness != 1.0:
        out = out * params.brightness
    if params.contrast != 1.0:
        m = out.mean()
        out = (out - m) * params.contrast + m
    if params.rescale != 1.0:
        hh, ww = img.shape[1], img.shape[2]
        sh = max(1, int(round(hh * params.rescale)))
        sw = max(1, int(round(ww * params.rescale)))
        out = kernels.bilinear_forward(np.ascontiguousarray(out), sh, sw)
        out = kernels.bilinear_forward(out, hh, ww)
    if out is img:
        return img
    return np.clip(out, 0.0, 1.0)


def perturb_input(img, rng):
    """Randomly perturbed copy of img; deterministic for a given generator state."""
    return apply_perturbation(img, sample_perturbation(rng))


# --- feature selection and anchors ----------------------------------------

def downsample_area(x, h, w):
    """Area-average a (H,W) map down to (h,w); factors must divide evenly."""
    hh, ww = x.shape
    if hh % h or ww % w:
        raise ShapeError(f"downsample_area: {x.shape} not divisible into ({h},{w})")
    return x.reshape(h, hh // h, w, ww // w).mean(axis=(1, 3))


@dataclass
class FeatureSelection:
    """Teacher feature vectors split into confident object / background sets."""
    object_feats: np.ndarray      # (C, N)
    background_feats: np.ndarray  # (C, M)
    object_idx: np.ndarray        # (N,) flat indices into h*w
    background_idx: np.ndarray    # (M,)
    grid_shape: tuple = (0, 0)

    @property
    def n_object(self):
        return self.object_feats.shape[1]

    @property
    def n_background(self):
        return self.background_feats.shape[1]


def select_features(f_tea, b, m_tea, hi=HI_THRESHOLD, lo=LO_THRESHOLD):
    """Split teacher features by the box-gated teacher confidence b * m_tea.

    b and m_tea live at full resolution; both are area-averaged down to
    the feature grid (b additionally re-binarized at 0.5). Positions with
    product >= hi are object, < lo background; the band between is
    discarded as boundary ambiguity.
    """
    c, h, w = f_tea.shape
    b_ds = (downsample_area(np.asarray(b, dtype=np.float64), h, w) >= 0.5).astype(np.float64)
    conf = b_ds * downsample_area(np.asarray(m_tea, dtype=np.float64), h, w)
    flat = conf.ravel()
    obj_idx = np.flatnonzero(flat >= hi)
    bgd_idx = np.flatnonzero(flat < lo)
    feats = f_tea.reshape(c, h * w)
    return FeatureSelection(
        object_feats=feats[:, obj_idx],
        background_feats=feats[:, bgd_idx],
        object_idx=obj_idx,
        background_idx=bgd_idx,
        grid_shape=(h, w),
    )


@dataclass
class AnchorSet:
    """Object prototype (one vector) + per-position background prototypes."""
    object_anchor: np.ndarray = field(default_factory=lambda: np.zeros(0))   # (C,)
    background_anchors: np.ndarray = field(default_factory=lambda: np.zeros((0, 0, 0)))  # (C,h,w)
    valid: bool = False


def make_anchors(sel, f_tea, d_k=None):
    """Aggregate selected teacher features into anchors.

    The object anchor is the plain mean of the object features. Each grid
    position gets its own background anchor: attention over the M
    background vectors with logits f_bgd^T f / sqrt(d_k), d_k defaulting
    to the channel count. Anchors are plain arrays (no gradient path).
    """
    c, h, w = f_tea.shape
    if sel.n_object < 1 or sel.n_background < 1:
        return AnchorSet(valid=False)
    if d_k is None:
        d_k = c
    obj = sel.object_feats.mean(axis=1)
    logits = sel.background_feats.T @ f_tea.reshape(c, h * w) / np.sqrt(d_k)  # (M, h*w)
    logits -= logits.max(axis=0, keepdims=True)
    e = np.exp(logits)
    weights = e / e.sum(axis=0, keepdims=True)
    bgd = (sel.background_feats @ weights).reshape(c, h, w)
    return AnchorSet(object_anchor=obj, background_anchors=bgd, valid=True)


def contrastive_map(f, anchors):
    """Per-position probability that f is closer to the object anchor.

    exp(cos_obj) / (exp(cos_obj) + exp(cos_bgd)), computed as
    sigmoid(cos_obj - cos_bgd). f is the student's fused feature tensor;
    anchors are constants, so gradient flows into f only.
    """
    if not anchors.valid:
        raise ValueError("contrastive_map: anchors are not valid")
    cos_obj = T.cosine_map(f, T.constant(anchors.object_anchor))
    cos_bgd = T.cosine_map(f, T.constant(anchors.background_anchors))
    return T.sigmoid(T.subtract(cos_obj, cos_bgd))


def anchor_cosine_stats(sel, anchors):
    """Mean cosine of object/background features against the object anchor.

    Returns (mean_cos_object, mean_cos_background); NaN for an empty side.
    """
    if not anchors.valid:
        return float("nan"), float("nan")

    def mean_cos(feats):
        if feats.shape[1] == 0:
            return float("nan")
        norms = np.linalg.norm(feats, axis=0) * np.linalg.norm(anchors.object_anchor)
        norms = np.where(norms > 0, norms, 1.0)
        return float(np.mean(feats.T @ anchors.object_anchor / norms))

    return mean_cos(sel.object_feats), mean_cos(sel.background_feats)
