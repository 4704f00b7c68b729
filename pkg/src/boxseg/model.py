"""Small convolutional segmentation model.

Four encoder stages at 1/4, 1/8, 1/16, 1/32 resolution, a per-stage 1x1
reduction to a common channel count, a decoder that multiplies each level
by all upsampled deeper levels before fusing coarsest-to-finest, and a
non-parametric multi-scale feature concatenation used by the contrastive
objective. Everything is per-sample: inputs are (3,S,S).
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .rng import STREAM_INIT, rng_for

GN_GROUPS = 4
ACT_SLOPE = 0.1


@dataclass
class ModelConfig:
    input_size: int = 64
    stage_channels: tuple = (8, 16, 32, 64)
    reduced_channels: int = 8
    seed: int = 0

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        if self.input_size % 32:
            raise ShapeError(f"input_size {self.input_size} must be divisible by 32")
        if len(self.stage_channels) != 4:
            raise ShapeError("exactly four encoder stages are supported")
        for c in self.stage_channels + (self.reduced_channels,):
            if c % GN_GROUPS:
                raise ShapeError(f"channel count {c} not divisible by {GN_GROUPS} groups")

    @property
    def fused_channels(self):
        return 4 * self.reduced_channels

    def header_items(self):
        return {
            "input_size": str(self.input_size),
            "stage_channels": ",".join(str(c) for c in self.stage_channels),
            "reduced_channels": str(self.reduced_channels),
            "seed": str(self.seed),
        }

    @classmethod
    def from_header(cls, header):
        return cls(
            input_size=int(header["input_size"]),
            stage_channels=tuple(int(c) for c in header["stage_channels"].split(",")),
            reduced_channels=int(header["reduced_channels"]),
            seed=int(header["seed"]),
        )


def _param_specs(cfg):
    """(name, kind, shape, fan_in) for every parameter, in a fixed order."""
    c1, c2, c3, c4 = cfg.stage_channels
    r = cfg.reduced_channels
    specs = []

    def conv(name, cout, cin, k):
        specs.append((f"{name}_w", "weight", (cout, cin, k, k), cin * k * k))
        specs.append((f"{name}_b", "zeros", (cout,), 0))

    def gn(name, c):
        specs.append((f"{name}_gw", "ones", (c,), 0))
        specs.append((f"{name}_gb", "zeros", (c,), 0))

    chans = {1: (3, c1), 2: (c1, c2), 3: (c2, c3), 4: (c3, c4)}
    for i in range(1, 5):
        cin, cout = chans[i]
        conv(f"enc{i}a", cout, cin, 3)
        gn(f"enc{i}a", cout)
        conv(f"enc{i}b", cout, cout, 3)
        gn(f"enc{i}b", cout)
    for i, c in enumerate((c1, c2, c3, c4), start=1):
        conv(f"red{i}", r, c, 1)
    for i in (3, 2, 1):
        specs.append((f"dec{i}_up_w", "weight", (r, r, 2, 2), r))
        specs.append((f"dec{i}_up_b", "zeros", (r,), 0))
        conv(f"dec{i}_mix", r, 2 * r, 1)
    conv("head", 1, r, 1)
    return specs


def init_params(cfg):
    """Seeded parameter set: fan-in-scaled uniform weights, zero biases."""
    rng = rng_for(STREAM_INIT, cfg.seed)
    params = {}
    for name, kind, shape, fan_in in _param_specs(cfg):
        if kind == "weight":
            bound = 1.0 / np.sqrt(fan_in)
            vals = rng.uniform(-bound, bound, size=shape)
        elif kind == "ones":
            vals = np.ones(shape)
        else:
            vals = np.zeros(shape)
        params[name] = T.parameter(vals)
    return params


def clone_params(params, requires_grad=False):
    return {k: T.DiffTensor(v.values.copy(), requires_grad=requires_grad)
            for k, v in params.items()}


def parameter_count(params):
    return sum(p.values.size for p in params.values())


def _block(params, name, x, stride):
    y = T.conv2d(x, params[f"{name}_w"], params[f"{name}_b"], stride=stride, pad=1)
    y = T.group_norm(y, params[f"{name}_gw"], params[f"{name}_gb"], GN_GROUPS)
    return T.leaky_relu(y, ACT_SLOPE)


def encode(params, cfg, img):
    """(3,S,S) -> four reduced feature maps at 1/4, 1/8, 1/16, 1/32 scale."""
    x = img if isinstance(img, T.DiffTensor) else T.constant(img)
    if x.shape != (3, cfg.input_size, cfg.input_size):
        raise ShapeError(f"encode: expected (3,{cfg.input_size},{cfg.input_size}), got {x.shape}")
    stages = []
    e = x
    for i in range(1, 5):
        e = _block(params, f"enc{i}a", e, stride=2)
        e = _block(params, f"enc{i}b", e, stride=2 if i == 1 else 1)
        stages.append(e)
    return tuple(
        T.conv2d(s, params[f"red{i}_w"], params[f"red{i}_b"], stride=1, pad=0)
        for i, s in enumerate(stages, start=1)
    )


def _multiply_updated(pyr):
    # each level times every deeper level, upsampled to its size
    updated = []
    for i, fi in enumerate(pyr):
        n = fi.shape[1]
        u = fi
        for fj in pyr[i + 1:]:
            u = T.multiply(u, T.bilinear_upsample(fj, n, n))
        updated.append(u)
    return updated


def decode(params, cfg, pyr):
    """Pyramid -> sigmoid probability map (S,S)."""
    u1, u2, u3, u4 = _multiply_updated(pyr)
    g = u4
    for i, ui in ((3, u3), (2, u2), (1, u1)):
        up = T.deconv2d(g, params[f"dec{i}_up_w"], params[f"dec{i}_up_b"], stride=2)
        g = T.conv2d(T.concat([up, ui], axis=0),
                     params[f"dec{i}_mix_w"], params[f"dec{i}_mix_b"], stride=1, pad=0)
    logits = T.conv2d(g, params["head_w"], params["head_b"], stride=1, pad=0)
    s = cfg.input_size
    return T.sigmoid(T.reshape(T.bilinear_upsample(logits, s, s), (s, s)))


def fuse_features(pyr):
    """Non-parametric fusion: upsample every level to 1/4 scale and concatenate."""
    n = pyr[0].shape[1]
    parts = [pyr[0]] + [T.bilinear_upsample(f, n, n) for f in pyr[1:]]
    return T.concat(parts, axis=0)


def forward(params, cfg, img):
    """Full forward pass: (m, f) with m (S,S) in (0,1) and f (4r, S/4, S/4)."""
    pyr = encode(params, cfg, img)
    return decode(params, cfg, pyr), fuse_features(pyr)


def forward_teacher(params, cfg, img):
    """Teacher pass: same topology, no recording; returns plain arrays."""
    with T.no_grad():
        m, f = forward(params, cfg, img)
    return m.values, f.values
