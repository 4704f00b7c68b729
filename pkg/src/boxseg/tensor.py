"""Dense float64 tensors with reverse-mode differentiation.

The op set is closed: exactly the operations the training pipeline needs,
each with a hand-written backward rule. Ops record onto the innermost
active `Tape`; `Tape.backward(loss)` replays the records once, in reverse
recording order, and accumulates gradients into every requires_grad
tensor they reach. Broadcasting is restricted to equal shapes or a scalar
operand.
"""

from __future__ import annotations

import contextlib

import numpy as np

from . import kernels
from .errors import ShapeError

COSINE_EPS = 1e-8
DICE_EPS = 1e-6


class DiffTensor:
    """A float64 array plus gradient bookkeeping."""

    __slots__ = ("values", "requires_grad", "grad", "node_id")

    _next_id = 0

    def __init__(self, values, requires_grad=False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node_id = DiffTensor._next_id
        DiffTensor._next_id += 1

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    def item(self):
        if self.values.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def zero_grad(self):
        self.grad = None

    def assign_(self, values):
        """In-place value update for leaf tensors (optimizer / EMA use only)."""
        arr = np.asarray(values, dtype=np.float64)
        if arr.shape != self.values.shape:
            raise ShapeError(f"assign_ shape {arr.shape} != {self.values.shape}")
        self.values = arr

    def detach(self):
        return DiffTensor(self.values.copy(), requires_grad=False)

    def __repr__(self):
        return f"DiffTensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; python scalars become constants
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return subtract(self, _wrap(other))

    def __rsub__(self, other):
        return subtract(_wrap(other), self)

    def __mul__(self, other):
        return multiply(self, _wrap(other))

    def __rmul__(self, other):
        return multiply(_wrap(other), self)

    def __truediv__(self, other):
        return divide(self, _wrap(other))

    def __neg__(self):
        return scale(self, -1.0)


def constant(values):
    return DiffTensor(values, requires_grad=False)


def parameter(values):
    return DiffTensor(values, requires_grad=True)


def _wrap(x):
    if isinstance(x, DiffTensor):
        return x
    return constant(x)


# --- tape ---------------------------------------------------------------

_tape_stack: list["Tape"] = []
_grad_enabled = True


class Tape:
    """Ordered record of operations; inputs always precede their consumers."""

    def __init__(self):
        self.records = []  # (out, inputs, backward) in forward order

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self.records)

    def backward(self, loss):
        """Populate grads of every requires_grad tensor reachable from loss.

        Visits each record exactly once, in reverse recording order.
        Repeated calls accumulate into .grad.
        """
        if not isinstance(loss, DiffTensor):
            raise ShapeError("backward expects a DiffTensor")
        if loss.values.shape != ():
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.values.shape}")
        pending = {id(loss): np.ones((), dtype=np.float64)}
        holders = {id(loss): loss}
        for out, inputs, bwd in reversed(self.records):
            g = pending.pop(id(out), None)
            if g is None:
                continue
            if out.requires_grad:
                out.grad = g if out.grad is None else out.grad + g
            for t, gi in zip(inputs, bwd(g)):
                if gi is None or not t.requires_grad:
                    continue
                k = id(t)
                if k in pending:
                    pending[k] = pending[k] + gi
                else:
                    pending[k] = gi
                    holders[k] = t
        for k, g in pending.items():
            t = holders[k]
            if t.requires_grad:
                t.grad = g if t.grad is None else t.grad + g


def backward(loss):
    """Backward through the innermost active tape."""
    if not _tape_stack:
        raise ShapeError("backward called with no active Tape")
    _tape_stack[-1].backward(loss)


@contextlib.contextmanager
def no_grad():
    """Disable recording; everything computed inside is a constant."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _emit(values, inputs, backward_fn):
    out = DiffTensor(values)
    if _grad_enabled and _tape_stack and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _tape_stack[-1].records.append((out, inputs, backward_fn))
    return out


# --- elementwise --------------------------------------------------------

def _check_pair(a, b, op):
    if a.shape == b.shape or a.values.size == 1 or b.values.size == 1:
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable "
                     "(only equal shapes or a scalar operand)")


def _reduce_to(g, shape):
    # collapse a broadcasted gradient back onto a scalar operand
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


def add(a, b):
    _check_pair(a, b, "add")
    return _emit(a.values + b.values, (a, b),
                 lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))


def subtract(a, b):
    _check_pair(a, b, "subtract")
    return _emit(a.values - b.values, (a, b),
                 lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)))


def multiply(a, b):
    _check_pair(a, b, "multiply")
    return _emit(a.values * b.values, (a, b),
                 lambda g: (_reduce_to(g * b.values, a.shape),
                            _reduce_to(g * a.values, b.shape)))


def divide(a, b):
    _check_pair(a, b, "divide")
    return _emit(a.values / b.values, (a, b),
                 lambda g: (_reduce_to(g / b.values, a.shape),
                            _reduce_to(-g * a.values / (b.values * b.values), b.shape)))


def scale(x, c):
    c = float(c)
    return _emit(x.values * c, (x,), lambda g: (g * c,))


def complement(x):
    """1 - x."""
    return _emit(1.0 - x.values, (x,), lambda g: (-g,))


def sigmoid(x):
    v = x.values
    y = np.empty_like(v)
    pos = v >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ey = np.exp(v[~pos])
    y[~pos] = ey / (1.0 + ey)
    return _emit(y, (x,), lambda g: (g * y * (1.0 - y),))


def exp(x):
    y = np.exp(x.values)
    return _emit(y, (x,), lambda g: (g * y,))


def sqrt(x):
    y = np.sqrt(x.values)
    return _emit(y, (x,), lambda g: (g * 0.5 / y,))


def leaky_relu(x, slope=0.1):
    pos = x.values > 0
    y = np.where(pos, x.values, slope * x.values)
    return _emit(y, (x,), lambda g: (g * np.where(pos, 1.0, slope),))


_ELEMENTWISE = {
    "add": add,
    "subtract": subtract,
    "multiply": multiply,
    "divide": divide,
    "scale": scale,
    "sigmoid": sigmoid,
    "complement": complement,
    "exp": exp,
    "sqrt": sqrt,
    "leaky_relu": leaky_relu,
}


def elementwise(kind, a, b=None):
    """Dispatch by name; binary kinds need b (scale takes a float)."""
    fn = _ELEMENTWISE.get(kind)
    if fn is None:
        raise ShapeError(f"unknown elementwise kind {kind!r}")
    return fn(a) if b is None else fn(a, b)


# --- reductions and structure -------------------------------------------

def tsum(x):
    """Sum of all elements, as a scalar tensor."""
    shape = x.shape
    return _emit(np.asarray(x.values.sum()), (x,),
                 lambda g: (np.broadcast_to(g, shape).copy() if shape else g,))


def mean(x):
    return scale(tsum(x), 1.0 / x.values.size)


def softmax(x, axis):
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    v = x.values
    shifted = v - v.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _emit(y, (x,), bwd)


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    return _emit(a.values @ b.values, (a, b),
                 lambda g: (g @ b.values.T, a.values.T @ g))


def reshape(x, shape):
    old = x.shape
    return _emit(x.values.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(tensors, axis=0):
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        idx = [slice(None)] * g.ndim
        outs = []
        for i in range(len(tensors)):
            idx[axis] = slice(offsets[i], offsets[i + 1])
            outs.append(g[tuple(idx)])
        return tuple(outs)

    return _emit(np.concatenate([t.values for t in tensors], axis=axis), tuple(tensors), bwd)


# --- projections ----------------------------------------------------------

def rowcol_maxpool(m):
    """Row-wise and column-wise maxima of a 2D map.

    Returns (o, v) with shapes (H,1) and (1,W). Backward routes each
    output gradient entirely to the first maximal element of that
    row/column, so the gradient is one-hot per row and per column.
    """
    if m.ndim != 2 or m.values.size == 0:
        raise ShapeError(f"rowcol_maxpool needs a nonempty 2D tensor, got {m.shape}")
    v2d = m.values
    h, w = v2d.shape
    row_arg = v2d.argmax(axis=1)  # first max per row
    col_arg = v2d.argmax(axis=0)  # first max per column
    o_vals = v2d[np.arange(h), row_arg].reshape(h, 1)
    v_vals = v2d[col_arg, np.arange(w)].reshape(1, w)

    def bwd_o(g):
        gm = np.zeros((h, w))
        gm[np.arange(h), row_arg] = g[:, 0]
        return (gm,)

    def bwd_v(g):
        gm = np.zeros((h, w))
        gm[col_arg, np.arange(w)] = g[0, :]
        return (gm,)

    o = _emit(o_vals, (m,), bwd_o)
    v = _emit(v_vals, (m,), bwd_v)
    return o, v


def outer_product(o, v):
    """(H,1) x (1,W) -> (H,W)."""
    if o.ndim != 2 or o.shape[1] != 1 or v.ndim != 2 or v.shape[0] != 1:
        raise ShapeError(f"outer_product: {o.shape} x {v.shape}")
    return _emit(o.values * v.values, (o, v),
                 lambda g: ((g * v.values).sum(axis=1, keepdims=True),
                            (g * o.values).sum(axis=0, keepdims=True)))


# --- similarity -----------------------------------------------------------

def cosine_sim(a, b):
    """Cosine of two 1D vectors; 0 with zero gradient if either norm <= eps."""
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"cosine_sim: {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a.values))
    nb = float(np.linalg.norm(b.values))
    if na <= COSINE_EPS or nb <= COSINE_EPS:
        return _emit(np.asarray(0.0), (a, b), lambda g: (None, None))
    cos = float(a.values @ b.values) / (na * nb)

    def bwd(g):
        gf = float(g)
        ga = gf * (b.values / (na * nb) - cos * a.values / (na * na))
        gb = gf * (a.values / (na * nb) - cos * b.values / (nb * nb))
        return (ga, gb)

    return _emit(np.asarray(cos), (a, b), bwd)


def cosine_map(f, r):
    """Per-position cosine between f (C,h,w) and anchors r ((C,) or (C,h,w)).

    Output (h,w). Positions where either norm <= eps yield 0 with zero
    gradient. Gradient flows into both arguments when they require it.
    """
    if f.ndim != 3:
        raise ShapeError(f"cosine_map: f must be (C,h,w), got {f.shape}")
    fv = f.values
    c, h, w = fv.shape
    rv = r.values
    if rv.shape == (c,):
        rv = np.broadcast_to(rv[:, None, None], fv.shape)
    elif rv.shape != fv.shape:
        raise ShapeError(f"cosine_map: anchor shape {r.shape} vs f {f.shape}")
    nf = np.sqrt((fv * fv).sum(axis=0))
    nr = np.sqrt((rv * rv).sum(axis=0))
    ok = (nf > COSINE_EPS) & (nr > COSINE_EPS)
    nf_s = np.where(ok, nf, 1.0)
    nr_s = np.where(ok, nr, 1.0)
    dot = (fv * rv).sum(axis=0)
    cos = np.where(ok, dot / (nf_s * nr_s), 0.0)

    def bwd(g):
        gm = np.where(ok, g, 0.0)
        gf = gm * (rv / (nf_s * nr_s) - cos * fv / (nf_s * nf_s))
        gr_full = gm * (fv / (nf_s * nr_s) - cos * rv / (nr_s * nr_s))
        if r.shape == (c,):
            gr = gr_full.sum(axis=(1, 2))
        else:
            gr = gr_full
        return (gf, gr)

    return _emit(cos, (f, r), bwd)


# --- model kernels --------------------------------------------------------

def conv2d(x, w, bias, stride=1, pad=0):
    """x: (cin,H,W) conv w: (cout,cin,kh,kw) plus bias (cout,)."""
    if x.ndim != 3 or w.ndim != 4 or x.shape[0] != w.shape[1]:
        raise ShapeError(f"conv2d: x {x.shape} vs w {w.shape}")
    h, wd = x.shape[1], x.shape[2]
    kh, kw = w.shape[2], w.shape[3]
    out = kernels.conv2d_forward(x.values, w.values, bias.values, stride, pad)

    def bwd(g):
        g = np.ascontiguousarray(g)
        gx = kernels.conv2d_grad_input(g, w.values, stride, pad, h, wd)
        gw = kernels.conv2d_grad_weight(g, x.values, stride, pad, kh, kw)
        gb = g.sum(axis=(1, 2))
        return (gx, gw, gb)

    return _emit(out, (x, w, bias), bwd)


def deconv2d(x, w, bias, stride=2):
    """Transposed conv; x: (cin,h,w), w: (cin,cout,k,k), output (cout, h*stride, w*stride).

    Kernel size must equal the stride (non-overlapping upsampling), so the
    output is exactly stride times larger.
    """
    if x.ndim != 3 or w.ndim != 4 or x.shape[0] != w.shape[0]:
        raise ShapeError(f"deconv2d: x {x.shape} vs w {w.shape}")
    k = w.shape[2]
    if k != stride or w.shape[3] != k:
        raise ShapeError(f"deconv2d: kernel {w.shape[2:]} must equal stride {stride}")
    h, wd = x.shape[1], x.shape[2]
    ho, wo = h * stride, wd * stride
    # transposed conv forward == gradient-of-input of the matching conv
    out = kernels.conv2d_grad_input(x.values, w.values, stride, 0, ho, wo)
    out = out + bias.values[:, None, None]

    def bwd(g):
        g = np.ascontiguousarray(g)
        gx = kernels.conv2d_forward(g, w.values, np.zeros(x.shape[0]), stride, 0)
        gw = kernels.conv2d_grad_weight(x.values, g, stride, 0, k, k)
        gb = g.sum(axis=(1, 2))
        return (gx, gw, gb)

    return _emit(out, (x, w, bias), bwd)


def bilinear_upsample(x, ho, wo):
    """Resize (C,h,w) or (h,w) to (C,ho,wo) / (ho,wo), align_corners=False."""
    squeeze = x.ndim == 2
    xv = x.values[None] if squeeze else x.values
    if xv.ndim != 3:
        raise ShapeError(f"bilinear_upsample: bad input shape {x.shape}")
    h, w = xv.shape[1], xv.shape[2]
    out = kernels.bilinear_forward(xv, ho, wo)

    def bwd(g):
        gg = g[None] if squeeze else g
        gx = kernels.bilinear_grad(np.ascontiguousarray(gg), h, w)
        return (gx[0] if squeeze else gx,)

    return _emit(out[0] if squeeze else out, (x,), bwd)


def group_norm(x, gamma, beta, groups, eps=1e-5):
    """GroupNorm over (C,H,W) with per-channel affine params."""
    c, h, w = x.shape
    if c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible by {groups} groups")
    gs = c // groups
    xg = x.values.reshape(groups, gs * h * w)
    mu = xg.mean(axis=1, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(c, h, w)
    out = gamma.values[:, None, None] * xhat + beta.values[:, None, None]
    n = gs * h * w

    def bwd(g):
        gxh = (g * gamma.values[:, None, None]).reshape(groups, n)
        xh = xhat.reshape(groups, n)
        # d/dx of (x - mu) * inv with mu, inv functions of the group
        s1 = gxh.sum(axis=1, keepdims=True)
        s2 = (gxh * xh).sum(axis=1, keepdims=True)
        gx = inv * (gxh - s1 / n - xh * s2 / n)
        ggamma = (g * xhat).sum(axis=(1, 2))
        gbeta = g.sum(axis=(1, 2))
        return (gx.reshape(c, h, w), ggamma, gbeta)

    return _emit(out, (x, gamma, beta), bwd)


# --- dice -----------------------------------------------------------------

def soft_dice(pred, target):
    """Negative soft dice: -(2*sum(pred*target)) / (sum(pred)+sum(target)+eps).

    Overlap is the sum of the elementwise product, set size the plain sum;
    eps keeps the empty-vs-empty case at 0.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"soft_dice: {pred.shape} vs {target.shape}")
    num = scale(tsum(multiply(pred, target)), 2.0)
    den = add(add(tsum(pred), tsum(target)), constant(DICE_EPS))
    return scale(divide(num, den), -1.0)
