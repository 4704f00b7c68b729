"""Hot numeric kernels with selectable backend.

Two interchangeable implementations exist: a numba-jitted one and a
pure-numpy fallback. Selection order:

  1. env var BOXSEG_KERNELS=numba|numpy (set before first import)
  2. numba if it imports, else numpy

`use_backend()` switches at runtime (used by tests and the benchmark).
Outputs of the two backends agree to float64 round-off, not bit-exactly;
determinism guarantees hold within a single backend.
"""

import os

from ..errors import ConfigError
from . import numpy_backend

_BACKENDS = {"numpy": numpy_backend}
try:
    from . import numba_backend

    _BACKENDS["numba"] = numba_backend
except ImportError:  # pragma: no cover - numba is a hard dep, but stay importable
    numba_backend = None

_impl = None


def available_backends():
    return sorted(_BACKENDS)


def use_backend(name):
    """Select the kernel backend by name ('numba' or 'numpy')."""
    global _impl
    if name not in _BACKENDS:
        raise ConfigError(f"unknown kernel backend {name!r}; have {available_backends()}")
    _impl = _BACKENDS[name]
    return _impl


def get_backend():
    return _impl.NAME


def _default_backend():
    env = os.environ.get("BOXSEG_KERNELS", "").strip().lower()
    if env:
        return env
    return "numba" if "numba" in _BACKENDS else "numpy"


use_backend(_default_backend())


def conv2d_forward(x, w, bias, stride, pad):
    return _impl.conv2d_forward(x, w, bias, stride, pad)


def conv2d_grad_input(g, w, stride, pad, h, wd):
    return _impl.conv2d_grad_input(g, w, stride, pad, h, wd)


def conv2d_grad_weight(g, x, stride, pad, kh, kw):
    return _impl.conv2d_grad_weight(g, x, stride, pad, kh, kw)


def bilinear_forward(x, ho, wo):
    return _impl.bilinear_forward(x, ho, wo)


def bilinear_grad(g, h, w):
    return _impl.bilinear_grad(g, h, w)
