import numpy as np
import pytest

from boxseg import tensor as T


def numeric_grad(fn, x, h=1e-3):
    """Central-difference gradient of scalar fn(array) at x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        xp = x.copy()
        xp[idx] += h
        xm = x.copy()
        xm[idx] -= h
        g[idx] = (fn(xp) - fn(xm)) / (2.0 * h)
    return g


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-10)
    return float(np.linalg.norm(a - b) / denom)


def analytic_grad(build, x):
    """Gradient of build(tensor) w.r.t. x through the tape."""
    with T.Tape() as tape:
        xt = T.parameter(np.asarray(x, dtype=np.float64).copy())
        loss = build(xt)
        tape.backward(loss)
    return np.zeros_like(xt.values) if xt.grad is None else xt.grad


def check_grad(build, x, tol=1e-4, h=1e-3):
    """Assert the tape gradient matches central differences."""
    got = analytic_grad(build, x)

    def forward(arr):
        with T.Tape():
            return build(T.parameter(arr)).item()

    want = numeric_grad(forward, x, h=h)
    err = rel_err(got, want)
    assert err <= tol, f"gradient mismatch: rel err {err:.3g}"
    return err


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(12345))
