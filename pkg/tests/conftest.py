import numpy as np
import pytest

from kwt.tensor import Tensor


def finite_difference_grad(f, x, h=1e-5):
    """Central finite differences of a scalar function of one array."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def check_gradient(op, x0, h=1e-5, rtol=1e-4):
    """Compare the analytic gradient of sum(op(x)) against finite differences."""
    x0 = np.asarray(x0, dtype=np.float64)

    def scalar(arr):
        return float(op(Tensor(arr.copy())).sum().data)

    t = Tensor(x0.copy(), requires_grad=True)
    out = op(t).sum()
    out.backward()
    numeric = finite_difference_grad(scalar, x0, h=h)
    scale = max(np.abs(numeric).max(), np.abs(t.grad).max(), 1e-8)
    err = np.abs(t.grad - numeric).max() / scale
    assert err < rtol, f"gradient mismatch: max rel err {err:.3e}"
    return err


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
