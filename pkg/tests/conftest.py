import numpy as np
import pytest

from bkd import tensor as tn
from bkd.tensor import Tensor


def central_diff(f, arrays, h=1e-6):
    """Central finite differences of scalar ``f(*arrays)`` w.r.t. each array."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            up = f(*arrays)
            a[i] = old - h
            down = f(*arrays)
            a[i] = old
            g[i] = (up - down) / (2 * h)
        out.append(g)
    return out


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


def check_grad(build, arrays, tol=1e-4, h=1e-6):
    """Compare autograd against finite differences for ``sum(build(*leaves) * R)``."""
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*leaves)
    weights = np.random.default_rng(len(out.data.ravel())).normal(size=out.shape)
    loss = tn.sum(tn.mul(out, Tensor(weights))) if out.data.ndim else out
    analytic = tn.grad(loss, leaves)

    def f(*xs):
        o = build(*[Tensor(x) for x in xs]).data
        return float(np.sum(o * weights)) if o.ndim else float(o)

    numeric = central_diff(f, [a.copy() for a in arrays], h)
    errs = [rel_err(a, n) for a, n in zip(analytic, numeric)]
    assert max(errs) < tol, errs
    return max(errs)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
