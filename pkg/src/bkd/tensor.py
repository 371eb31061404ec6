"""Dense float64 tensors with reverse-mode differentiation.

Every operation returns a new :class:`Tensor` holding a closure that maps the
upstream gradient onto its operands. :func:`backward` walks the recorded graph
in reverse topological order and returns gradients for leaves, which may be
model parameters or network inputs alike.

Broadcasting is deliberately limited to adding a bias row ``[m]`` to a
``[n x m]`` matrix. Everything else requires exactly matching shapes.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericError(ArithmeticError):
    """A forward value became NaN or infinite."""


class ContractError(RuntimeError):
    """An operation was called outside its documented preconditions."""


_Backward = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, *, _parents: tuple = (),
                 _backward: Optional[_Backward] = None, op: str = "leaf"):
        arr = np.array(data, dtype=np.float64)
        if 0 in arr.shape:
            raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor data must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.op = op
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{rg})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(out: np.ndarray, parents: tuple, backward: _Backward, op: str) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NumericError(f"non-finite value produced by {op}")
    t = Tensor.__new__(Tensor)
    t.data = out
    t.requires_grad = any(p.requires_grad for p in parents)
    t.grad = None
    t.op = op
    t._parents = parents if t.requires_grad else ()
    t._backward = backward if t.requires_grad else None
    return t


def _check_finite(*ts: Tensor) -> None:
    for t in ts:
        if not np.all(np.isfinite(t.data)):
            raise NumericError(f"non-finite input of shape {t.shape}")


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused affine map ``x @ w.T + b`` with ``w`` stored ``[out x in]``."""
    if (x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1
            or x.shape[1] != w.shape[1] or b.shape[0] != w.shape[0]):
        raise DimensionError(f"linear: input {x.shape}, weight {w.shape}, bias {b.shape}")
    xd, wd = x.data, w.data
    return _make(xd @ wd.T + b.data, (x, w, b),
                 lambda g: (g @ wd, g.T @ xd, g.sum(axis=0)), "linear")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum. ``b`` may also be a bias row ``[m]`` for ``a`` of shape ``[n x m]``."""
    if a.shape == b.shape:
        return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        return _make(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)), "add_bias")
    raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not match")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} do not match")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not match")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError("log of a non-positive value")
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def sum(a: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    shape = a.shape
    if axis is None:
        return _make(np.asarray(a.data.sum()), (a,),
                     lambda g: (np.broadcast_to(g, shape).copy(),), "sum")
    if not -a.data.ndim <= axis < a.data.ndim:
        raise DimensionError(f"sum: axis {axis} out of range for {shape}")
    return _make(a.data.sum(axis=axis), (a,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),), "sum")


def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got {a.shape}")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.data.size:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}")
    old = a.shape
    return _make(a.data.reshape(shape).copy(), (a,), lambda g: (g.reshape(old),), "reshape")


def gather_rows(a: Tensor, index) -> Tensor:
    """Rows ``a[index]`` for a matrix ``a``; repeated indices accumulate gradient."""
    idx = np.asarray(index, dtype=np.int64)
    if a.data.ndim != 2 or idx.ndim != 1:
        raise DimensionError(f"gather_rows: need matrix and 1-d index, got {a.shape}, {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise DimensionError(f"gather_rows: index out of range for {a.shape[0]} rows")
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), backward, "gather_rows")


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    _check_finite(logits)
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make(p, (logits,), backward, "softmax")


def monomials(x: Tensor, degree: int) -> Tensor:
    """Feature expansion ``[1, u, u^2, ..., u^degree]`` of a column ``[n x 1]``."""
    if x.data.ndim != 2 or x.shape[1] != 1:
        raise DimensionError(f"monomials expects a column [n x 1], got {x.shape}")
    if degree < 0:
        raise ContractError("degree must be nonnegative")
    u = x.data
    powers = np.arange(degree + 1)
    out = u ** powers
    # d/du u^k = k u^(k-1); the k=0 column has zero derivative
    deriv = np.zeros_like(out)
    if degree >= 1:
        deriv[:, 1:] = powers[1:] * out[:, :-1]
    return _make(out, (x,), lambda g: ((g * deriv).sum(axis=1, keepdims=True),), "monomials")


def affine_smooth(p: Tensor, eps: float) -> Tensor:
    """Map probability rows to ``(1 - c*eps) p + eps``; rows still sum to one."""
    c = p.shape[-1]
    k = 1.0 - c * eps
    return _make(p.data * k + eps, (p,), lambda g: (g * k,), "smooth")


# ---------------------------------------------------------------------------
# reverse pass


class GradRecord:
    """Topologically ordered operations reachable from a scalar loss.

    ``ops`` lists every recorded node (leaves first) and ``grads`` maps
    ``id(leaf)`` to the accumulated gradient of the loss for each leaf that
    requires grad. Ordering depends only on operand order, so identical
    forward passes produce identical accumulation sequences.
    """

    def __init__(self, loss: Tensor):
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        self.loss = loss
        self.ops: list[Tensor] = _topo_order(loss)
        self.grads: dict[int, Tensor] = {}
        self._run()

    def _run(self) -> None:
        acc: dict[int, np.ndarray] = {id(self.loss): np.ones_like(self.loss.data)}
        for node in reversed(self.ops):
            g = acc.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                    self.grads[id(node)] = Tensor(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                acc[key] = pg if key not in acc else acc[key] + pg


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, wrt: Optional[Iterable[Tensor]] = None) -> dict[int, Tensor]:
    """Gradients of a scalar ``loss`` keyed by ``id(leaf)``.

    When ``wrt`` is given, every listed leaf gets an entry, zero-filled if the
    loss does not depend on it.
    """
    grads = GradRecord(loss).grads
    if wrt is not None:
        for leaf in wrt:
            grads.setdefault(id(leaf), Tensor(np.zeros(leaf.shape)))
    return grads


def grad(loss: Tensor, leaves: Sequence[Tensor]) -> list[np.ndarray]:
    """Convenience: gradient arrays for ``leaves`` in order."""
    g = backward(loss, wrt=leaves)
    return [g[id(leaf)].data for leaf in leaves]
