"""Dense-matrix reverse-mode automatic differentiation.

Every value is a 2-D ``numpy`` array wrapped in a :class:`Tensor`; scalars are
1x1 matrices. Operations record their parents and a local vector-Jacobian
product, and :meth:`Tensor.backward` replays them in reverse topological order.

The primitive set is deliberately small: it is exactly what the embedding
network, prototype classification and the random-walk losses need.
"""

from __future__ import annotations

from collections import Counter
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DegenerateError, DimensionError, NumericError

__all__ = [
    "Tensor",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "exp",
    "log",
    "square",
    "relu",
    "reduce_sum",
    "mean",
    "softmax_rows",
    "pairwise_sq_dist",
    "diag",
    "take_rows",
    "clamp_min",
    "gradient",
]


class Tensor:
    """A node in the computation graph holding a 2-D array."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        arr = np.asarray(data)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"tensors are 2-D, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar root, got shape {self.shape}")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if not np.all(np.isfinite(pg)):
                    raise NumericError(f"non-finite gradient flowing out of node '{node.op}'")
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg


def _topological_order(root: Tensor) -> list[Tensor]:
    # iterative post-order DFS; each node appended exactly once
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if like is not None and arr.dtype.kind != "f":
        arr = arr.astype(like.dtype)
    elif like is not None and np.ndim(x) == 0:
        arr = arr.astype(like.dtype)
    return Tensor(arr)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], vjp, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite value produced by node '{op}'")
    out = Tensor(data, op=op)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}")


def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                 "mul")


def div(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise NumericError("division by zero in node 'div'")
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
                 "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def transpose(a: Tensor) -> Tensor:
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    if np.any(ad <= 0):
        raise NumericError("log of a non-positive value in node 'log'")
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")


def relu(a: Tensor) -> Tensor:
    ad = a.data
    on = ad > 0
    return _make(np.where(on, ad, 0.0).astype(ad.dtype), (a,), lambda g: (g * on,), "relu")


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    """Sum over rows (axis=0), columns (axis=1) or everything; keeps 2-D shape."""
    shape = a.shape
    if axis is None:
        out = a.data.sum().reshape(1, 1)
    else:
        out = a.data.sum(axis=axis, keepdims=True)
    return _make(out, (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(reduce_sum(a, axis), 1.0 / n)


def softmax_rows(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax; ``mask`` marks entries excluded from the support.

    Excluded entries get probability exactly zero. The per-row maximum over
    the admissible entries is subtracted before exponentiation.
    """
    x = a.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise DimensionError(f"softmax_rows: mask {mask.shape} vs input {x.shape}")
        if np.any(mask.all(axis=1)):
            row = int(np.flatnonzero(mask.all(axis=1))[0])
            raise DegenerateError(f"softmax_rows: row {row} is fully masked")
        shifted = np.where(mask, -np.inf, x)
    else:
        shifted = x
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _make(out, (a,), vjp, "softmax_rows")


def pairwise_sq_dist(x: Tensor, y: Tensor) -> Tensor:
    """``out[i, j] = sum_k (x[i, k] - y[j, k])**2``.

    Computed from explicit differences so the diagonal of ``D(X, X)`` is an
    exact zero and the result is exactly symmetric.
    """
    x, y = as_tensor(x), as_tensor(y)
    if x.shape[1] != y.shape[1]:
        raise DimensionError(f"pairwise_sq_dist: feature dims {x.shape[1]} != {y.shape[1]}")
    if x.shape[1] < 1:
        raise DimensionError("pairwise_sq_dist: feature dimension must be >= 1")
    xd, yd = x.data, y.data
    diff = xd[:, None, :] - yd[None, :, :]
    out = np.einsum("ijk,ijk->ij", diff, diff)

    def vjp(g):
        gx = 2.0 * (xd * g.sum(axis=1, keepdims=True) - g @ yd)
        gy = 2.0 * (yd * g.sum(axis=0)[:, None] - g.T @ xd)
        return gx, gy

    return _make(out, (x, y), vjp, "pairwise_sq_dist")


def diag(a: Tensor) -> Tensor:
    """Diagonal of a square matrix as a 1 x n row."""
    n, m = a.shape
    if n != m:
        raise DimensionError(f"diag: matrix is not square {a.shape}")
    idx = np.arange(n)

    def vjp(g):
        out = np.zeros((n, n), dtype=g.dtype)
        out[idx, idx] = g[0]
        return (out,)

    return _make(a.data[idx, idx].reshape(1, n).copy(), (a,), vjp, "diag")


def take_rows(a: Tensor, idx) -> Tensor:
    """Rows ``a[idx]`` (gather); the gradient scatters back with accumulation."""
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    n = a.shape[0]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise DimensionError(f"take_rows: index out of range for {n} rows")
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx].reshape(idx.size, shape[1]), (a,), vjp, "take_rows")


def clamp_min(a: Tensor, floor: float, counter: Counter | None = None, tag: str = "clamp") -> Tensor:
    """``max(a, floor)``; clamped entries pass no gradient and are tallied in ``counter[tag]``."""
    ad = a.data
    low = ad < floor
    n_low = int(low.sum())
    if n_low and counter is not None:
        counter[tag] += n_low
    out = np.where(low, floor, ad).astype(ad.dtype)
    return _make(out, (a,), lambda g: (np.where(low, 0.0, g).astype(g.dtype),), "clamp_min")


def gradient(fn: Callable[..., Tensor], params: Iterable[np.ndarray]) -> tuple[float, list[np.ndarray]]:
    """Evaluate ``fn(*param_tensors)`` and return ``(value, [d value / d param])``.

    ``fn`` must return a 1x1 tensor. Parameters that do not influence the
    output get zero gradients.
    """
    leaves = [Tensor(np.asarray(p), requires_grad=True) for p in params]
    out = fn(*leaves)
    if not isinstance(out, Tensor) or out.data.size != 1:
        shape = getattr(out, "shape", type(out).__name__)
        raise ContractError(f"gradient: objective must be scalar, got {shape}")
    out.backward()
    grads = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]
    return out.item(), grads
