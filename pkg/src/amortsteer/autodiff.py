"""Small reverse-mode differentiation engine over float64 numpy arrays.

Only the operations needed by the alignment loss, the toy generator and the
hypernetwork are provided. Broadcasting is restricted to scalar-vs-tensor;
anything else has to be spelled out with :func:`tile_rows`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Node",
    "SortResult",
    "ShapeError",
    "as_node",
    "constant",
    "leaf",
    "matmul",
    "elementwise",
    "add",
    "sub",
    "mul",
    "neg",
    "abs",
    "pow",
    "sqrt",
    "relu",
    "tanh",
    "scale",
    "reduce",
    "sum",
    "mean",
    "tile_rows",
    "concat",
    "take",
    "transpose",
    "layer_norm",
    "sort_ascending",
    "sort_columns",
    "backward",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Node:
    """A value in the differentiation graph.

    ``grad`` is allocated lazily; reading it before any gradient has reached
    the node yields zeros of the value's shape.
    """

    __slots__ = ("value", "_grad", "parents", "_backward", "requires_grad", "op")
    __array_ufunc__ = None  # make ``ndarray <op> Node`` defer to Node's reflected operators

    def __init__(
        self,
        value,
        parents: tuple["Node", ...] = (),
        backward_fn: Callable[[np.ndarray], None] | None = None,
        requires_grad: bool = False,
        op: str = "leaf",
    ):
        self.value = np.asarray(value, dtype=np.float64)
        self._grad: np.ndarray | None = None
        self.parents = parents
        self._backward = backward_fn
        self.requires_grad = requires_grad
        self.op = op

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def zero_grad(self) -> None:
        self._grad = None

    def detach(self) -> np.ndarray:
        """Copy of the value, disconnected from the graph."""
        return self.value.copy()

    def _accumulate(self, g: np.ndarray) -> None:
        if self._grad is None:
            self._grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self._grad += g

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Node(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, p):
        return pow(self, p)

    def __getitem__(self, idx):
        return take(self, idx)

    @property
    def T(self):
        return transpose(self)


@dataclass(frozen=True)
class SortResult:
    sorted_values: Node
    permutation: np.ndarray  # source index of each sorted position (per column for 2-D)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def constant(x) -> Node:
    return Node(x)


def leaf(x) -> Node:
    """A trainable leaf: gradients accumulate into it on ``backward``."""
    return Node(np.array(x, dtype=np.float64, copy=True), requires_grad=True)


def _make(value, parents: tuple[Node, ...], backward_fn, op: str) -> Node:
    rg = any(p.requires_grad for p in parents)
    return Node(value, parents, backward_fn if rg else None, rg, op)


def _check_binary(a: Node, b: Node, op: str) -> None:
    if a.shape == b.shape or a.value.ndim == 0 or b.value.ndim == 0:
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unscalar(g: np.ndarray, node: Node) -> np.ndarray:
    if node.value.ndim == 0 and g.ndim > 0:
        return np.asarray(g.sum())
    return g


# ---------------------------------------------------------------- binary ops


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_binary(a, b, "add")

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unscalar(g, a))
        if b.requires_grad:
            b._accumulate(_unscalar(g, b))

    return _make(a.value + b.value, (a, b), bw, "add")


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_binary(a, b, "sub")

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unscalar(g, a))
        if b.requires_grad:
            b._accumulate(_unscalar(-g, b))

    return _make(a.value - b.value, (a, b), bw, "sub")


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_binary(a, b, "mul")

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unscalar(g * b.value, a))
        if b.requires_grad:
            b._accumulate(_unscalar(g * a.value, b))

    return _make(a.value * b.value, (a, b), bw, "mul")


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ b.value.T)
        if b.requires_grad:
            b._accumulate(a.value.T @ g)

    return _make(a.value @ b.value, (a, b), bw, "matmul")


# ----------------------------------------------------------------- unary ops


def neg(a) -> Node:
    return scale(a, -1.0)


def scale(a, c: float) -> Node:
    a = as_node(a)
    c = float(c)

    def bw(g):
        a._accumulate(g * c)

    return _make(a.value * c, (a,), bw, "scale")


def abs(a) -> Node:  # noqa: A001 - mirrors numpy naming
    a = as_node(a)
    # np.sign(0) == 0 gives the symmetric subgradient
    sign = np.sign(a.value)

    def bw(g):
        a._accumulate(g * sign)

    return _make(np.abs(a.value), (a,), bw, "abs")


def pow(a, p: float) -> Node:  # noqa: A001
    a = as_node(a)
    p = float(p)
    if p == 1.0:
        return a

    def bw(g):
        a._accumulate(g * p * a.value ** (p - 1.0))

    return _make(a.value**p, (a,), bw, f"pow({p})")


def sqrt(a, eps: float = 1e-12) -> Node:
    """Square root whose derivative uses ``max(a, eps)`` under the root."""
    a = as_node(a)
    out = np.sqrt(a.value)

    def bw(g):
        a._accumulate(g * 0.5 / np.sqrt(np.maximum(a.value, eps)))

    return _make(out, (a,), bw, "sqrt")


def relu(a) -> Node:
    a = as_node(a)
    mask = a.value > 0

    def bw(g):
        a._accumulate(g * mask)

    return _make(np.where(mask, a.value, 0.0), (a,), bw, "relu")


def tanh(a) -> Node:
    a = as_node(a)
    out = np.tanh(a.value)

    def bw(g):
        a._accumulate(g * (1.0 - out * out))

    return _make(out, (a,), bw, "tanh")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "abs": abs,
    "relu": relu,
    "tanh": tanh,
}


def elementwise(op: str, a, b=None, *, p: float | None = None, c: float | None = None) -> Node:
    """Dispatch by name: add, sub, mul, abs, relu, tanh, pow (needs ``p``), scale (needs ``c``)."""
    if op == "pow":
        if p is None:
            raise ValueError("pow needs an exponent p")
        return pow(a, p)
    if op == "scale":
        if c is None:
            raise ValueError("scale needs a factor c")
        return scale(a, c)
    fn = _ELEMENTWISE.get(op)
    if fn is None:
        raise ValueError(f"unknown elementwise op {op!r}")
    if op in ("add", "sub", "mul"):
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return fn(a, b)
    return fn(a)


# ---------------------------------------------------------------- reductions


def sum(a, axis: int | None = None) -> Node:  # noqa: A001
    a = as_node(a)
    out = a.value.sum(axis=axis)

    def bw(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape))
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.shape))

    return _make(out, (a,), bw, "sum")


def mean(a, axis: int | None = None) -> Node:
    a = as_node(a)
    n = a.value.size if axis is None else a.shape[axis]
    if n == 0:
        raise ValueError("mean of an empty tensor")
    return scale(sum(a, axis), 1.0 / n)


def reduce(op: str, a) -> Node:
    if op == "sum":
        return sum(a)
    if op == "mean":
        return mean(a)
    raise ValueError(f"unknown reduction {op!r}")


# ------------------------------------------------------------ shape plumbing


def tile_rows(v, n: int) -> Node:
    """Stack a 1-D node ``n`` times into an ``n x d`` matrix."""
    v = as_node(v)
    if v.value.ndim != 1:
        raise ShapeError(f"tile_rows expects a vector, got {v.shape}")

    def bw(g):
        v._accumulate(g.sum(axis=0))

    return _make(np.broadcast_to(v.value, (n, v.shape[0])).copy(), (v,), bw, "tile_rows")


def concat(nodes: Sequence, axis: int = 0) -> Node:
    nodes = [as_node(x) for x in nodes]
    sizes = [x.shape[axis] for x in nodes]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for x, lo, hi in zip(nodes, bounds[:-1], bounds[1:]):
            if x.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                x._accumulate(g[tuple(sl)])

    return _make(np.concatenate([x.value for x in nodes], axis=axis), tuple(nodes), bw, "concat")


def take(a, idx) -> Node:
    """Numpy-style indexing; repeated indices accumulate in backward."""
    a = as_node(a)
    out = a.value[idx]

    def bw(g):
        full = np.zeros_like(a.value)
        np.add.at(full, idx, g)
        a._accumulate(full)

    return _make(np.array(out, copy=True), (a,), bw, "take")


def transpose(a) -> Node:
    a = as_node(a)

    def bw(g):
        a._accumulate(g.T)

    return _make(a.value.T.copy(), (a,), bw, "transpose")


def layer_norm(a, eps: float = 1e-5) -> Node:
    """Per-row standardization over the feature axis (no gain/shift)."""
    a = as_node(a)
    if a.value.ndim != 2:
        raise ShapeError(f"layer_norm expects a matrix, got {a.shape}")
    mu = a.value.mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(a.value.var(axis=1, keepdims=True) + eps)
    xhat = (a.value - mu) * inv

    def bw(g):
        gm = g.mean(axis=1, keepdims=True)
        gx = (g * xhat).mean(axis=1, keepdims=True)
        a._accumulate(inv * (g - gm - xhat * gx))

    return _make(xhat, (a,), bw, "layer_norm")


# --------------------------------------------------------------------- sort


def _check_finite_for_sort(v: np.ndarray) -> None:
    if np.isnan(v).any():
        raise ValueError("cannot sort values containing NaN")


def sort_ascending(a) -> SortResult:
    """Stable ascending sort of a vector; gradient of position i goes to ``permutation[i]``."""
    a = as_node(a)
    if a.value.ndim != 1:
        raise ShapeError(f"sort_ascending expects a vector, got {a.shape}")
    _check_finite_for_sort(a.value)
    perm = np.argsort(a.value, kind="stable")

    def bw(g):
        full = np.empty_like(g)
        full[perm] = g
        a._accumulate(full)

    return SortResult(_make(a.value[perm], (a,), bw, "sort"), perm)


def sort_columns(a) -> SortResult:
    """Stable ascending sort of every column of a matrix independently."""
    a = as_node(a)
    if a.value.ndim != 2:
        raise ShapeError(f"sort_columns expects a matrix, got {a.shape}")
    _check_finite_for_sort(a.value)
    perm = np.argsort(a.value, axis=0, kind="stable")

    def bw(g):
        full = np.empty_like(g)
        np.put_along_axis(full, perm, g, axis=0)
        a._accumulate(full)

    return SortResult(_make(np.take_along_axis(a.value, perm, axis=0), (a,), bw, "sort_columns"), perm)


# ----------------------------------------------------------------- backward


def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node) -> None:
    """Accumulate d(loss)/d(leaf) into every trainable leaf reachable from ``loss``.

    Interior gradients are reset on every call, so repeated calls add up only
    at the leaves.
    """
    if loss.value.size != 1 or loss.value.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    for node in order:
        if not node.is_leaf:
            node._grad = None
    loss._accumulate(np.ones(()))
    for node in reversed(order):
        if node._backward is not None and node._grad is not None:
            node._backward(node._grad)

