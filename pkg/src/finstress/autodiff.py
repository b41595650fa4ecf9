"""Reverse-mode automatic differentiation on a dynamically recorded graph.

Each :class:`Node` holds a float64 array value (0-d for scalars), the tag of
the primitive that produced it, and a list of ``(parent, vjp)`` pairs where
``vjp`` maps the node's adjoint to the parent's contribution. The graph is
rebuilt on every forward pass; :func:`backward` walks it in reverse
topological order.

Example::

    x = Node(3.0)
    y = x * x
    grads = backward(y, [x])
    grads[x]  # array(6.)
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import gammaln

from .errors import NumericError

_ids = itertools.count()


class DomainError(NumericError):
    """A primitive was evaluated outside its domain."""


def _check_finite(value: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise NumericError(f"{op}: non-finite value produced")
    return value


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Node:
    __slots__ = ("value", "op", "parents", "uid", "__weakref__")
    __array_priority__ = 100

    def __init__(self, value, op: str = "leaf", parents: Sequence[tuple["Node", Callable]] = ()):
        self.value = _check_finite(np.asarray(value, dtype=np.float64), op)
        self.op = op
        self.parents = tuple(parents)
        self.uid = next(_ids)

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x, "const")


# elementwise primitives ------------------------------------------------------


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    return Node(
        a.value + b.value,
        "add",
        [(a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(g, b.shape))],
    )


def subtract(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    return Node(
        a.value - b.value,
        "subtract",
        [(a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(-g, b.shape))],
    )


def multiply(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    return Node(
        av * bv,
        "multiply",
        [(a, lambda g: _unbroadcast(g * bv, a.shape)), (b, lambda g: _unbroadcast(g * av, b.shape))],
    )


def divide(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    if np.any(bv == 0):
        raise DomainError("divide: zero divisor")
    out = av / bv
    return Node(
        out,
        "divide",
        [(a, lambda g: _unbroadcast(g / bv, a.shape)), (b, lambda g: _unbroadcast(-g * out / bv, b.shape))],
    )


def negate(a) -> Node:
    a = as_node(a)
    return Node(-a.value, "negate", [(a, lambda g: -g)])


def exp(a) -> Node:
    a = as_node(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    return Node(out, "exp", [(a, lambda g: g * out)])


def log(a) -> Node:
    a = as_node(a)
    if np.any(a.value <= 0):
        raise DomainError("log: argument must be positive")
    av = a.value
    return Node(np.log(av), "log", [(a, lambda g: g / av)])


def tanh(a) -> Node:
    a = as_node(a)
    out = np.tanh(a.value)
    return Node(out, "tanh", [(a, lambda g: g * (1.0 - out * out))])


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Node:
    a = as_node(a)
    out = _sigmoid(a.value)
    return Node(out, "sigmoid", [(a, lambda g: g * out * (1.0 - out))])


def softplus(a) -> Node:
    a = as_node(a)
    av = a.value
    return Node(np.logaddexp(0.0, av), "softplus", [(a, lambda g: g * _sigmoid(av))])


def square(a) -> Node:
    a = as_node(a)
    av = a.value
    return Node(av * av, "square", [(a, lambda g: 2.0 * g * av)])


def lgamma(a) -> Node:
    a = as_node(a)
    if np.any(a.value <= 0):
        raise DomainError("lgamma: argument must be positive")
    av = a.value
    return Node(gammaln(av), "lgamma", [(a, lambda g: g * digamma(av))])


# Bernoulli-number coefficients of the digamma asymptotic series in 1/x^2
_DIGAMMA_SERIES = (
    -1.0 / 12,
    1.0 / 120,
    -1.0 / 252,
    1.0 / 240,
    -1.0 / 132,
    691.0 / 32760,
    -1.0 / 12,
)


def digamma(x):
    """Digamma for positive arguments (recurrence up to x >= 6, then asymptotic series)."""
    x = np.array(x, dtype=np.float64, copy=True)
    if np.any(x <= 0):
        raise DomainError("digamma: argument must be positive")
    acc = np.zeros_like(x)
    small = x < 6.0
    while np.any(small):
        acc = np.where(small, acc - 1.0 / np.where(small, x, 1.0), acc)
        x = np.where(small, x + 1.0, x)
        small = x < 6.0
    inv2 = 1.0 / (x * x)
    series = np.zeros_like(x)
    for coef in reversed(_DIGAMMA_SERIES):
        series = (series + coef) * inv2
    out = acc + np.log(x) - 0.5 / x + series
    return out if out.ndim else float(out)


# structural primitives -------------------------------------------------------


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2:
        raise ValueError("matmul supports 2-d operands only")
    return Node(av @ bv, "matmul", [(a, lambda g: g @ bv.T), (b, lambda g: av.T @ g)])


def transpose(a) -> Node:
    a = as_node(a)
    return Node(a.value.T, "transpose", [(a, lambda g: g.T)])


def reduce_sum(a, axis=None) -> Node:
    a = as_node(a)
    shape = a.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return Node(a.value.sum(axis=axis), "sum", [(a, vjp)])


def mean(a, axis=None) -> Node:
    a = as_node(a)
    n = a.value.size if axis is None else a.shape[axis]
    return reduce_sum(a, axis) * (1.0 / n)


def getitem(a, idx) -> Node:
    a = as_node(a)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return out

    return Node(a.value[idx], "getitem", [(a, vjp)])


def reshape(a, shape) -> Node:
    a = as_node(a)
    old = a.shape
    return Node(a.value.reshape(shape), "reshape", [(a, lambda g: g.reshape(old))])


def concat(nodes: Sequence, axis: int = -1) -> Node:
    nodes = [as_node(n) for n in nodes]
    sizes = [n.shape[axis] for n in nodes]
    bounds = np.cumsum([0] + sizes)
    parents = []
    for n, lo, hi in zip(nodes, bounds[:-1], bounds[1:]):
        sl = [slice(None)] * n.value.ndim
        sl[axis] = slice(lo, hi)
        parents.append((n, lambda g, sl=tuple(sl): g[sl]))
    return Node(np.concatenate([n.value for n in nodes], axis=axis), "concat", parents)


def stack(nodes: Sequence, axis: int = 0) -> Node:
    nodes = [as_node(n) for n in nodes]
    parents = [(n, lambda g, i=i: np.take(g, i, axis=axis)) for i, n in enumerate(nodes)]
    return Node(np.stack([n.value for n in nodes], axis=axis), "stack", parents)


# reverse pass ----------------------------------------------------------------


class GradientMap:
    """Adjoints keyed by node; requested nodes missing from the graph read as zeros."""

    def __init__(self, adjoints: dict[int, np.ndarray], nodes: dict[int, Node]):
        self._adj = adjoints
        self._nodes = nodes

    def __getitem__(self, node: Node) -> np.ndarray:
        if node.uid in self._adj:
            return self._adj[node.uid]
        return np.zeros(node.shape)

    def __contains__(self, node: Node) -> bool:
        return node.uid in self._adj

    def __len__(self):
        return len(self._adj)


def _topological_order(output: Node) -> list[Node]:
    order: list[Node] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack_: list[tuple[Node, Iterable]] = [(output, iter(output.parents))]
    state[output.uid] = 1
    while stack_:
        node, it = stack_[-1]
        for parent, _ in it:
            s = state.get(parent.uid)
            if s == 1:
                raise ValueError(f"cycle detected at node {parent!r}")
            if s is None:
                state[parent.uid] = 1
                stack_.append((parent, iter(parent.parents)))
                break
        else:
            stack_.pop()
            state[node.uid] = 2
            order.append(node)
    return order


def backward(output: Node, inputs: Sequence[Node] | None = None) -> GradientMap:
    """Adjoints of scalar ``output`` with respect to every node in its graph.

    If ``inputs`` is given, those nodes are guaranteed an entry (zeros when
    ``output`` does not depend on them).
    """
    if output.value.size != 1:
        raise ValueError("backward needs a scalar output")
    order = _topological_order(output)
    adj: dict[int, np.ndarray] = {output.uid: np.ones(output.shape)}
    for node in reversed(order):
        g = adj.get(node.uid)
        if g is None:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            if parent.uid in adj:
                adj[parent.uid] = adj[parent.uid] + contrib
            else:
                adj[parent.uid] = np.asarray(contrib, dtype=np.float64)
    nodes = {n.uid: n for n in order}
    for n in inputs or ():
        if n.uid not in adj:
            adj[n.uid] = np.zeros(n.shape)
            nodes[n.uid] = n
    return GradientMap(adj, nodes)


def grad(fn: Callable[..., Node], *args) -> list[np.ndarray]:
    """Gradient of scalar ``fn(*nodes)`` with respect to each positional argument."""
    leaves = [Node(a) for a in args]
    out = fn(*leaves)
    gm = backward(out, leaves)
    return [gm[leaf] for leaf in leaves]


def finite_diff_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a real array."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=np.float64, copy=True)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g
