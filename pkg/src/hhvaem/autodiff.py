"""Reverse-mode automatic differentiation over dense float64 arrays.

Values are computed eagerly when a node is built. Gradients are themselves
nodes assembled from the same primitive set, so ``grad(..., create_graph=True)``
returns a graph that can be differentiated again. This is what lets step
sizes be optimised through a leapfrog trajectory whose updates contain
gradients of the target log-density.

Example
-------
>>> x = variable(1.5)
>>> (gx,) = grad(x * x * x * x, [x], create_graph=True)
>>> (gxx,) = grad(gx, [x])
>>> float(gxx.value)
27.0
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager

import numpy as np
from scipy.special import expit

from .errors import ContractError, ShapeError

__all__ = [
    "Node",
    "constant",
    "variable",
    "detach",
    "grad",
    "evaluate",
    "no_grad",
    "add",
    "mul",
    "neg",
    "reciprocal",
    "matmul",
    "transpose",
    "sum",
    "mean",
    "broadcast_to",
    "reshape",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "softplus",
    "logsumexp",
    "square",
    "sqrt",
    "sin",
    "cos",
    "getitem",
    "scatter",
    "concat",
    "where",
]

_state = threading.local()
# Creation order; a node can only depend on nodes with a smaller number.
_seq = itertools.count()


def _recording():
    return getattr(_state, "record", True)


@contextmanager
def _record(flag):
    prev = _recording()
    _state.record = flag
    try:
        yield
    finally:
        _state.record = prev


def no_grad():
    """Context manager that disables graph recording in this thread."""
    return _record(False)


class Node:
    """A value in the expression graph.

    ``op`` names the primitive that produced it (``"leaf"`` for inputs).
    ``inputs`` is empty for leaves and for nodes built while recording is off.
    """

    __slots__ = ("value", "op", "inputs", "attrs", "requires_grad", "name", "seq")
    __array_priority__ = 1000

    def __init__(self, value, op="leaf", inputs=(), attrs=None, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.op = op
        self.inputs = tuple(inputs)
        self.attrs = attrs or {}
        self.requires_grad = requires_grad
        self.name = name
        self.seq = next(_seq)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node<{self.op}{label} shape={self.shape}>"

    def __len__(self):
        return self.shape[0]

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Node):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __rtruediv__(self, other):
        return mul(other, reciprocal(self))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, power):
        if power == 2:
            return square(self)
        if power == 0.5:
            return sqrt(self)
        if power == -1:
            return reciprocal(self)
        raise ContractError(f"unsupported power {power!r}; use 2, 0.5 or -1")

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def constant(value, name=None):
    """Leaf node that never receives gradients."""
    if isinstance(value, Node):
        return value
    return Node(value, name=name)


def variable(value, name=None):
    """Leaf node that gradients can be taken with respect to."""
    return Node(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def _as_node(x):
    return x if isinstance(x, Node) else Node(x)


_FORWARD = {}
_VJP = {}


def _apply(op, inputs, **attrs):
    value = _FORWARD[op](*[n.value for n in inputs], **attrs)
    node = Node.__new__(Node)
    node.value = value
    node.op = op
    node.attrs = attrs
    node.name = None
    node.seq = next(_seq)
    if _recording():
        node.inputs = inputs
        node.requires_grad = any(n.requires_grad for n in inputs)
    else:
        node.inputs = ()
        node.requires_grad = False
    return node


def _broadcast_check(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    shape = tuple(shape)
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and g.shape[i + lead] != 1
    )
    out = sum(g, axis=axes) if axes else g
    if out.shape != shape:
        out = reshape(out, shape)
    return out


def _keepdims_shape(shape, axis):
    if axis is None:
        return (1,) * len(shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = {a % len(shape) for a in axes}
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


# --------------------------------------------------------------------------
# Primitives
# --------------------------------------------------------------------------

def add(a, b):
    a, b = _as_node(a), _as_node(b)
    _broadcast_check("add", a, b)
    return _apply("add", (a, b))


_FORWARD["add"] = np.add
_VJP["add"] = lambda n, g, need: [
    _unbroadcast(g, n.inputs[0].shape) if need[0] else None,
    _unbroadcast(g, n.inputs[1].shape) if need[1] else None,
]


def mul(a, b):
    a, b = _as_node(a), _as_node(b)
    _broadcast_check("mul", a, b)
    return _apply("mul", (a, b))


_FORWARD["mul"] = np.multiply


def _mul_vjp(n, g, need):
    a, b = n.inputs
    ga = _unbroadcast(mul(g, b), a.shape) if need[0] else None
    gb = _unbroadcast(mul(g, a), b.shape) if need[1] else None
    return [ga, gb]


_VJP["mul"] = _mul_vjp


def neg(a):
    return _apply("neg", (_as_node(a),))


_FORWARD["neg"] = np.negative
_VJP["neg"] = lambda n, g, need: [neg(g)]


def reciprocal(a):
    return _apply("reciprocal", (_as_node(a),))


_FORWARD["reciprocal"] = lambda a: 1.0 / a
_VJP["reciprocal"] = lambda n, g, need: [neg(mul(g, square(n)))]


def matmul(a, b):
    a, b = _as_node(a), _as_node(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _apply("matmul", (a, b))


_FORWARD["matmul"] = np.matmul


def _matmul_vjp(n, g, need):
    a, b = n.inputs
    ga = matmul(g, transpose(b)) if need[0] else None
    gb = matmul(transpose(a), g) if need[1] else None
    return [ga, gb]


_VJP["matmul"] = _matmul_vjp


def transpose(a):
    a = _as_node(a)
    if a.ndim != 2:
        raise ShapeError("transpose", a.shape, detail="expected a matrix")
    return _apply("transpose", (a,))


_FORWARD["transpose"] = np.transpose
_VJP["transpose"] = lambda n, g, need: [transpose(g)]


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    a = _as_node(a)
    if isinstance(axis, list):
        axis = tuple(axis)
    return _apply("sum", (a,), axis=axis, keepdims=keepdims)


_FORWARD["sum"] = lambda a, axis, keepdims: np.sum(a, axis=axis, keepdims=keepdims)


def _sum_vjp(n, g, need):
    (a,) = n.inputs
    if not n.attrs["keepdims"]:
        g = reshape(g, _keepdims_shape(a.shape, n.attrs["axis"]))
    return [broadcast_to(g, a.shape)]


_VJP["sum"] = _sum_vjp


def mean(a, axis=None, keepdims=False):
    a = _as_node(a)
    s = sum(a, axis=axis, keepdims=keepdims)
    count = a.size // max(s.size, 1) if a.size else 1
    return mul(s, 1.0 / count)


def broadcast_to(a, shape):
    a = _as_node(a)
    shape = tuple(shape)
    try:
        np.broadcast_shapes(a.shape, shape)
    except ValueError:
        raise ShapeError("broadcast_to", a.shape, shape) from None
    if a.shape == shape:
        return a
    return _apply("broadcast_to", (a,), shape=shape)


_FORWARD["broadcast_to"] = lambda a, shape: np.broadcast_to(a, shape)
_VJP["broadcast_to"] = lambda n, g, need: [_unbroadcast(g, n.inputs[0].shape)]


def reshape(a, shape):
    a = _as_node(a)
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size and -1 not in shape:
        raise ShapeError("reshape", a.shape, shape)
    return _apply("reshape", (a,), shape=shape)


_FORWARD["reshape"] = lambda a, shape: np.reshape(a, shape)
_VJP["reshape"] = lambda n, g, need: [reshape(g, n.inputs[0].shape)]


def exp(a):
    return _apply("exp", (_as_node(a),))


_FORWARD["exp"] = np.exp
_VJP["exp"] = lambda n, g, need: [mul(g, n)]


def log(a):
    return _apply("log", (_as_node(a),))


_FORWARD["log"] = np.log
_VJP["log"] = lambda n, g, need: [mul(g, reciprocal(n.inputs[0]))]


def tanh(a):
    return _apply("tanh", (_as_node(a),))


_FORWARD["tanh"] = np.tanh
_VJP["tanh"] = lambda n, g, need: [mul(g, add(1.0, neg(square(n))))]


def sigmoid(a):
    return _apply("sigmoid", (_as_node(a),))


_FORWARD["sigmoid"] = expit
_VJP["sigmoid"] = lambda n, g, need: [mul(g, mul(n, add(1.0, neg(n))))]


def softplus(a):
    return _apply("softplus", (_as_node(a),))


_FORWARD["softplus"] = lambda a: np.logaddexp(0.0, a)
_VJP["softplus"] = lambda n, g, need: [mul(g, sigmoid(n.inputs[0]))]


def _logsumexp_fwd(a, axis, keepdims):
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    if not keepdims:
        out = np.squeeze(out, axis=axis) if axis is not None else out.reshape(())
    return out


def logsumexp(a, axis=None, keepdims=False):
    """Stable log(sum(exp(a))) along ``axis``; its gradient is the softmax."""
    return _apply("logsumexp", (_as_node(a),), axis=axis, keepdims=keepdims)


_FORWARD["logsumexp"] = _logsumexp_fwd


def _logsumexp_vjp(n, g, need):
    (a,) = n.inputs
    out = n
    if not n.attrs["keepdims"]:
        kshape = _keepdims_shape(a.shape, n.attrs["axis"])
        g = reshape(g, kshape)
        out = reshape(out, kshape)
    return [mul(broadcast_to(g, a.shape), exp(add(a, neg(out))))]


_VJP["logsumexp"] = _logsumexp_vjp


def square(a):
    return _apply("square", (_as_node(a),))


_FORWARD["square"] = np.square
_VJP["square"] = lambda n, g, need: [mul(g, mul(n.inputs[0], 2.0))]


def sqrt(a):
    return _apply("sqrt", (_as_node(a),))


_FORWARD["sqrt"] = np.sqrt
_VJP["sqrt"] = lambda n, g, need: [mul(g, mul(reciprocal(n), 0.5))]


def sin(a):
    return _apply("sin", (_as_node(a),))


_FORWARD["sin"] = np.sin
_VJP["sin"] = lambda n, g, need: [mul(g, cos(n.inputs[0]))]


def cos(a):
    return _apply("cos", (_as_node(a),))


_FORWARD["cos"] = np.cos
_VJP["cos"] = lambda n, g, need: [neg(mul(g, sin(n.inputs[0])))]


def _is_advanced(index):
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def getitem(a, index):
    return _apply("getitem", (_as_node(a),), index=index)


_FORWARD["getitem"] = lambda a, index: np.array(a[index], dtype=np.float64)
_VJP["getitem"] = lambda n, g, need: [scatter(g, n.attrs["index"], n.inputs[0].shape)]


def scatter(g, index, shape):
    """Zero array of ``shape`` with ``g`` added at ``index`` (adjoint of getitem)."""
    return _apply("scatter", (_as_node(g),), index=index, shape=tuple(shape))


def _scatter_fwd(g, index, shape):
    out = np.zeros(shape)
    if _is_advanced(index):
        np.add.at(out, index, g)
    else:
        out[index] = g
    return out


_FORWARD["scatter"] = _scatter_fwd
_VJP["scatter"] = lambda n, g, need: [getitem(g, n.attrs["index"])]


def concat(nodes, axis=-1):
    nodes = tuple(_as_node(x) for x in nodes)
    ref = nodes[0].shape
    ax = axis % len(ref)
    for other in nodes[1:]:
        if other.ndim != len(ref) or any(
            s != t for i, (s, t) in enumerate(zip(ref, other.shape)) if i != ax
        ):
            raise ShapeError("concat", ref, other.shape)
    return _apply("concat", nodes, axis=ax)


_FORWARD["concat"] = lambda *vals, axis: np.concatenate(vals, axis=axis)


def _concat_vjp(n, g, need):
    ax = n.attrs["axis"]
    out, start = [], 0
    for inp, needed in zip(n.inputs, need):
        stop = start + inp.shape[ax]
        if needed:
            index = (slice(None),) * ax + (slice(start, stop),)
            out.append(getitem(g, index))
        else:
            out.append(None)
        start = stop
    return out


_VJP["concat"] = _concat_vjp


def where(cond, a, b):
    """Elementwise select; ``cond`` is a constant boolean array."""
    a, b = _as_node(a), _as_node(b)
    cond = np.asarray(cond, dtype=bool)
    _broadcast_check("where", a, b)
    return _apply("where", (a, b), cond=cond)


_FORWARD["where"] = lambda a, b, cond: np.where(cond, a, b)


def _where_vjp(n, g, need):
    a, b = n.inputs
    cond = n.attrs["cond"]
    ga = _unbroadcast(where(cond, g, 0.0), a.shape) if need[0] else None
    gb = _unbroadcast(where(cond, 0.0, g), b.shape) if need[1] else None
    return [ga, gb]


_VJP["where"] = _where_vjp


def detach(node):
    """Same value as ``node``; gradients never flow through the result."""
    node = _as_node(node)
    out = _apply("detach", (node,))
    out.requires_grad = False
    return out


_FORWARD["detach"] = lambda a: a
_VJP["detach"] = lambda n, g, need: [None]


# --------------------------------------------------------------------------
# Graph traversal
# --------------------------------------------------------------------------

def _toposort(root, only_grad=True, min_seq=-1):
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for inp in node.inputs:
            if id(inp) not in visited and inp.seq >= min_seq and (inp.requires_grad or not only_grad):
                stack.append((inp, False))
    return order


def evaluate(root):
    """Recompute the graph under ``root`` from its current leaf values.

    Nodes are evaluated eagerly on construction, so this only matters when
    leaf values were changed in place afterwards.
    """
    for node in _toposort(root, only_grad=False):
        if node.inputs:
            node.value = _FORWARD[node.op](*[i.value for i in node.inputs], **node.attrs)
    return root.value


def grad(root, wrt, create_graph=False):
    """Gradients of scalar ``root`` with respect to each node in ``wrt``.

    Returns a list of nodes shaped like the corresponding ``wrt`` entries.
    With ``create_graph=True`` the returned nodes are differentiable.
    Nodes not reachable from ``root`` get a zero gradient.
    """
    root = _as_node(root)
    if root.size != 1:
        raise ContractError(f"grad requires a scalar root, got shape {root.shape}")
    wrt = list(wrt)
    slots = {}
    for i, w in enumerate(wrt):
        slots.setdefault(id(w), []).append(i)
    results = [None] * len(wrt)

    if root.requires_grad or id(root) in slots:
        # Nothing older than the oldest target can lie on a path to it.
        order = _toposort(root, min_seq=min(w.seq for w in wrt))
        relevant = set()
        for node in order:
            if id(node) in slots or any(id(i) in relevant for i in node.inputs):
                relevant.add(id(node))
        if id(root) in relevant:
            with _record(create_graph):
                adj = {id(root): Node(np.ones_like(root.value))}
                for node in reversed(order):
                    nid = id(node)
                    if nid not in relevant:
                        continue
                    g = adj.pop(nid, None)
                    if g is None:
                        continue
                    for i in slots.get(nid, ()):
                        results[i] = g
                    if not node.inputs:
                        continue
                    need = tuple(id(i) in relevant for i in node.inputs)
                    for inp, gi in zip(node.inputs, _VJP[node.op](node, g, need)):
                        if gi is None:
                            continue
                        prev = adj.get(id(inp))
                        adj[id(inp)] = gi if prev is None else add(prev, gi)

    for i, w in enumerate(wrt):
        if results[i] is None:
            results[i] = Node(np.zeros(np.shape(w.value)))
        elif results[i].shape != w.shape:
            results[i] = reshape(results[i], w.shape)
    return results
