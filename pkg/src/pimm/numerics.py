"""A small reverse-mode autodiff engine over dense float64 numpy arrays.

Every value lives in a :class:`Graph`. Leaves are created with
:meth:`Graph.param` (trainable, gradient wanted) or :meth:`Graph.constant`;
everything else comes out of a primitive::

    g = Graph()
    w = g.param(np.ones((3, 1)), name="w")
    x = g.constant(np.arange(6.0).reshape(2, 3))
    loss = mean(sigmoid(matmul(x, w)))
    grads = backward(loss)          # {node id: gradient array}
    grads[w.id]

Nodes are registered in creation order, which is already a topological
order, so backward only has to walk the node list in reverse.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, NumericError, ShapeError, ValidationError

BCE_EPS = 1e-7

PRIMITIVES = (
    "matmul", "add", "mul", "concat", "relu", "sigmoid", "softmax", "scale",
    "stop_gradient", "bce", "mean", "row_sum", "columns", "gather",
)


def as_array(data) -> np.ndarray:
    """Coerce to a float64 array and reject NaN/Inf."""
    arr = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericError("non-finite value in array")
    return arr


class Node:
    """One vertex of a computation graph.

    ``value`` is the forward result, ``grad`` the accumulated derivative of
    the last loss passed to :func:`backward` (zeros until then).
    """

    __slots__ = ("graph", "id", "op", "inputs", "value", "grad", "name", "_backward")

    def __init__(self, graph, op, inputs, value, name=None):
        self.graph = graph
        self.op = op
        self.inputs = tuple(inputs)
        self.value = value
        self.grad = None
        self.name = name
        self._backward = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node({self.id}, {self.op}{label}, shape={self.value.shape})"


class Graph:
    """Registry of nodes for one forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}

    def _register(self, node: Node) -> Node:
        node.id = len(self.nodes)
        self.nodes.append(node)
        return node

    def constant(self, value, name=None) -> Node:
        return self._register(Node(self, "const", (), as_array(value), name))

    def param(self, value, name=None) -> Node:
        node = self._register(Node(self, "param", (), as_array(value), name))
        if name is not None:
            self.params[name] = node
        return node


def _graph_of(nodes) -> Graph:
    graph = nodes[0].graph
    for n in nodes[1:]:
        if n.graph is not graph:
            raise ContractError("inputs belong to different graphs")
    return graph


def _emit(op, inputs, value, backward_fn) -> Node:
    if not np.all(np.isfinite(value)):
        raise NumericError(f"{op}: non-finite forward value")
    graph = _graph_of(inputs)
    node = graph._register(Node(graph, op, inputs, value))
    node._backward = backward_fn
    return node


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` back down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op, a: Node, b: Node):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


# -- primitives ---------------------------------------------------------------

def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    out = a.value @ b.value

    def back(g):
        return g @ b.value.T, a.value.T @ g

    return _emit("matmul", (a, b), out, back)


def add(a: Node, b: Node) -> Node:
    _check_broadcast("add", a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", (a, b), a.value + b.value, back)


def mul(a: Node, b: Node) -> Node:
    """Elementwise product with numpy broadcasting."""
    _check_broadcast("mul", a, b)

    def back(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _emit("mul", (a, b), a.value * b.value, back)


def concat(nodes, axis=1) -> Node:
    nodes = tuple(nodes)
    try:
        out = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError:
        shapes = [n.shape for n in nodes]
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    bounds = np.cumsum([n.shape[axis] for n in nodes])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", nodes, out, back)


def relu(a: Node) -> Node:
    mask = a.value > 0

    def back(g):
        return (g * mask,)

    return _emit("relu", (a,), np.where(mask, a.value, 0.0), back)


def _logistic(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Node) -> Node:
    out = _logistic(a.value)

    def back(g):
        return (g * out * (1.0 - out),)

    return _emit("sigmoid", (a,), out, back)


def softmax(a: Node) -> Node:
    """Softmax along the last axis."""
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", (a,), out, back)


def scale(a: Node, factor: float) -> Node:
    factor = float(factor)

    def back(g):
        return (g * factor,)

    return _emit("scale", (a,), a.value * factor, back)


def stop_gradient(a: Node) -> Node:
    """Identity forward; contributes nothing to ``a`` on the way back."""

    def back(g):
        return (None,)

    return _emit("stop_gradient", (a,), a.value, back)


def bce(pred: Node, labels) -> Node:
    """Elementwise binary cross-entropy with predictions clamped to [eps, 1-eps]."""
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != pred.shape:
        raise ShapeError(f"bce: prediction shape {pred.shape} vs label shape {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("bce: labels must be 0 or 1")
    p = np.clip(pred.value, BCE_EPS, 1.0 - BCE_EPS)
    inside = (pred.value >= BCE_EPS) & (pred.value <= 1.0 - BCE_EPS)
    out = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))

    def back(g):
        return (g * inside * (p - y) / (p * (1.0 - p)),)

    return _emit("bce", (pred,), out, back)


def mean(a: Node) -> Node:
    n = a.value.size

    def back(g):
        return (np.full(a.shape, g / n),)

    return _emit("mean", (a,), np.asarray(a.value.mean()), back)


def row_sum(a: Node) -> Node:
    """Sum over the last axis, keeping it as width 1."""

    def back(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit("row_sum", (a,), a.value.sum(axis=-1, keepdims=True), back)


def columns(a: Node, start: int, stop: int) -> Node:
    """Column slice ``a[:, start:stop]``."""
    if a.value.ndim != 2 or not 0 <= start < stop <= a.shape[1]:
        raise ShapeError(f"columns: bad slice [{start}:{stop}] of shape {a.shape}")

    def back(g):
        full = np.zeros(a.shape)
        full[:, start:stop] = g
        return (full,)

    return _emit("columns", (a,), a.value[:, start:stop].copy(), back)


def gather(table: Node, index) -> Node:
    """Row lookup ``table[index]``; repeated indices accumulate gradient."""
    index = np.asarray(index, dtype=np.int64)
    if table.value.ndim != 2 or index.ndim != 1:
        raise ShapeError(f"gather: table {table.shape} with index shape {index.shape}")
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise ShapeError(f"gather: index out of range for table with {table.shape[0]} rows")

    def back(g):
        full = np.zeros(table.shape)
        np.add.at(full, index, g)
        return (full,)

    return _emit("gather", (table,), table.value[index], back)


def bce_loss(pred: Node, labels) -> Node:
    """Mean binary cross-entropy over the batch."""
    return mean(bce(pred, labels))


_DISPATCH = {
    "matmul": matmul, "add": add, "mul": mul, "concat": concat, "relu": relu,
    "sigmoid": sigmoid, "softmax": softmax, "scale": scale,
    "stop_gradient": stop_gradient, "bce": bce, "mean": mean,
    "row_sum": row_sum, "columns": columns, "gather": gather,
}


def apply_primitive(op: str, inputs, *args, **kwargs) -> Node:
    """Apply primitive ``op`` by tag, e.g. ``apply_primitive("add", [a, b])``.

    Non-node arguments (scale factor, labels, slice bounds, ...) follow the
    input list positionally.
    """
    try:
        fn = _DISPATCH[op]
    except KeyError:
        raise ContractError(f"unknown primitive {op!r}") from None
    inputs = list(inputs)
    if op == "concat":
        return fn(inputs, *args, **kwargs)
    return fn(*inputs, *args, **kwargs)


def backward(loss: Node) -> dict[int, np.ndarray]:
    """Accumulate d(loss)/d(node) into every node of ``loss.graph``.

    Nodes the loss does not depend on end up with an all-zero gradient.
    Returns a map from node id to gradient array.
    """
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = loss.graph
    for n in graph.nodes:
        n.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(graph.nodes[: loss.id + 1]):
        if node._backward is None or node.grad is None:
            continue
        for parent, g in zip(node.inputs, node._backward(node.grad)):
            if g is None:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g
    for n in graph.nodes:
        if n.grad is None:
            n.grad = np.zeros_like(n.value)
        elif not n.inputs and not np.all(np.isfinite(n.grad)):
            # non-finite values propagate, so checking the leaves is enough
            raise NumericError(f"non-finite gradient at node {n.id} ({n.op})")
    return {n.id: n.grad for n in graph.nodes}


def param_grads(graph: Graph) -> dict[str, np.ndarray]:
    """Gradients of named parameters after :func:`backward`."""
    return {name: node.grad for name, node in graph.params.items()}


def numeric_gradient(f, x: np.ndarray, step=1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x`` (``x`` is restored)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + step
        hi = f()
        x[i] = orig - step
        lo = f()
        x[i] = orig
        grad[i] = (hi - lo) / (2 * step)
    return grad


def relative_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-8)
    return float(np.abs(a - b).max(initial=0.0) / denom)

