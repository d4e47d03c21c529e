"""Dense-matrix computation graph with reverse-mode differentiation.

Every value is a 2-D float64 numpy array. Operations return :class:`Node`
objects that remember their inputs and a closure mapping the output adjoint
to the input adjoints; :func:`backward` sweeps the graph in reverse
topological order and returns the gradients of all named parameter leaves.

A graph belongs to the thread that built it. Parameters enter a graph as
fresh leaf nodes wrapping the (read-only) parameter arrays, so several
graphs can be built and differentiated concurrently against the same
parameters.
"""
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from gallat.errors import ContractError, DimensionError

Matrix = np.ndarray
Backward = Callable[[Matrix], Sequence[Optional[Matrix]]]

DEFAULT_LEAKY_SLOPE = 0.2


def as_matrix(value: Union[Matrix, Sequence, float]) -> Matrix:
    """Coerce ``value`` to a 2-D float64 array (scalars become 1x1, vectors a row)."""
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(1, -1)
    if arr.ndim != 2:
        raise DimensionError("as_matrix", arr.shape)
    return arr


class Node:
    """One vertex of the computation graph."""

    __slots__ = ("op", "inputs", "value", "grad", "name", "_backward")

    def __init__(
        self,
        value: Matrix,
        op: str = "leaf",
        inputs: Tuple["Node", ...] = (),
        backward: Optional[Backward] = None,
        name: Optional[str] = None,
    ):
        self.value = value
        self.op = op
        self.inputs = inputs
        self.grad: Optional[Matrix] = None
        self.name = name
        self._backward = backward

    @classmethod
    def constant(cls, value) -> "Node":
        return cls(as_matrix(value), op="const")

    @classmethod
    def parameter(cls, name: str, value: Matrix) -> "Node":
        return cls(as_matrix(value), op="param", name=name)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.value.shape

    @property
    def requires_grad(self) -> bool:
        return self.op == "param" or self._backward is not None

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise ContractError(f"item() on non-scalar node of shape {self.value.shape}")
        return float(self.value[0, 0])

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Node({self.op}{label}, shape={self.value.shape})"


NodeLike = Union[Node, Matrix, float]


def as_node(x: NodeLike) -> Node:
    return x if isinstance(x, Node) else Node.constant(x)


def _unbroadcast(grad: Matrix, shape: Tuple[int, int]) -> Matrix:
    """Sum ``grad`` over the axes along which an operand of ``shape`` was broadcast."""
    if grad.shape == shape:
        return grad
    for axis in (0, 1):
        if shape[axis] == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Node, b: Node) -> Tuple[int, int]:
    out = []
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise DimensionError(op, a.shape, b.shape)
        out.append(max(da, db))
    return out[0], out[1]


def matmul(a: NodeLike, b: NodeLike) -> Node:
    a, b = as_node(a), as_node(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError("matmul", a.shape, b.shape)
    av, bv = a.value, b.value

    def backward(g: Matrix):
        return g @ bv.T, av.T @ g

    return Node(av @ bv, "matmul", (a, b), backward)


def transpose(x: NodeLike) -> Node:
    x = as_node(x)
    return Node(x.value.T.copy(), "transpose", (x,), lambda g: (g.T,))


def add(a: NodeLike, b: NodeLike) -> Node:
    """Element-wise sum; a row or column vector broadcasts against a matrix."""
    a, b = as_node(a), as_node(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape

    def backward(g: Matrix):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Node(a.value + b.value, "add", (a, b), backward)


def mul(a: NodeLike, b: NodeLike) -> Node:
    """Element-wise (Hadamard) product with the same broadcasting rule as :func:`add`."""
    a, b = as_node(a), as_node(b)
    _check_broadcast("mul", a, b)
    av, bv = a.value, b.value

    def backward(g: Matrix):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return Node(av * bv, "mul", (a, b), backward)


def scale(x: NodeLike, factor: float) -> Node:
    x = as_node(x)
    factor = float(factor)
    return Node(x.value * factor, "scalar-mul", (x,), lambda g: (g * factor,))


def concat_cols(parts: Sequence[NodeLike]) -> Node:
    parts = [as_node(p) for p in parts]
    if not parts:
        raise ContractError("concat_cols needs at least one input")
    rows = parts[0].shape[0]
    for p in parts[1:]:
        if p.shape[0] != rows:
            raise DimensionError("concat_cols", parts[0].shape, p.shape)
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g: Matrix):
        return [g[:, bounds[k]:bounds[k + 1]] for k in range(len(parts))]

    return Node(np.concatenate([p.value for p in parts], axis=1), "concat-cols", tuple(parts), backward)


def slice_rows(x: NodeLike, start: int, stop: int) -> Node:
    x = as_node(x)
    if not 0 <= start <= stop <= x.shape[0]:
        raise ContractError(f"slice_rows [{start}:{stop}] out of range for shape {x.shape}")
    shape = x.shape

    def backward(g: Matrix):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return Node(x.value[start:stop].copy(), "slice", (x,), backward)


def slice_cols(x: NodeLike, start: int, stop: int) -> Node:
    x = as_node(x)
    if not 0 <= start <= stop <= x.shape[1]:
        raise ContractError(f"slice_cols [{start}:{stop}] out of range for shape {x.shape}")
    shape = x.shape

    def backward(g: Matrix):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return Node(x.value[:, start:stop].copy(), "slice", (x,), backward)


def gather_rows(x: NodeLike, index: Sequence[int]) -> Node:
    """Select rows by index (repeats allowed); the adjoint scatters back additively."""
    x = as_node(x)
    idx = np.asarray(index, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ContractError(f"gather_rows index out of range for {x.shape[0]} rows")
    shape = x.shape

    def backward(g: Matrix):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return Node(x.value[idx], "slice", (x,), backward)


def leaky_relu(x: NodeLike, slope: float = DEFAULT_LEAKY_SLOPE) -> Node:
    x = as_node(x)
    factor = np.where(x.value > 0, 1.0, slope)
    return Node(x.value * factor, "leaky-relu", (x,), lambda g: (g * factor,))


def sigmoid(x: NodeLike) -> Node:
    x = as_node(x)
    out = np.empty_like(x.value)
    pos = x.value >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.value[pos]))
    ez = np.exp(x.value[~pos])
    out[~pos] = ez / (1.0 + ez)
    return Node(out, "sigmoid", (x,), lambda g: (g * out * (1.0 - out),))


def softmax_rows(values: Matrix, mask: Optional[Matrix] = None) -> Matrix:
    """Row-wise softmax on raw arrays, with per-row max subtraction.

    Entries where ``mask`` is false get probability zero; a row whose mask is
    empty comes out as an all-zero row.
    """
    if mask is None:
        shifted = values - values.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)
    mask = np.asarray(mask, dtype=bool)
    row_max = np.max(values, axis=1, keepdims=True, where=mask, initial=-np.inf)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.where(mask, np.exp(np.where(mask, values - row_max, 0.0)), 0.0)
    denom = e.sum(axis=1, keepdims=True)
    return e / np.where(denom > 0, denom, 1.0)


def row_softmax(x: NodeLike, mask: Optional[Matrix] = None) -> Node:
    x = as_node(x)
    if mask is not None and np.shape(mask) != x.shape:
        raise DimensionError("row_softmax", x.shape, np.shape(mask))
    y = softmax_rows(x.value, mask)

    def backward(g: Matrix):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return Node(y, "row-softmax", (x,), backward)


def smooth_l1(pred: NodeLike, target: NodeLike) -> Node:
    """Mean over elements of 0.5*e^2 where |e| < 1, else |e| - 0.5."""
    pred, target = as_node(pred), as_node(target)
    if pred.shape != target.shape:
        raise DimensionError("smooth_l1", pred.shape, target.shape)
    e = pred.value - target.value
    abs_e = np.abs(e)
    quad = abs_e < 1.0
    count = e.size
    loss = np.where(quad, 0.5 * e * e, abs_e - 0.5).sum() / count
    slope = np.where(quad, e, np.sign(e)) / count

    def backward(g: Matrix):
        d = slope * g[0, 0]
        return d, -d

    return Node(np.array([[loss]]), "smooth-l1", (pred, target), backward)


def total(x: NodeLike) -> Node:
    x = as_node(x)
    shape = x.shape
    return Node(np.array([[x.value.sum()]]), "sum", (x,), lambda g: (np.full(shape, g[0, 0]),))


def _topological_order(root: Node) -> List[Node]:
    order: List[Node] = []
    seen = set()
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
        for parent in node.inputs:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def backward(root: Node, parameters: Optional[Dict[str, Matrix]] = None) -> Dict[str, Matrix]:
    """Back-propagate from a scalar ``root``; return gradients keyed by parameter name.

    Leaves that share a name (one parameter used in several places) have their
    gradients summed. Every entry of ``parameters`` missing from the graph gets
    an all-zero gradient of its own shape.
    """
    if root.shape != (1, 1):
        raise ContractError(f"backward requires a scalar root, got shape {root.shape}")
    order = _topological_order(root)
    for node in order:
        node.grad = None
    root.grad = np.ones((1, 1))
    grads: Dict[str, Matrix] = {}
    for node in reversed(order):
        g = node.grad
        if g is None:
            continue
        if node.op == "param":
            grads[node.name] = grads[node.name] + g if node.name in grads else g.copy()
            continue
        if node._backward is None:
            continue
        for parent, pg in zip(node.inputs, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            parent.grad = pg if parent.grad is None else parent.grad + pg
    if parameters is not None:
        for name, value in parameters.items():
            if name not in grads:
                grads[name] = np.zeros_like(value)
    return grads


def numerical_gradient(fn: Callable[[], float], array: Matrix, h: float = 1e-6) -> Matrix:
    """Central finite differences of ``fn()`` with respect to ``array`` (perturbed in place)."""
    grad = np.zeros_like(array)
    for idx in np.ndindex(*array.shape):
        original = array[idx]
        array[idx] = original + h
        plus = fn()
        array[idx] = original - h
        minus = fn()
        array[idx] = original
        grad[idx] = (plus - minus) / (2.0 * h)
    return grad


def relative_error(analytic: Matrix, numeric: Matrix, floor: float = 1e-8) -> float:
    """Max element-wise relative error, with ``floor`` guarding near-zero denominators."""
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0
