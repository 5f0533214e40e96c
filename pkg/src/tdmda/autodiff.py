"""Reverse-mode automatic differentiation over dense float64 arrays.

Graphs are built define-by-run: every operation whose inputs require a
gradient records a :class:`Node` holding its parents and a closure that maps
the output gradient to input gradients.  Node ids come from a global counter,
so sorting reachable nodes by id yields a valid topological order.  That
ordered list is the :class:`Tape` that :func:`backward` walks.

Only first-order gradients are supported.  Backward closures operate on raw
numpy arrays and never record new nodes.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

PROB_FLOOR = 1e-12

_ids = itertools.count()


class Node:
    """One recorded operation (or a leaf that requires a gradient)."""

    __slots__ = ("id", "kind", "parents", "backward_fn")

    def __init__(self, kind: str, parents: tuple, backward_fn: Callable | None):
        self.id = next(_ids)
        self.kind = kind
        self.parents = parents
        self.backward_fn = backward_fn

    def __repr__(self):
        return f"Node(id={self.id}, kind={self.kind!r})"


class Tensor:
    """Dense float64 array with an optional link into the computation graph."""

    __slots__ = ("data", "requires_grad", "node", "__weakref__")

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.node = Node("leaf", (), None) if self.requires_grad else None

    @classmethod
    def _from_op(cls, data: np.ndarray, node: Node | None) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = node is not None
        t.node = node
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def values(self) -> np.ndarray:
        return self.data

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return detach(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(kind: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    if any(t.requires_grad for t in inputs):
        parents = tuple(t.node for t in inputs)
        return Tensor._from_op(data, Node(kind, parents, backward_fn))
    return Tensor._from_op(data, None)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(kind: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


def _check_axis(kind: str, t: Tensor, axis) -> None:
    if axis is None:
        return
    if not -t.ndim <= axis < t.ndim:
        raise ValueError(f"{kind}: axis {axis} out of range for shape {t.shape}")


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.data, b.data

    def backward_fn(g):
        return g @ bv.T, av.T @ g

    return _record("matmul", av @ bv, (a, b), backward_fn)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ValueError(f"transpose: expected a matrix, got shape {a.shape}")
    return _record("transpose", a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {old} to {tuple(shape)}") from None
    return _record("reshape", out, (a,), lambda g: (g.reshape(old),))


def slice_rows(a, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` along axis 0."""
    a = as_tensor(a)
    n = a.shape[0]
    if not 0 <= start <= stop <= n:
        raise ValueError(f"slice_rows: range {start}:{stop} invalid for shape {a.shape}")
    shape = a.shape

    def backward_fn(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _record("slice_rows", a.data[start:stop], (a,), backward_fn)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape

    def backward_fn(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _record("add", a.data + b.data, (a, b), backward_fn)


def subtract(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("subtract", a, b)
    sa, sb = a.shape, b.shape

    def backward_fn(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _record("subtract", a.data - b.data, (a, b), backward_fn)


def multiply(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("multiply", a, b)
    av, bv = a.data, b.data

    def backward_fn(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return _record("multiply", av * bv, (a, b), backward_fn)


def negate(a) -> Tensor:
    a = as_tensor(a)
    return _record("negate", -a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    # gradient at exactly 0 is 0
    mask = a.data > 0
    return _record("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    av = a.data
    if np.any(av <= 0):
        raise ValueError(f"log: non-positive input (min {av.min()!r}); clamp before taking log")
    return _record("log", np.log(av), (a,), lambda g: (g / av,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    av = a.data
    # split by sign so exp never overflows
    out = np.empty_like(av)
    pos = av >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-av[pos]))
    e = np.exp(av[~pos])
    out[~pos] = e / (1.0 + e)
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def square(a) -> Tensor:
    a = as_tensor(a)
    av = a.data
    return _record("square", av * av, (a,), lambda g: (2.0 * av * g,))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    _check_axis("softmax", a, axis)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record("softmax", out, (a,), backward_fn)


def sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    _check_axis("sum", a, axis)
    shape = a.shape

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward_fn)


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    _check_axis("mean", a, axis)
    shape = a.shape
    count = a.data.size if axis is None else shape[axis]

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _record("mean", np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), (a,), backward_fn)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat: no inputs")
    _check_axis("concat", tensors[0], axis)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ValueError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", out, tensors, backward_fn)


def select_positive(a, fill: float) -> Tensor:
    """Keep entries >= 0 and replace the rest with the constant ``fill``."""
    a = as_tensor(a)
    keep = a.data >= 0
    return _record(
        "select_positive", np.where(keep, a.data, float(fill)), (a,), lambda g: (g * keep,)
    )


def dropout_apply(a, mask) -> Tensor:
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != a.shape:
        raise ValueError(f"dropout_apply: mask shape {mask.shape} != input shape {a.shape}")
    return _record("dropout_apply", a.data * mask, (a,), lambda g: (g * mask,))


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _record("clip", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def grad_reverse(a, lam: float) -> Tensor:
    """Identity on values; scales the incoming gradient by ``-lam``."""
    a = as_tensor(a)
    lam = float(lam)
    if lam < 0:
        raise ValueError(f"grad_reverse: lambda must be nonnegative, got {lam}")
    return _record("grad_reverse", a.data, (a,), lambda g: (g * -lam,))


def detach(a) -> Tensor:
    """Same values, no graph, no gradient."""
    return Tensor._from_op(as_tensor(a).data, None)


OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "transpose": transpose,
    "reshape": reshape,
    "slice_rows": slice_rows,
    "add": add,
    "subtract": subtract,
    "multiply": multiply,
    "negate": negate,
    "scale": scale,
    "relu": relu,
    "exp": exp,
    "log": log,
    "sigmoid": sigmoid,
    "square": square,
    "softmax": softmax,
    "sum": sum,
    "mean": mean,
    "concat": concat,
    "select_positive": select_positive,
    "dropout_apply": dropout_apply,
    "clip": clip,
    "grad_reverse": grad_reverse,
}


def forward(kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Apply operation ``kind`` by name, e.g. ``forward("softmax", [x], axis=1)``."""
    try:
        op = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown operation kind {kind!r}") from None
    if kind == "concat":
        return op(list(inputs), **attrs)
    return op(*inputs, **attrs)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


class Tape:
    """Recorded operations reachable from a root, in topological order."""

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        if root.node is None:
            raise ValueError("root is detached from any tape")
        seen = {}
        stack = [root.node]
        while stack:
            n = stack.pop()
            if n.id in seen:
                continue
            seen[n.id] = n
            stack.extend(p for p in n.parents if p is not None and p.id not in seen)
        return cls([seen[k] for k in sorted(seen)])

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


class GradientMap(dict):
    """Node id -> gradient array, with lookup by tensor."""

    def of(self, t: Tensor) -> np.ndarray:
        if t.node is not None and t.node.id in self:
            return self[t.node.id]
        return np.zeros_like(t.data)

    def has(self, t: Tensor) -> bool:
        return t.node is not None and t.node.id in self


def backward(root: Tensor, wrt: Iterable[Tensor] | None = None) -> GradientMap:
    """Gradients of scalar ``root`` with respect to every recorded node.

    With ``wrt`` given, propagation is pruned to nodes that depend on one of
    those tensors; gradients of other leaves are then not computed.
    """
    if root.data.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.shape}")
    tape = Tape.from_root(root)

    relevant = None
    if wrt is not None:
        targets = {t.node.id for t in wrt if t.node is not None}
        relevant = set()
        for n in tape:  # ascending id: parents already classified
            if n.id in targets or any(p is not None and p.id in relevant for p in n.parents):
                relevant.add(n.id)

    grads = GradientMap()
    grads[root.node.id] = np.ones_like(root.data)
    for n in reversed(tape.nodes):
        g = grads.get(n.id)
        if g is None or n.backward_fn is None:
            continue
        if relevant is not None and n.id not in relevant:
            continue
        pgrads = n.backward_fn(g)
        for p, pg in zip(n.parents, pgrads):
            if p is None or pg is None:
                continue
            if relevant is not None and p.id not in relevant:
                continue
            prev = grads.get(p.id)
            grads[p.id] = pg if prev is None else prev + pg
    return grads
