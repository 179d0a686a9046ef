"""Small reverse-mode autodiff engine over float64 numpy arrays, plus Adam.

Graphs are built eagerly: every operation computes its value immediately and
records its parents, so the forward pass *is* graph construction.  Calling
:func:`backward` on a scalar node walks the recorded graph once in reverse
topological order and accumulates gradients into every node.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""

    def __init__(self, op: str, left: tuple, right: tuple):
        self.op = op
        self.left = tuple(left)
        self.right = tuple(right)
        super().__init__(f"{op}: incompatible shapes {self.left} and {self.right}")


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"non-finite gradient for parameter {name!r}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A node in the computation graph.

    ``value`` is the forward result, ``grad`` is filled in by :func:`backward`.
    Leaves created by the user carry ``op == "leaf"``.
    """

    __slots__ = ("value", "grad", "requires_grad", "op", "parents", "_backward")

    def __init__(self, value, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), backward_fn: Callable | None = None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self.parents = parents
        self._backward = backward_fn

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def square(self):
        return square(self)

    def sum(self, axis: int | None = None):
        return tsum(self, axis)

    def mean(self, axis: int | None = None):
        return mean(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, op: str, parents: tuple, backward_fn: Callable) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        # constant subgraph: keep no history
        return Tensor(value, op=op)
    return Tensor(value, requires_grad=True, op=op, parents=parents,
                  backward_fn=backward_fn)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.value + b.value, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.value - b.value, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        return (_unbroadcast(g * b.value, a.shape),
                _unbroadcast(g * a.value, b.shape))

    return _node(a.value * b.value, "mul", (a, b), bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def bw(g):
        return g @ b.value.T, a.value.T @ g

    return _node(a.value @ b.value, "matmul", (a, b), bw)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0

    def bw(g):
        return (g * mask,)

    # np.maximum propagates NaN so corrupted inputs are not silently masked
    return _node(np.maximum(a.value, 0.0), "relu", (a,), bw)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    e = np.exp(-np.abs(a.value))
    big, small = 1.0 / (1.0 + e), e / (1.0 + e)
    pos = a.value >= 0
    out = np.where(pos, big, small)
    # 1 - out from the other branch, avoiding cancellation when saturated
    rest = np.where(pos, small, big)

    def bw(g):
        return (g * out * rest,)

    return _node(out, "sigmoid", (a,), bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)

    def bw(g):
        return (g * out,)

    return _node(out, "exp", (a,), bw)


def expm1(a) -> Tensor:
    """exp(a) - 1 without cancellation near zero."""
    a = as_tensor(a)
    out = np.expm1(a.value)

    def bw(g):
        return (g * (out + 1.0),)

    return _node(out, "expm1", (a,), bw)


def log(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        return (g / a.value,)

    return _node(np.log(a.value), "log", (a,), bw)


def square(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        return (2.0 * g * a.value,)

    return _node(a.value * a.value, "square", (a,), bw)


def tsum(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(a.value.sum(axis=axis), "sum", (a,), bw)


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _node(a.value.mean(axis=axis), "mean", (a,), bw)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient passes only where the input is inside."""
    a = as_tensor(a)
    inside = (a.value >= lo) & (a.value <= hi)

    def bw(g):
        return (g * inside,)

    return _node(np.clip(a.value, lo, hi), "clip", (a,), bw)


def columns(a, start: int, stop: int) -> Tensor:
    """Slice columns ``start:stop`` of a 2-D tensor."""
    a = as_tensor(a)
    if a.value.ndim != 2 or not 0 <= start <= stop <= a.shape[1]:
        raise ShapeError("columns", a.shape, (start, stop))

    def bw(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        full[:, start:stop] = g
        return (full,)

    return _node(a.value[:, start:stop], "columns", (a,), bw)


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` with parents before children."""
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Accumulate d(root)/d(node) into every node's ``grad``.

    Returns a map from each leaf requiring grad (or each of ``params`` if
    given) to its gradient.  Parameters the root does not depend on get zeros.
    """
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    order = topological_order(root) if root.requires_grad else [root]
    for node in order:
        node.grad = None
    root.grad = np.ones(root.shape, dtype=DTYPE)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        for parent, g in zip(node.parents, node._backward(node.grad)):
            if not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.array(g, dtype=DTYPE)
            else:
                parent.grad = parent.grad + g
    if params is None:
        params = [n for n in order if n.op == "leaf" and n.requires_grad]
    out = {}
    for p in params:
        in_graph = p.grad is not None and any(n is p for n in order)
        out[p] = p.grad if in_graph else np.zeros(p.shape, dtype=DTYPE)
    return out


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=(fan_in, fan_out))


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState) -> tuple[Mapping[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError("adam_step", params[name].shape, g.shape)
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    return params, state


def numeric_gradient(f: Callable[[], float], arrays: Sequence[np.ndarray],
                     h: float = 1e-5) -> list[np.ndarray]:
    """Central finite differences of ``f`` with respect to each array, in place.

    ``f`` must read the arrays it is differentiated against; each entry is
    perturbed by ``±h`` and restored.
    """
    grads = []
    for arr in arrays:
        g = np.zeros(arr.shape, dtype=np.result_type(arr.dtype, np.float64))
        flat = arr.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = f()
            flat[i] = old - h
            down = f()
            flat[i] = old
            g.flat[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads
