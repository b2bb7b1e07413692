"""Reverse-mode automatic differentiation over dense float64 arrays.

Each primitive computes its value with numpy and, when any input requires
gradients, records a node holding its parents and an adjoint rule.  Calling
``backward`` on a scalar walks those nodes in reverse topological order.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op

    # -- basics -----------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a single value")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accum(self, delta: np.ndarray):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(delta, dtype=np.float64, copy=True)
        else:
            self.grad += delta

    # -- arithmetic -------------------------------------------------------

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

    def tanh(self):
        return tanh(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def __getitem__(self, idx):
        return gather(self, idx)

    # -- reverse pass -----------------------------------------------------

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: Sequence[Tensor], op: str, rule) -> Tensor:
    """Wrap a forward value; attach ``rule(g)`` only if some parent needs grads."""
    if any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True, _parents=tuple(parents), op=op)
        out._backward = rule
        return out
    return Tensor(data, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# binary primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def rule(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), "add", rule)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def rule(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(-g, b.shape))

    return _node(a.data - b.data, (a, b), "sub", rule)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def rule(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), "mul", rule)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def rule(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    return _node(a.data @ b.data, (a, b), "matmul", rule)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: no inputs")
    ndim = tensors[0].ndim
    ax = axis % ndim if ndim else 0
    for t in tensors:
        if t.ndim != ndim or any(t.shape[d] != tensors[0].shape[d] for d in range(ndim) if d != ax):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def rule(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * ndim
                sl[ax] = slice(lo, hi)
                t._accum(g[tuple(sl)])

    return _node(np.concatenate([t.data for t in tensors], axis=ax), tensors, "concat", rule)


# ---------------------------------------------------------------------------
# indexing


def _scatter_rows(index: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    """out[k] = sum of values[i] over i with index[i] == k."""
    if values.ndim == 1:
        return np.bincount(index, weights=values, minlength=n).astype(np.float64)
    m = index.shape[0]
    if m == 0:
        return np.zeros((n,) + values.shape[1:])
    flat = values.reshape(m, -1)
    op = sp.csr_matrix((np.ones(m), (index, np.arange(m))), shape=(n, m))
    return np.asarray(op @ flat).reshape((n,) + values.shape[1:])


def gather(x, index) -> Tensor:
    """Row gather ``x[index]`` along the first axis."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if x.ndim == 0:
        raise ShapeError("gather: cannot index a scalar")
    if index.size and (index.min() < -x.shape[0] or index.max() >= x.shape[0]):
        raise ShapeError(f"gather: index out of range for first axis of {x.shape}")
    flat = index.reshape(-1) % x.shape[0] if index.size else index.reshape(-1)

    def rule(g):
        g2 = g.reshape((flat.shape[0],) + x.shape[1:])
        x._accum(_scatter_rows(flat, g2, x.shape[0]))

    return _node(x.data[index], (x,), "gather", rule)


def segment_sum(x, index, num_segments: int) -> Tensor:
    """Scatter-add rows of ``x`` into ``num_segments`` buckets given by ``index``."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 1 or x.ndim == 0 or index.shape[0] != x.shape[0]:
        raise ShapeError(f"segment_sum: index shape {index.shape} does not match data {x.shape}")
    if index.size and (index.min() < 0 or index.max() >= num_segments):
        raise ShapeError(f"segment_sum: index out of range [0, {num_segments})")

    def rule(g):
        x._accum(g[index])

    return _node(_scatter_rows(index, x.data, num_segments), (x,), "segment_sum", rule)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None

    def rule(g):
        x._accum(g.reshape(x.shape))

    return _node(out, (x,), "reshape", rule)


# ---------------------------------------------------------------------------
# elementwise


def relu(x) -> Tensor:
    x = as_tensor(x)
    # subgradient at 0 is 0
    on = x.data > 0

    def rule(g):
        x._accum(g * on)

    return _node(np.where(on, x.data, 0.0), (x,), "relu", rule)


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _stable_sigmoid(x.data)

    def rule(g):
        x._accum(g * s * (1.0 - s))

    return _node(s, (x,), "sigmoid", rule)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)

    def rule(g):
        x._accum(g * (1.0 - t * t))

    return _node(t, (x,), "tanh", rule)


def exp(x) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.data)

    def rule(g):
        x._accum(g * e)

    return _node(e, (x,), "exp", rule)


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise FloatingPointError("log: non-positive input")

    def rule(g):
        x._accum(g / x.data)

    return _node(np.log(x.data), (x,), "log", rule)


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp into [lo, hi]; the gradient is zero where clamping is active."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)

    def rule(g):
        x._accum(g * inside)

    return _node(np.clip(x.data, lo, hi), (x,), "clip", rule)


# ---------------------------------------------------------------------------
# reductions


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accum(np.broadcast_to(g, x.shape))

    return _node(out, (x,), "sum", rule)


def softmax(x) -> Tensor:
    """Softmax over the last axis."""
    x = as_tensor(x)
    if x.ndim == 0:
        raise ShapeError("softmax: needs at least one axis")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        x._accum(s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return _node(s, (x,), "softmax", rule)


def logsumexp(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0:
        raise ShapeError("logsumexp: needs at least one axis")
    if x.shape[axis] == 0:
        raise ShapeError("logsumexp: empty axis")
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    tot = e.sum(axis=axis, keepdims=True)
    out = np.log(tot) + m
    w = e / tot

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        x._accum(g * w)

    return _node(out if keepdims else np.squeeze(out, axis=axis), (x,), "logsumexp", rule)


def log_softmax(x) -> Tensor:
    return sub(x, logsumexp(x, axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# reverse pass


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor that requires grads."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological(loss)
    loss._accum(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def grad(loss: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` w.r.t. ``params`` (zeros where unused); resets their grads first."""
    params = list(params)
    for p in params:
        p.grad = None
    backward(loss)
    return [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]
