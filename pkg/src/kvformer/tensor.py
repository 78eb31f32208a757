"""Dense tensors with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor`. When any input requires a gradient
and recording is enabled, the output keeps references to its parents and a
closure computing the parents' gradient contributions. ``Tensor.backward``
orders the recorded graph topologically (the tape) and runs the closures
once, accumulating into leaf ``.grad`` arrays by addition.

Arrays default to float32. Ops preserve the dtype of their inputs, so
casting the leaves to float64 runs the whole graph in double precision,
which is what the finite-difference checks use.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from .exceptions import GraphError, NonFiniteError, ShapeError

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        arr = np.array(data, dtype=dtype)
        if any(s <= 0 for s in arr.shape):
            raise ShapeError(f"tensor dimensions must be positive, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._consumed = False
        self.op = "leaf"

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._consumed = False
        out.op = op
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        out._consumed = False
        out.op = "leaf"
        return out

    # -- backward ------------------------------------------------------

    def backward(self):
        """Backpropagate from this scalar through the recorded graph.

        Leaf gradients accumulate; call ``zero_grad`` between steps. A graph
        can be walked once: its closures are dropped afterwards.
        """
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise GraphError("backward() already ran on this graph; rebuild it with a new forward pass")
        if not self.requires_grad:
            raise GraphError("loss does not depend on any tensor that requires grad")

        tape = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(tape):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            contributions = node._backward(g)
            for parent, pg in zip(node._parents, contributions):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in tape:
            if not node.is_leaf:
                node._backward = None
                node._parents = ()
                node._consumed = True

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / other)
        raise TypeError("only division by a scalar is supported")

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _topological_order(root: Tensor) -> list:
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


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad=False, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, requires_grad=False, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# elementwise / broadcasting


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(a.data * b.data, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return Tensor._from_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, a.dtype.type(0))
    return Tensor._from_op(out, (a,), lambda g: (np.where(out > 0, g, 0).astype(g.dtype, copy=False),), "relu")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return Tensor._from_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} into {shape}") from None
    return Tensor._from_op(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._from_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swap_last(a: Tensor) -> Tensor:
    """Swap the two trailing axes (matrix transpose over a batch)."""
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    return Tensor._from_op(np.asarray(out, dtype=a.dtype), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if np.isscalar(axis) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``[..., p, q] @ [..., q, r]`` with broadcast batch dims."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch dimensions do not broadcast: {a.shape} @ {b.shape}") from None

    # [..., p, q] @ [q, r]: fold the batch into one GEMM
    flat = b.ndim == 2 and a.ndim > 2

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            if flat:
                ga = (g.reshape(-1, g.shape[-1]) @ b.data.T).reshape(a.shape)
            else:
                ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if flat:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    if flat:
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
    else:
        out = a.data @ b.data
    return Tensor._from_op(out, (a, b), backward, "matmul")


def softmax_lastdim(x: Tensor) -> Tensor:
    """Row-wise softmax over the last axis.

    The row max is subtracted before exponentiation, so large logits never
    overflow and ``-inf`` entries map to exactly 0. A row that is entirely
    ``-inf`` has no valid distribution and raises.
    """
    if x.shape[-1] < 1:
        raise ShapeError("softmax over an empty axis")
    row_max = x.data.max(axis=-1, keepdims=True)
    if np.any(np.isneginf(row_max)):
        raise NonFiniteError("softmax row is entirely -inf")
    e = np.exp(x.data - row_max)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op(y, (x,), backward, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each slice along the last axis, then apply ``gamma``/``beta``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} must be ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = gg = gb = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = rstd * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gb

    return Tensor._from_op(out, (x, gamma, beta), backward, "layer_norm")


def gather_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: ``table[V, d]`` indexed by integer ``ids`` of any shape."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError(f"ids must be integers, got {ids.dtype}")
    V = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise IndexError(f"ids must lie in [0, {V}); got range [{ids.min()}, {ids.max()}]")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return Tensor._from_op(table.data[ids], (table,), backward, "gather_rows")


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true; masked entries get no gradient."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    out = np.where(mask, x.dtype.type(value), x.data)
    return Tensor._from_op(out, (x,), lambda g: (np.where(mask, 0, g).astype(g.dtype),), "masked_fill")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    if not training or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return Tensor._from_op(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------------------
# gradient oracle


def finite_diff_grad(f: Callable[[], object], theta: Tensor, epsilon: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of the scalar ``f()`` with respect to ``theta``.

    ``theta.data`` is perturbed in place one coordinate at a time and
    restored afterwards. ``f`` takes no arguments and must read ``theta``.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must lie in [1e-6, 1e-3], got {epsilon}")

    def evaluate():
        with no_grad():
            v = f()
        v = float(v.item() if isinstance(v, Tensor) else v)
        if not np.isfinite(v):
            raise NonFiniteError("objective returned a non-finite value during finite differencing")
        return v

    flat = theta.data.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        fp = evaluate()
        flat[i] = orig - epsilon
        fm = evaluate()
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * epsilon)
    return grad.reshape(theta.shape)
