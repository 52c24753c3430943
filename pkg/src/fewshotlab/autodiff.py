"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is a tape of operation records linked from each result tensor.
A record is consumed by the backward pass that visits it; reusing a
consumed record (calling backward twice over the same forward pass) is
an error. Broadcasting is deliberately narrow: a leading batch dimension
or a scalar operand, nothing else.

Tensors and the graphs they form are confined to a single thread;
independent graphs on independent threads do not share state.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_solve
from scipy.linalg.lapack import dpotrf


class ShapeMismatchError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class GraphReuseError(RuntimeError):
    """A backward pass touched an operation record that was already consumed."""


class NotPositiveDefiniteError(ArithmeticError):
    """Cholesky factorization failed; `pivot` is the 1-based failing minor."""

    def __init__(self, pivot: int):
        super().__init__(f"matrix is not positive definite (leading minor {pivot})")
        self.pivot = pivot


class _Record:
    """One executed operation: parent tensors and the local backward rule."""

    __slots__ = ("parents", "backward_fn", "consumed")

    def __init__(self, parents, backward_fn):
        self.parents = parents
        self.backward_fn = backward_fn
        self.consumed = False


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor data must be finite (NaN/Inf rejected)")
    return arr


class Tensor:
    """n-dimensional float64 array, optionally recording gradients."""

    __slots__ = ("data", "grad", "requires_grad", "_record")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._record: _Record | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor({self.data!r}, requires_grad={self.requires_grad})"

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return mul(self, _wrap(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self) -> "Tensor":
        return relu(self)

    def square(self) -> "Tensor":
        return square(self)

    def sqrt(self) -> "Tensor":
        return sqrt(self)

    def sum(self, axis=None) -> "Tensor":
        return reduce_sum(self, axis)

    def mean(self, axis=None) -> "Tensor":
        return reduce_mean(self, axis)

    # -- backward ------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode pass from this scalar; frees the tape afterwards."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        order = _toposort(self)
        for t in order:
            if t._record.consumed:
                raise GraphReuseError(
                    "graph already consumed by a previous backward pass"
                )
        pending: dict[int, tuple[Tensor, np.ndarray]] = {
            id(self): (self, np.ones_like(self.data))
        }
        for t in reversed(order):
            entry = pending.pop(id(t), None)
            if entry is None:
                continue
            grad = entry[1]
            if t.requires_grad:
                t.grad = grad if t.grad is None else t.grad + grad
            rec = t._record
            for parent, pgrad in zip(rec.parents, rec.backward_fn(grad)):
                if pgrad is None:
                    continue
                if not (parent.requires_grad or parent._record is not None):
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = (parent, pending[key][1] + pgrad)
                else:
                    pending[key] = (parent, pgrad)
            rec.consumed = True
            rec.backward_fn = None
        # whatever is left are leaves
        for t, grad in pending.values():
            if t.requires_grad:
                t.grad = grad if t.grad is None else t.grad + grad


def _wrap(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _toposort(root: Tensor) -> list[Tensor]:
    """Tensors with records, parents before children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            order.append(tensor)
            continue
        if id(tensor) in seen or tensor._record is None:
            continue
        seen.add(id(tensor))
        stack.append((tensor, True))
        for parent in tensor._record.parents:
            stack.append((parent, False))
    return order


def _make(data: np.ndarray, parents, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._record = None
    out.requires_grad = any(
        p.requires_grad or p._record is not None for p in parents
    )
    if out.requires_grad:
        out._record = _Record(tuple(parents), backward_fn)
    return out


def _check_broadcast(a_shape, b_shape) -> None:
    """Allow identical shapes, scalar operands, or a missing leading batch dim."""
    if a_shape == b_shape:
        return
    if len(a_shape) == 0 or len(b_shape) == 0:
        return
    small, big = sorted((a_shape, b_shape), key=len)
    if len(small) < len(big) and big[len(big) - len(small):] == small:
        return
    raise ShapeMismatchError(
        f"shapes {a_shape} and {b_shape} only broadcast over a leading "
        "batch dimension or scalars"
    )


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    return grad


# -- elementwise -------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape)

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape)

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape)

    def backward_fn(g):
        return (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        )

    return _make(a.data * b.data, (a, b), backward_fn)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape)
    if np.any(b.data == 0.0):
        raise ZeroDivisionError("division by a zero element")

    def backward_fn(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _make(a.data / b.data, (a, b), backward_fn)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0  # subgradient 0 at 0

    def backward_fn(g):
        return (g * mask,)

    return _make(np.where(mask, x.data, 0.0), (x,), backward_fn)


def square(x: Tensor) -> Tensor:
    def backward_fn(g):
        return (g * 2.0 * x.data,)

    return _make(x.data * x.data, (x,), backward_fn)


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0.0):
        raise ValueError("sqrt of a negative value")
    root = np.sqrt(x.data)

    def backward_fn(g):
        return (g / (2.0 * root),)

    return _make(root, (x,), backward_fn)


def l2norm(x: Tensor) -> Tensor:
    """Euclidean norm of all elements; subgradient 0 at the origin."""
    value = float(np.sqrt(np.sum(x.data * x.data)))

    def backward_fn(g):
        if value == 0.0:
            return (np.zeros_like(x.data),)
        return (g * x.data / value,)

    return _make(np.float64(value).reshape(()), (x,), backward_fn)


# -- structural --------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatchError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(
            f"matmul inner dimensions disagree: {a.shape} x {b.shape}"
        )

    def backward_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), backward_fn)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeMismatchError("transpose expects a 2-D tensor")

    def backward_fn(g):
        return (g.T,)

    return _make(x.data.T.copy(), (x,), backward_fn)


def _check_axis(x: Tensor, axis) -> None:
    if axis is None:
        if x.data.size == 0:
            raise ValueError("reduction over an empty tensor")
        return
    if not (-x.data.ndim <= axis < x.data.ndim):
        raise ValueError(f"axis {axis} invalid for shape {x.shape}")
    if x.data.shape[axis] == 0:
        raise ValueError(f"reduction over empty axis {axis}")


def reduce_sum(x: Tensor, axis=None) -> Tensor:
    _check_axis(x, axis)

    def backward_fn(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(x.data.sum(axis=axis), (x,), backward_fn)


def reduce_mean(x: Tensor, axis=None) -> Tensor:
    _check_axis(x, axis)
    count = x.data.size if axis is None else x.data.shape[axis]

    def backward_fn(g):
        if axis is None:
            return (np.broadcast_to(g / count, x.shape).copy(),)
        g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _make(x.data.mean(axis=axis), (x,), backward_fn)


# -- fused / numerical -------------------------------------------------


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label].

    Stabilized by max-subtraction; backward is (softmax - onehot) / batch.
    """
    if logits.data.ndim != 2:
        raise ShapeMismatchError("logits must be batch x classes")
    labels = np.asarray(labels, dtype=np.int64)
    batch, classes = logits.shape
    if labels.shape != (batch,):
        raise ShapeMismatchError("labels must be a vector matching the batch")
    if batch < 1:
        raise ValueError("empty batch")
    if labels.min() < 0 or labels.max() >= classes:
        raise ValueError(f"label out of range [0, {classes})")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(logsumexp - shifted[np.arange(batch), labels]))
    probs = np.exp(shifted - logsumexp[:, None])

    def backward_fn(g):
        grad = probs.copy()
        grad[np.arange(batch), labels] -= 1.0
        return (g * grad / batch,)

    return _make(np.float64(loss).reshape(()), (logits,), backward_fn)


def solve_psd(A: Tensor, B: Tensor) -> Tensor:
    """Solve AX = B for symmetric positive definite A via Cholesky.

    A is symmetrized internally to guard rounding asymmetry; the gradient
    w.r.t. A is returned symmetrized accordingly, and the adjoint lets
    meta-gradients flow into whatever built A and B.
    """
    if A.data.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeMismatchError("A must be square")
    if B.data.ndim != 2 or B.shape[0] != A.shape[0]:
        raise ShapeMismatchError(f"B rows must match A: {A.shape} vs {B.shape}")
    sym = 0.5 * (A.data + A.data.T)
    factor, info = dpotrf(sym, lower=1)
    if info != 0:
        raise NotPositiveDefiniteError(int(info))
    X = cho_solve((factor, True), B.data)

    def backward_fn(g):
        dB = cho_solve((factor, True), g)
        G = -dB @ X.T
        return 0.5 * (G + G.T), dB

    return _make(X, (A, B), backward_fn)
