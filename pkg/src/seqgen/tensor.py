"""Dense tensors with reverse-mode automatic differentiation.

A Tensor wraps a numpy array. While a Tape is active (``with Tape() as t:``),
every primitive whose inputs require gradients is recorded in execution
order; ``tape.backward(loss)`` then sweeps that order in reverse and returns
a gradient map. Recording order is topological by construction, and the
reverse sweep accumulates in a fixed order, so two identical forward+backward
passes produce bit-identical gradients.

Tapes are confined to the thread that opened them (the active-tape stack is
thread-local); model replicas on separate threads do not interact.
"""

from __future__ import annotations

import math
import threading

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Raised when operand shapes do not conform; message carries both shapes."""


_tls = threading.local()


def _tape_stack():
    if not hasattr(_tls, "stack"):
        _tls.stack = []
    return _tls.stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive operations, plus gradient storage."""

    def __init__(self):
        self._nodes = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def _register(self, t: Tensor):
        t.node_id = len(self._nodes)
        t.tape = self
        self._nodes.append(t)

    def clear(self):
        for t in self._nodes:
            t._parents = ()
            t._backward = None
            t.tape = None
        self._nodes.clear()

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Gradients of a scalar loss w.r.t. every tracked ancestor.

        Returns a map {tensor: gradient array}; tensors not requiring
        gradients (or not ancestors of the loss) are absent. Also assigns
        ``.grad`` on every tensor in the map.
        """
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.tape is not self:
            raise ValueError("loss is not recorded on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        holders: dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self._nodes):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                k = id(parent)
                if k in grads:
                    grads[k] = grads[k] + pg
                else:
                    grads[k] = pg
                    holders[k] = parent
        out = {}
        for k, g in grads.items():
            t = holders[k]
            t.grad = g
            out[t] = g
        return out


class Tensor:
    """N-dimensional real array, optionally tracked on the active tape."""

    __slots__ = ("data", "requires_grad", "grad", "tape", "node_id",
                 "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.tape = None
        self.node_id = None
        self._parents = ()
        self._backward = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else _bad_item(self)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return subtract(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return multiply(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other, self.dtype))

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)


def _bad_item(t):
    raise ShapeError(f"item() needs a single element, got shape {t.shape}")


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _record(data, parents, backward) -> Tensor:
    """Wrap a forward result; register on the active tape if any input is tracked."""
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        tape._register(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise and linear primitives ---------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def subtract(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "subtract")
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def multiply(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "multiply")
    return _record(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def negate(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} vs {b.shape}")
    return _record(a.data @ b.data, (a, b),
                   lambda g: (g @ b.data.T, a.data.T @ g))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of an empty list")
    base = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(base) or any(
                i != axis and t.shape[i] != base[i] for i in range(t.ndim)):
            raise ShapeError(f"concat: shape {t.shape} incompatible with {base} on axis {axis}")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(sizes)))

    return _record(data, tensors, backward)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(data, (a,), backward)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape) / count,)

    return _record(data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    t = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


def softplus(a: Tensor) -> Tensor:
    # log(1 + e^x) without overflow for large |x|
    x = a.data
    out = np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)

    def backward(g):
        t = np.exp(-np.abs(x))
        sig = np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))
        return (g * sig,)

    return _record(out, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,))


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast: cannot expand {a.shape} to {shape}") from None
    return _record(data.copy(), (a,), lambda g: (_unbroadcast(g, a.shape),))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _record(a.data.reshape(shape), (a,),
                   lambda g: (g.reshape(a.shape),))


def getitem(a: Tensor, idx) -> Tensor:
    data = a.data[idx]

    def backward(g):
        out = np.zeros_like(a.data)
        out[idx] = g
        return (out,)

    return _record(np.array(data, copy=True), (a,), backward)


# -- convolution --------------------------------------------------------

def conv2d_same(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Size-preserving 2-D convolution, zero padding, stride 1.

    x: [C_in,H,W] or [B,C_in,H,W]; kernel: [C_out,C_in,k,k] with k odd;
    bias: [C_out]. Output keeps the spatial extent of the input.
    """
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ShapeError(f"conv2d_same input must be rank 3 or 4, got {x.shape}")
    kd = kernel.data
    if kd.ndim != 4 or kd.shape[2] != kd.shape[3]:
        raise ShapeError(f"conv2d_same kernel must be [C_out,C_in,k,k], got {kernel.shape}")
    k = kd.shape[2]
    if k % 2 == 0:
        raise ShapeError(f"conv2d_same kernel extent must be odd, got {k}")
    if kd.shape[1] != xd.shape[1]:
        raise ShapeError(f"conv2d_same: input channels {xd.shape[1]} != kernel channels {kd.shape[1]}")
    bd = bias.data
    if bd.shape != (kd.shape[0],):
        raise ShapeError(f"conv2d_same bias shape {bias.shape} != ({kd.shape[0]},)")

    out = kernels.conv2d_forward(xd, kd, bd)

    def backward(g):
        g4 = g[None] if squeeze else g
        dx, dk, db = kernels.conv2d_backward(np.ascontiguousarray(g4), xd, kd)
        return (dx[0] if squeeze else dx, dk, db)

    return _record(out[0] if squeeze else out, (x, kernel, bias), backward)


# -- verification -------------------------------------------------------

def finite_difference_check(f, point: Tensor, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    f maps a Tensor to a scalar Tensor. Relative error per coordinate is
    |analytic - numeric| / max(1, |numeric|); the max over coordinates is
    returned. Non-finite function values are reported, not masked.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = Tensor(np.array(point.data, dtype=np.float64), requires_grad=True)
    with Tape() as tape:
        loss = f(x)
        if loss.size != 1:
            raise ShapeError(f"function under test must be scalar, got {loss.shape}")
    grads = tape.backward(loss)
    analytic = grads.get(x)
    analytic = np.zeros_like(x.data) if analytic is None else analytic

    flat = x.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(Tensor(x.data)).item()
        flat[i] = orig - step
        lo = f(Tensor(x.data)).item()
        flat[i] = orig
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise ValueError(f"non-finite function value at coordinate {i}")
        numeric = (hi - lo) / (2.0 * step)
        err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst
