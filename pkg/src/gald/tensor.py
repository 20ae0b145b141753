"""Dense float64 tensors with a define-by-run reverse-mode autodiff tape.

Every differentiable operation produces a new :class:`Tensor` carrying a
:class:`Node` that records the op name, its inputs and a closure mapping the
output gradient to input gradients. :func:`backward` rebuilds the tape from
the loss by walking those nodes and sweeps it in reverse creation order.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import DomainError, NotScalar, ShapeMismatch

_SEQ = itertools.count()
_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (used for evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    seq: int


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "_seq", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None
        self._seq = next(_SEQ)
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axes=None, keepdims=False):
        return reduce(self, "sum", _axes_arg(self, axes), keepdims)

    def mean(self, axes=None, keepdims=False):
        return reduce(self, "mean", _axes_arg(self, axes), keepdims)

    def max(self, axes=None, keepdims=False):
        return reduce(self, "max", _axes_arg(self, axes), keepdims)


def _axes_arg(t: Tensor, axes) -> list:
    if axes is None:
        return list(range(t.ndim))
    if isinstance(axes, int):
        return [axes]
    return list(axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones_like(x: Tensor) -> Tensor:
    return Tensor(np.ones_like(x.data))


def make_op(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap a forward result and record it on the tape when gradients are needed.

    ``backward_fn`` receives the output gradient and returns one gradient (or
    None) per input. Non-finite forward results raise DomainError.
    """
    if not np.all(np.isfinite(data)):
        raise DomainError(f"{op} produced non-finite values")
    out = Tensor(data)
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(op, tuple(inputs), backward_fn, out._seq)
    return out


# ---------------------------------------------------------------------------
# Tape and backward
# ---------------------------------------------------------------------------


@dataclass
class Tape:
    """Recorded ops reachable from a root tensor, in creation order."""

    entries: list = field(default_factory=list)  # (output tensor, node) pairs

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        seen = set()
        entries = []
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t._node is not None:
                entries.append((t, t._node))
                stack.extend(t._node.inputs)
        entries.sort(key=lambda e: e[1].seq)
        return cls(entries)

    @property
    def nodes(self) -> list:
        return [n for _, n in self.entries]

    def __len__(self) -> int:
        return len(self.entries)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires-grad tensor reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` buffers, so leaves shared by
    several backward calls sum their contributions until cleared.
    """
    if loss.size != 1:
        raise NotScalar(f"backward needs a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = Tape.from_root(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    reached = {id(loss): loss}
    for out, node in reversed(tape.entries):
        g = grads.get(id(out))
        if g is None:
            continue
        in_grads = node.backward(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            ig = _unbroadcast(np.asarray(ig, dtype=np.float64), inp.shape)
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
                reached[key] = inp
    for out, node in tape.entries:
        for inp in node.inputs:
            if inp.requires_grad and id(inp) not in reached:
                reached[id(inp)] = inp
    for key, t in reached.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(t.data)
        t.grad = g if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"shapes {a.shape} and {b.shape} are not broadcastable") from None


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _log(x):
    if np.any(x <= 0):
        raise DomainError("log of non-positive value")
    return np.log(x)


# name -> (forward, backward(x, y, g))
UNARY = {
    "sigmoid": (_sigmoid, lambda x, y, g: g * y * (1.0 - y)),
    "relu": (lambda x: np.maximum(x, 0.0), lambda x, y, g: g * (x > 0)),
    "exp": (np.exp, lambda x, y, g: g * y),
    "log": (_log, lambda x, y, g: g / x),
}

# name -> (forward, backward(a, b, g) -> (ga, gb))
BINARY = {
    "add": (np.add, lambda a, b, g: (g, g)),
    "sub": (np.subtract, lambda a, b, g: (g, -g)),
    "mul": (np.multiply, lambda a, b, g: (g * b, g * a)),
    "div": (np.divide, lambda a, b, g: (g / b, -g * a / (b * b))),
}


def elementwise(op: str, a, b=None) -> Tensor:
    """Apply a unary (sigmoid, relu, exp, log) or binary (add, sub, mul, div) op."""
    a = as_tensor(a)
    if op in UNARY:
        if b is not None:
            raise TypeError(f"{op} takes one operand")
        fwd, _ = UNARY[op]
        x = a.data
        y = fwd(x)
        return make_op(op, y, (a,), lambda g: (UNARY[op][1](x, y, g),))
    if op in BINARY:
        if b is None:
            raise TypeError(f"{op} takes two operands")
        b = as_tensor(b)
        _broadcast_shape(a, b)
        fwd, _ = BINARY[op]
        if op == "div" and np.any(b.data == 0):
            raise DomainError("division by zero")
        ad, bd = a.data, b.data
        return make_op(op, fwd(ad, bd), (a, b), lambda g: BINARY[op][1](ad, bd, g))
    raise ValueError(f"unknown elementwise op {op!r}")


def add(a, b):
    return elementwise("add", a, b)


def sub(a, b):
    return elementwise("sub", a, b)


def mul(a, b):
    return elementwise("mul", a, b)


def div(a, b):
    return elementwise("div", a, b)


def sigmoid(x):
    return elementwise("sigmoid", x)


def relu(x):
    return elementwise("relu", x)


def exp(x):
    return elementwise("exp", x)


def log(x):
    return elementwise("log", x)


# ---------------------------------------------------------------------------
# Linear algebra, normalisation and reductions
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading (batch) dimensions broadcast like numpy."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeMismatch(f"matmul batch dims differ: {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data

    def bw(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return make_op("matmul", ad @ bd, (a, b), bw)


def _check_axis(t: Tensor, axis: int) -> int:
    if not -t.ndim <= axis < t.ndim:
        raise ValueError(f"axis {axis} out of range for rank {t.ndim}")
    return axis % t.ndim


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _check_axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_op("softmax", y, (x,), bw)


def reduce(x: Tensor, op: str, axes: Iterable[int], keepdims: bool = False) -> Tensor:
    """Sum, mean or max over ``axes``; max routes its gradient to the lowest flat index."""
    x = as_tensor(x)
    axes = [_check_axis(x, a) for a in axes]
    if len(set(axes)) != len(axes):
        raise ValueError(f"repeated axes {axes}")
    if not axes:
        return x
    axes_t = tuple(sorted(axes))
    in_shape = x.shape
    kept_shape = tuple(1 if i in axes_t else s for i, s in enumerate(in_shape))
    count = int(np.prod([in_shape[a] for a in axes_t]))

    if op == "sum":
        y = x.data.sum(axis=axes_t, keepdims=True)

        def bw(g):
            return (np.broadcast_to(g.reshape(kept_shape), in_shape),)

    elif op == "mean":
        y = x.data.sum(axis=axes_t, keepdims=True) / count

        def bw(g):
            return (np.broadcast_to(g.reshape(kept_shape) / count, in_shape),)

    elif op == "max":
        rest = [i for i in range(x.ndim) if i not in axes_t]
        perm = rest + list(axes_t)
        moved = np.transpose(x.data, perm)
        flat = moved.reshape(moved.shape[: len(rest)] + (count,))
        idx = flat.argmax(axis=-1)
        y = np.take_along_axis(flat, idx[..., None], axis=-1).reshape(kept_shape)

        def bw(g):
            gflat = np.zeros_like(flat)
            np.put_along_axis(gflat, idx[..., None], g.reshape(idx.shape + (1,)), axis=-1)
            inv = np.argsort(perm)
            return (np.transpose(gflat.reshape(moved.shape), inv),)

    else:
        raise ValueError(f"unknown reduction {op!r}")

    if not keepdims:
        out_shape = tuple(s for i, s in enumerate(in_shape) if i not in axes_t)
        y = y.reshape(out_shape)
    return make_op(f"reduce_{op}", y, (x,), bw)


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of an empty list")
    if len(tensors) == 1:
        return tensors[0]
    axis = _check_axis(tensors[0], axis)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis
        ):
            raise ShapeMismatch(f"cannot concat {t.shape} with {ref} on axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    y = np.concatenate([t.data for t in tensors], axis=axis)

    def bw(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            out.append(g[tuple(sl)])
        return out

    return make_op("concat", y, tensors, bw)


def getitem(x: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing."""
    y = x.data[index]
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape)
        gx[index] = g
        return (gx,)

    return make_op("slice", np.array(y, dtype=np.float64), (x,), bw)


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> list:
    axis = _check_axis(x, axis)
    if sum(sizes) != x.shape[axis]:
        raise ShapeMismatch(f"split sizes {sizes} do not sum to {x.shape[axis]}")
    out, lo = [], 0
    for s in sizes:
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(lo, lo + s)
        out.append(getitem(x, tuple(sl)))
        lo += s
    return out


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"cannot reshape {x.shape} to {shape}") from None
    in_shape = x.shape
    return make_op("reshape", y, (x,), lambda g: (g.reshape(in_shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_op("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        y = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeMismatch(f"cannot broadcast {x.shape} to {shape}") from None
    return make_op("broadcast", np.array(y), (x,), lambda g: (g,))
