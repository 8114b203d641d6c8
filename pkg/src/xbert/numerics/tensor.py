"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable operation executed while a :class:`Tape` is active and at
least one input has ``requires_grad`` is appended to that tape together with a
closure mapping the output gradient to input gradients. :meth:`Tape.backward`
replays the tape in reverse order.

Arrays are float32. The finite-difference oracle in the test suite switches to
float64 through :func:`precision`; nothing else should.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

_DTYPE = np.float32
_CHECK_FINITE = False
_TAPES: list["Tape"] = []


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


class NonFiniteError(FloatingPointError):
    """Raised in debug mode when an operation produces NaN or Inf."""


class TapeError(RuntimeError):
    """Raised on invalid backward requests."""


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    global _DTYPE
    prev, _DTYPE = _DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = prev


def set_debug(enabled: bool) -> bool:
    """Toggle the NaN/Inf guard on every forward op. Returns the previous setting."""
    global _CHECK_FINITE
    prev, _CHECK_FINITE = _CHECK_FINITE, bool(enabled)
    return prev


@contextlib.contextmanager
def debug_mode(enabled: bool = True) -> Iterator[None]:
    prev = set_debug(enabled)
    try:
        yield
    finally:
        set_debug(prev)


def _as_array(data) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    return np.asarray(data, dtype=_DTYPE)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: "Tensor", inputs: Sequence["Tensor"], backward: Callable):
        self.out = out
        self.inputs = tuple(inputs)
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations run inside the ``with`` block are
    recorded. Nested tapes are allowed, only the innermost one records.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        for node in self.nodes:
            node.out._node = None
        self.nodes.clear()

    def backward(self, loss: "Tensor") -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf on the tape."""
        if loss.data.size != 1:
            raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
        node = loss._node
        if node is None or not any(n is node for n in reversed(self.nodes)):
            raise TapeError("loss was not recorded on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t._node is None:
                    t.grad += gi
                elif id(t) in grads:
                    grads[id(t)] = grads[id(t)] + gi
                else:
                    grads[id(t)] = gi


def backward(tape: Tape, loss: "Tensor") -> None:
    tape.backward(loss)


class Tensor:
    """A float array that may participate in reverse-mode differentiation.

    Leaf tensors created with ``requires_grad=True`` own a ``grad`` array of the
    same shape which backward passes add into; call :meth:`zero_grad` between
    steps.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._node: _Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
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
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

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

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return max_(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=_DTYPE)
    out.grad = None
    out.name = None
    out._node = None
    out.requires_grad = False
    if _CHECK_FINITE and not np.isfinite(out.data).all():
        raise NonFiniteError(f"non-finite output from {getattr(backward, '__qualname__', 'op')}")
    if _TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = _Node(out, inputs, backward)
        out._node = node
        _TAPES[-1].nodes.append(node)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_check("add", a, b)

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit(a.data + b.data, (a, b), _bw)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_check("sub", a, b)

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit(a.data - b.data, (a, b), _bw)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_check("mul", a, b)

    def _bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit(a.data * b.data, (a, b), _bw)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_check("div", a, b)
    out = a.data / b.data

    def _bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _emit(out, (a, b), _bw)


def neg(a) -> Tensor:
    a = _wrap(a)
    return _emit(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = _wrap(a)
    p = float(exponent)

    def _bw(g):
        return (g * p * a.data ** (p - 1),)

    return _emit(a.data**p, (a,), _bw)


def exp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _wrap(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _emit(out, (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = _wrap(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _emit(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.data)
    return _emit(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0
    return _emit(a.data * mask, (a,), lambda g: (g * mask,))


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = _wrap(a)
    x = a.data
    x2 = x * x
    inner = _GELU_C * (x + 0.044715 * x2 * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def _bw(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return _emit(out, (a,), _bw)


# ---------------------------------------------------------------- linear algebra / layout

def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul: expected a.shape[-1] == b.shape[-2], got {a.shape} @ {b.shape}"
        )
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None

    def _bw(g):
        # a shared 2-d operand gets its gradient as one flat product, not a batched one
        if b.ndim == 2 and a.ndim > 2:
            ga = g @ b.data.T
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        elif a.ndim == 2 and b.ndim > 2:
            ga = (g @ np.swapaxes(b.data, -1, -2)).reshape(-1, *a.shape).sum(axis=0)
            gb = a.data.T @ g
        else:
            ga = g @ np.swapaxes(b.data, -1, -2)
            gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit(a.data @ b.data, (a, b), _bw)


def transpose(a, axes=None) -> Tensor:
    a = _wrap(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(ax % a.ndim for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return _emit(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _emit(out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of an empty sequence")
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if t.ndim != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != ax
        ):
            raise ShapeError(f"concat on axis {axis}: expected shape like {ref}, got {t.shape}")
    splits = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def _bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return _emit(np.concatenate([t.data for t in ts], axis=ax), ts, _bw)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    if any(t.shape != ts[0].shape for t in ts):
        raise ShapeError(f"stack: shapes differ: {[t.shape for t in ts]}")
    out = np.stack([t.data for t in ts], axis=axis)
    ax = axis % out.ndim

    def _bw(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(ts)))

    return _emit(out, ts, _bw)


def getitem(a, index) -> Tensor:
    a = _wrap(a)
    out = a.data[index]

    def _bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _emit(out, (a,), _bw)


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather ``indices`` (any integer array) along ``axis``."""
    a = _wrap(a)
    idx = np.asarray(indices)
    ax = axis % a.ndim
    if idx.size and (idx.min() < -a.shape[ax] or idx.max() >= a.shape[ax]):
        raise ShapeError(f"take: index out of range for axis of size {a.shape[ax]}")
    out = np.take(a.data, idx, axis=ax)

    def _bw(g):
        # scatter-add via bincount on the axis moved to the front
        n = a.shape[ax]
        rows = np.moveaxis(g, list(range(ax, ax + idx.ndim)), list(range(idx.ndim)))
        rows = rows.reshape(idx.size, -1)
        width = rows.shape[1]
        flat = (idx.reshape(-1) % n)[:, None] * width + np.arange(width)
        acc = np.bincount(flat.ravel(), weights=rows.ravel(), minlength=n * width)
        moved = (n,) + a.shape[:ax] + a.shape[ax + 1 :]
        full = np.moveaxis(acc.reshape(moved), 0, ax)
        return (full.astype(a.data.dtype, copy=False),)

    return _emit(out, (a,), _bw)


# ---------------------------------------------------------------- reductions

def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def _bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit(out, (a,), _bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def _bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _emit(out, (a,), _bw)


def max_(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Max-reduce; the gradient goes to the first maximal element."""
    a = _wrap(a)
    if axis is None:
        flat = reshape(a, (-1,))
        return max_(flat, 0, keepdims=False) if not keepdims else reshape(
            max_(flat, 0), (1,) * a.ndim
        )
    ax = axis % a.ndim
    arg = np.expand_dims(np.argmax(a.data, axis=ax), ax)
    out = np.take_along_axis(a.data, arg, axis=ax)

    def _bw(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        full = np.zeros_like(a.data)
        np.put_along_axis(full, arg, g, axis=ax)
        return (full,)

    return _emit(out if keepdims else np.squeeze(out, ax), (a,), _bw)


# ---------------------------------------------------------------- normalizations

def softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit(out, (a,), _bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def _bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _emit(out, (a,), _bw)


def layer_norm(a, weight=None, bias=None, eps: float = 1e-5, axis: int = -1) -> Tensor:
    """Normalize to zero mean / unit variance along ``axis``, then affine.

    ``weight`` and ``bias`` are only accepted for the last axis.
    """
    a = _wrap(a)
    ax = axis % a.ndim
    if (weight is not None or bias is not None) and ax != a.ndim - 1:
        raise ShapeError("layer_norm affine parameters require axis=-1")
    n = a.shape[ax]
    mu = a.data.mean(axis=ax, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=ax, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    inputs = [a]
    out = xhat
    w = b = None
    if weight is not None:
        w = _wrap(weight)
        if w.shape != (n,):
            raise ShapeError(f"layer_norm weight: expected ({n},), got {w.shape}")
        out = out * w.data
        inputs.append(w)
    if bias is not None:
        b = _wrap(bias)
        if b.shape != (n,):
            raise ShapeError(f"layer_norm bias: expected ({n},), got {b.shape}")
        out = out + b.data
        inputs.append(b)

    def _bw(g):
        grads = []
        gx = g * w.data if w is not None else g
        gmean = gx.mean(axis=ax, keepdims=True)
        gxhat_mean = (gx * xhat).mean(axis=ax, keepdims=True)
        grads.append(rstd * (gx - gmean - xhat * gxhat_mean))
        red = tuple(range(a.ndim - 1))
        if w is not None:
            grads.append((g * xhat).sum(axis=red))
        if b is not None:
            grads.append(g.sum(axis=red))
        return tuple(grads)

    return _emit(out, inputs, _bw)
