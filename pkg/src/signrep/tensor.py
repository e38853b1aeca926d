"""Dense tensors with reverse-mode automatic differentiation.

A thin tape-based autodiff layer over numpy arrays: enough primitives to
train a small transformer, nothing more. Forward kernels are plain numpy,
so results are deterministic for fixed inputs. Gradients accumulate into
``.grad`` buffers of leaf tensors until explicitly zeroed, which is what
lets several losses share one backward pass.

Broadcasting between two tensors is restricted to the leading-dimension
case (the smaller shape must equal a trailing suffix of the larger one,
e.g. adding a ``(C,)`` bias to an ``(N, T, C)`` activation). Anything
else raises, to keep the gradient bookkeeping honest. Plain numpy arrays
and python scalars mixed into an op are treated as constants and may
broadcast freely.
"""

from __future__ import annotations

import contextlib

import numpy as np

_DEFAULT_DTYPE = np.float32

_DTYPE_NAMES = {
    "float32": np.float32,
    "float64": np.float64,
    np.float32: np.float32,
    np.float64: np.float64,
    np.dtype(np.float32): np.float32,
    np.dtype(np.float64): np.float64,
}


def set_default_dtype(dtype) -> None:
    """Set the dtype newly created tensors use (float32 or float64)."""
    global _DEFAULT_DTYPE
    try:
        _DEFAULT_DTYPE = _DTYPE_NAMES[dtype]
    except KeyError:
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def dtype_scope(dtype):
    """Temporarily switch the default dtype (used by the gradient-check suite)."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class GradTape:
    """Ordered record of executed primitives.

    Nodes are appended in forward execution order, so the list itself is a
    topological order of the graph; replaying it in reverse visits every
    node exactly once.
    """

    __slots__ = ("nodes", "recording")

    def __init__(self):
        self.nodes: list[_TapeNode] = []
        self.recording = True

    def clear(self) -> None:
        self.nodes.clear()


class _TapeNode:
    __slots__ = ("output", "inputs")

    def __init__(self, output, inputs):
        self.output = output
        # inputs: list of (Tensor, vjp) pairs for differentiable arguments
        self.inputs = inputs


_TAPE = GradTape()


def tape() -> GradTape:
    return _TAPE


def reset_tape() -> None:
    """Drop all recorded nodes. Call once per training step, after the update."""
    _TAPE.clear()


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference, optimizer updates)."""
    previous = _TAPE.recording
    _TAPE.recording = False
    try:
        yield
    finally:
        _TAPE.recording = previous


class Tensor:
    """N-dimensional float array, optionally participating in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_produced")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _DEFAULT_DTYPE)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_DEFAULT_DTYPE)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)  # keeps 0-d shape, unlike unconditional copy
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._produced = False

    # -- introspection ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._item_err()

    def _item_err(self):
        raise ValueError(f"item() requires a single-element tensor, got shape {self.shape}")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- gradient bookkeeping ----------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_constant(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_constant(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return narrow(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _as_constant(value, like: Tensor) -> Tensor:
    t = Tensor(np.asarray(value, dtype=like.dtype))
    return t


def _make(data: np.ndarray, inputs) -> Tensor:
    """Wrap an op result, recording a tape node when gradients are live."""
    out = Tensor(data, dtype=data.dtype)
    live = [(t, vjp) for t, vjp in inputs if t.requires_grad]
    if _TAPE.recording and live:
        out.requires_grad = True
        out._produced = True
        _TAPE.nodes.append(_TapeNode(out, live))
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf feeding ``loss``.

    ``loss`` must be scalar. Repeated calls accumulate; zero grads between
    steps. Walks the tape once in reverse creation order.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward() requires a scalar loss, got shape {loss.shape}")
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if not loss._produced:
        if loss.requires_grad:
            loss.accumulate_grad(pending[id(loss)])
        return
    for node in reversed(_TAPE.nodes):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        for tensor, vjp in node.inputs:
            piece = vjp(g)
            if tensor._produced:
                key = id(tensor)
                if key in pending:
                    pending[key] = pending[key] + piece
                else:
                    pending[key] = piece
            elif tensor.requires_grad:
                tensor.accumulate_grad(piece)


# -- broadcasting helpers ----------------------------------------------------


def _check_leading_broadcast(sa: tuple, sb: tuple) -> None:
    if sa == sb:
        return
    if len(sa) >= len(sb) and sa[len(sa) - len(sb):] == sb:
        return
    if len(sb) > len(sa) and sb[len(sb) - len(sa):] == sa:
        return
    raise ValueError(
        f"shapes {sa} and {sb} do not align: only leading-dimension "
        f"broadcasting is supported"
    )


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _binary_args(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    if not isinstance(a, Tensor):
        a = _as_constant(a, b)
    elif not isinstance(b, Tensor):
        b = _as_constant(b, a)
    else:
        _check_leading_broadcast(a.shape, b.shape)
    return a, b


# -- elementwise primitives ----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _binary_args(a, b)
    data = a.data + b.data
    return _make(data, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    ])


def sub(a, b) -> Tensor:
    a, b = _binary_args(a, b)
    data = a.data - b.data
    return _make(data, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(-g, b.shape)),
    ])


def mul(a, b) -> Tensor:
    a, b = _binary_args(a, b)
    data = a.data * b.data
    return _make(data, [
        (a, lambda g: _unbroadcast(g * b.data, a.shape)),
        (b, lambda g: _unbroadcast(g * a.data, b.shape)),
    ])


def div(a, b) -> Tensor:
    a, b = _binary_args(a, b)
    data = a.data / b.data
    return _make(data, [
        (a, lambda g: _unbroadcast(g / b.data, a.shape)),
        (b, lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.shape)),
    ])


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, [(a, lambda g: -g)])


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)
    return _make(data, [(a, lambda g: g * data)])


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)
    return _make(data, [(a, lambda g: g / a.data)])


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)
    return _make(data, [(a, lambda g: g * (0.5 / data))])


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    data = np.where(keep, a.data, 0.0)
    return _make(data, [(a, lambda g: g * keep)])


# -- matrix / shape primitives -------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise TypeError("matmul expects two Tensors")
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul batch dimensions disagree: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def grad_a(g):
        return np.matmul(g, np.swapaxes(b.data, -1, -2))

    def grad_b(g):
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        # a 2-d rhs shared across a batched lhs collects gradient over the batch
        if gb.ndim > b.ndim:
            gb = gb.sum(axis=tuple(range(gb.ndim - b.ndim)))
        return gb

    return _make(data, [(a, grad_a), (b, grad_b)])


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = a.data.reshape(shape)
    return _make(data, [(a, lambda g: g.reshape(a.shape))])


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    data = np.transpose(a.data, axes)
    return _make(data, [(a, lambda g: np.transpose(g, inverse))])


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of an empty sequence")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp_for(i):
        lo, hi = offsets[i], offsets[i + 1]
        index = [slice(None)] * data.ndim
        index[axis] = slice(lo, hi)
        index = tuple(index)
        return lambda g: g[index]

    return _make(data, [(t, vjp_for(i)) for i, t in enumerate(tensors)])


def narrow(a: Tensor, key) -> Tensor:
    """Basic slicing (ints and slices); gradient scatters back into zeros."""
    data = a.data[key]

    def grad(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return full

    return _make(np.ascontiguousarray(data), [(a, grad)])


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicitly broadcast ``a`` to ``shape``; the gradient sums back."""
    shape = tuple(shape)
    data = np.broadcast_to(a.data, shape)

    def grad(g):
        extra = len(shape) - a.ndim
        if extra > 0:
            g = g.sum(axis=tuple(range(extra)))
        axes = tuple(i for i, s in enumerate(a.shape) if s == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return g

    return _make(data.copy(), [(a, grad)])


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is True by ``value`` (no grad through them)."""
    mask = np.asarray(mask, dtype=bool)
    data = np.where(mask, np.asarray(value, dtype=a.dtype), a.data)
    return _make(data, [(a, lambda g: np.where(mask, 0.0, g))])


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``weight`` by integer ``ids`` (any shape)."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError(f"embedding ids must be integers, got {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ValueError(
            f"embedding id out of range [0, {weight.shape[0]}): "
            f"min={ids.min()}, max={ids.max()}"
        )
    data = weight.data[ids]

    def grad(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[-1]))
        return gw

    return _make(data, [(weight, grad)])


# -- reductions ----------------------------------------------------------------


def _reduce_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _reduce_axes(axis, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)

    def grad(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return np.broadcast_to(g, a.shape).copy()

    return _make(np.asarray(data), [(a, grad)])


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _reduce_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    data = a.data.mean(axis=axes, keepdims=keepdims)

    def grad(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape) / count).astype(a.dtype, copy=False)

    return _make(np.asarray(data), [(a, grad)])


# -- softmax family --------------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = axis % a.ndim if a.ndim else 0
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    num = np.exp(shifted)
    data = num / num.sum(axis=axis, keepdims=True)

    def grad(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        return data * (g - inner)

    return _make(data, [(a, grad)])


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = axis % a.ndim if a.ndim else 0
    m = a.data.max(axis=axis, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True)) + m
    data = a.data - lse
    probs = np.exp(data)

    def grad(g):
        return g - probs * g.sum(axis=axis, keepdims=True)

    return _make(data, [(a, grad)])
