"""Dense float64 tensors with an explicit reverse-mode gradient tape.

Every value flowing through the forecaster is a :class:`Tensor`.  Operations
executed while a :class:`Tape` is active (and touching a watched tensor) are
recorded together with a backward rule; everything else runs gradient-free.

>>> x = Tensor([1.0, 2.0])
>>> with Tape() as tape:
...     tape.watch(x)
...     loss = (x * x).sum()
...     grads = tape.backward(loss)
>>> grads[x]
array([2., 4.])
"""
from __future__ import annotations

import itertools
import os
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "DetachedError",
    "no_tape",
    "current_tape",
    "backward",
    "memory",
    "set_debug",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "sigmoid",
    "tanh",
    "relu",
    "exp",
    "square",
    "transpose_axes",
    "swapaxes",
    "reshape",
    "concat",
    "slice_axis",
    "sum",
    "mean",
    "softmax",
    "layer_norm",
    "masked_fill",
    "custom_op",
    "rowwise_linear",
]


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class DetachedError(RuntimeError):
    """Raised when differentiating a value the tape never saw."""


_DEBUG = os.environ.get("FASTPF_DEBUG", "") not in ("", "0")


def set_debug(flag: bool) -> None:
    """Toggle NaN assertions after every forward operation."""
    global _DEBUG
    _DEBUG = bool(flag)


class AllocationCounter:
    """Live/peak byte accounting for tensor payloads."""

    def __init__(self) -> None:
        self.live = 0
        self.peak = 0
        self.allocations = 0

    def reset(self) -> None:
        # live bytes of tensors still referenced are kept so frees stay balanced
        self.peak = self.live
        self.allocations = 0

    def reset_peak(self) -> None:
        self.peak = self.live

    def _alloc(self, n: int) -> None:
        self.live += n
        self.allocations += 1
        if self.live > self.peak:
            self.peak = self.live

    def _free(self, n: int) -> None:
        self.live -= n


memory = AllocationCounter()


class Tensor:
    """Immutable n-d float64 array, optionally attached to a gradient tape.

    ``grad_id`` is ``None`` or a ``(tape_serial, node_index)`` handle.
    """

    __slots__ = ("data", "grad_id", "name", "_nbytes", "__weakref__")

    def __init__(self, data, name: Optional[str] = None, *, _copy: bool = True) -> None:
        arr = np.array(data, dtype=np.float64, copy=True) if _copy else data
        if any(n < 1 for n in arr.shape):
            raise ShapeError(f"tensor axes must be >= 1, got shape {arr.shape}")
        arr.flags.writeable = False
        self.data: np.ndarray = arr
        self.grad_id: Optional[tuple[int, int]] = None
        self.name = name
        self._nbytes = arr.nbytes
        memory._alloc(self._nbytes)

    def __del__(self) -> None:
        try:
            memory._free(self._nbytes)
        except AttributeError:
            pass

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        if arr.dtype != np.float64 or not arr.flags.c_contiguous or not arr.flags.owndata:
            arr = np.array(arr, dtype=np.float64, order="C")
        return cls(arr, _copy=False)

    # -- metadata ---------------------------------------------------------
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
        """Return a writable copy of the payload."""
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def assign(self, values) -> None:
        """Replace the payload in place (optimizer updates, checkpoint loads)."""
        arr = np.array(values, dtype=np.float64, copy=True)
        if arr.shape != self.data.shape:
            raise ShapeError(f"cannot assign shape {arr.shape} to tensor of shape {self.data.shape}")
        arr.flags.writeable = False
        self.data = arr

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    # -- operators --------------------------------------------------------
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose_axes(self, axes)


def _raise_item(t: Tensor) -> float:
    raise ShapeError(f"item() requires a single element, got shape {t.shape}")


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

_state = threading.local()


def _stack() -> list:
    st = getattr(_state, "stack", None)
    if st is None:
        st = _state.stack = []
    return st


def current_tape() -> Optional["Tape"]:
    st = _stack()
    return st[-1] if st else None


@contextmanager
def no_tape():
    """Run the enclosed block gradient-free even inside an active tape."""
    st = _stack()
    st.append(None)
    try:
        yield
    finally:
        st.pop()


class _Node:
    __slots__ = ("out", "inputs", "parent_ids", "backward")

    def __init__(self, out, inputs, parent_ids, backward) -> None:
        self.out = out
        self.inputs = inputs
        self.parent_ids = parent_ids
        self.backward = backward


class Tape:
    """Append-only record of differentiable operations, confined to one thread."""

    _serials = itertools.count(1)

    def __init__(self) -> None:
        self.serial = next(Tape._serials)
        self.nodes: list[_Node] = []
        self.leaves: list[Tensor] = []
        self._saved_ids: list[tuple[Tensor, Optional[tuple[int, int]]]] = []
        self._thread = threading.get_ident()

    @property
    def entry_count(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        if threading.get_ident() != self._thread:
            raise RuntimeError("a Tape must be used on the thread that created it")
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        st = _stack()
        st.remove(self)
        for t, old in reversed(self._saved_ids):
            t.grad_id = old
        self._saved_ids.clear()

    def watch(self, *tensors: Tensor | Iterable[Tensor]) -> None:
        for t in _flatten(tensors):
            if self.attached(t):
                continue
            self._saved_ids.append((t, t.grad_id))
            t.grad_id = (self.serial, len(self.nodes))
            self.nodes.append(_Node(t, (), (), None))
            self.leaves.append(t)

    def attached(self, t: Tensor) -> bool:
        return t.grad_id is not None and t.grad_id[0] == self.serial

    def _record(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable) -> None:
        ids = tuple(t.grad_id[1] if self.attached(t) else None for t in inputs)
        if all(i is None for i in ids):
            return
        out.grad_id = (self.serial, len(self.nodes))
        self.nodes.append(_Node(out, tuple(inputs), ids, backward))

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Gradient of a scalar loss with respect to every watched leaf."""
        if loss.ndim != 0:
            raise ShapeError(f"backward needs a rank-0 loss, got shape {loss.shape}")
        grads: list[Optional[np.ndarray]] = [None] * len(self.nodes)
        if self.attached(loss):
            start = loss.grad_id[1]
            grads[start] = np.ones((), dtype=np.float64)
            with no_tape():
                for idx in range(start, -1, -1):
                    node = self.nodes[idx]
                    g = grads[idx]
                    if g is None or node.backward is None:
                        continue
                    parent_grads = node.backward(g)
                    grads[idx] = None
                    for pid, pg in zip(node.parent_ids, parent_grads):
                        if pid is None or pg is None:
                            continue
                        grads[pid] = pg if grads[pid] is None else grads[pid] + pg
        elif loss.grad_id is not None:
            raise DetachedError("loss belongs to a different tape")
        elif not self.leaves:
            raise DetachedError("loss is not attached to this tape")
        out = {}
        for leaf in self.leaves:
            g = grads[leaf.grad_id[1]] if self.attached(leaf) else None
            out[leaf] = np.zeros(leaf.shape) if g is None else np.asarray(g, dtype=np.float64)
        return out


def _flatten(items) -> Iterable[Tensor]:
    for it in items:
        if isinstance(it, Tensor):
            yield it
        else:
            yield from _flatten(it)


def backward(loss: Tensor, tape: Optional[Tape] = None) -> dict[Tensor, np.ndarray]:
    """Differentiate ``loss`` on ``tape`` (default: the innermost active tape)."""
    tape = tape or current_tape()
    if tape is None or loss.grad_id is None and not tape.leaves:
        raise DetachedError("loss is not attached to an active tape")
    if loss.grad_id is not None and loss.grad_id[0] != tape.serial:
        raise DetachedError("loss belongs to a different tape")
    return tape.backward(loss)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(out: np.ndarray, inputs: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if _DEBUG and np.isnan(out).any():
        if all(np.isfinite(t.data).all() for t in inputs):
            raise FloatingPointError(f"{op} produced NaN from finite inputs")
    t = Tensor._wrap(np.asarray(out))
    tape = current_tape()
    if tape is not None:
        tape._record(t, inputs, backward)
    return t


def custom_op(out: np.ndarray, inputs: Sequence[Tensor], backward: Callable, name: str = "custom") -> Tensor:
    """Wrap a precomputed array as the output of a user-defined differentiable op.

    ``backward(g)`` must return one gradient (or ``None``) per input.
    """
    return _make(out, inputs, backward, name)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    return _make(
        ad / bd,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)),
        "div",
    )


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def square(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,), "exp")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    y = _sigmoid(a.data)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def masked_fill(a, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true with a constant."""
    a = _as_tensor(a)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    return _make(np.where(mask, value, a.data), (a,), lambda g: (np.where(mask, 0.0, g),), "masked_fill")


# ---------------------------------------------------------------------------
# contractions and shape algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot contract shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch axes of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), back, "matmul")


def rowwise_linear(x, w, b=None) -> Tensor:
    """Position-wise affine map ``x @ w + b`` over the last axis.

    Each output row is reduced independently of how many rows are batched
    together, so slicing the input along any leading axis yields bit-identical
    rows.  BLAS-backed :func:`matmul` does not guarantee that.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"rowwise_linear: cannot apply weight {w.shape} to input {x.shape}")
    xd, wd = x.data, w.data
    out = np.einsum("...d,df->...f", xd, wd)
    inputs: tuple = (x, w)
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (w.shape[1],):
            raise ShapeError(f"rowwise_linear: bias {b.shape} must be ({w.shape[1]},)")
        out = out + b.data
        inputs = (x, w, b)

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        grads = (g @ wd.T, xd.reshape(-1, xd.shape[-1]).T @ g2)
        return grads + ((g2.sum(axis=0),) if b is not None else ())

    return _make(out, inputs, back, "rowwise_linear")


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < max(ndim, 1):
        raise ShapeError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim if ndim else 0


def transpose_axes(a, axes: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    if sorted(_norm_axis(x, a.ndim) for x in axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose_axes: {axes} is not a permutation of rank {a.ndim}")
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    return _make(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _as_tensor(a)
    perm = list(range(a.ndim))
    i, j = _norm_axis(ax1, a.ndim), _norm_axis(ax2, a.ndim)
    perm[i], perm[j] = perm[j], perm[i]
    return transpose_axes(a, perm)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _make(out.copy(), (a,), lambda g: (g.reshape(src),), "reshape")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat needs at least one tensor")
    ax = _norm_axis(axis, ts[0].ndim)
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {ts[0].shape} and {t.shape} on axis {axis}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def back(g):
        return tuple(np.take(g, range(bounds[k], bounds[k + 1]), axis=ax) for k in range(len(ts)))

    return _make(np.concatenate([t.data for t in ts], axis=ax), ts, back, "concat")


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice ``[start, stop)`` along one axis."""
    a = _as_tensor(a)
    ax = _norm_axis(axis, a.ndim)
    n = a.shape[ax]
    if not 0 <= start < stop <= n:
        raise ShapeError(f"slice [{start}:{stop}) out of range for axis of length {n}")
    idx = [slice(None)] * a.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _make(a.data[idx].copy(), (a,), back, "slice")


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    shape = a.shape
    if axis is not None:
        axis = tuple(_norm_axis(x, a.ndim) for x in np.atleast_1d(axis))

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), back, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        n = a.size
    else:
        n = int(np.prod([a.shape[_norm_axis(x, a.ndim)] for x in np.atleast_1d(axis)]))
    return mul(sum(a, axis, keepdims), 1.0 / n)


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtracted) along ``axis``."""
    a = _as_tensor(a)
    ax = _norm_axis(axis, a.ndim)
    z = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=ax, keepdims=True)
    return _make(y, (a,), lambda g: (y * (g - (g * y).sum(axis=ax, keepdims=True)),), "softmax")


def layer_norm(x, gamma, beta, axis: int = -1, eps: float = 1e-5, stat_axes: Optional[Sequence[int]] = None) -> Tensor:
    """Normalize to zero mean / unit variance, then scale and shift along ``axis``.

    Statistics are taken over ``stat_axes`` (default: just ``axis``).
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    ax = _norm_axis(axis, x.ndim)
    st = (ax,) if stat_axes is None else tuple(sorted({_norm_axis(a, x.ndim) for a in stat_axes}))
    if ax not in st:
        raise ShapeError(f"layer_norm: affine axis {axis} must be among the statistic axes {stat_axes}")
    n = x.shape[ax]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} must both be ({n},) for axis {axis} of {x.shape}"
        )
    bshape = [1] * x.ndim
    bshape[ax] = n
    gd = gamma.data.reshape(bshape)
    mu = x.data.mean(axis=st, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=st, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gd + beta.data.reshape(bshape)
    red = tuple(i for i in range(x.ndim) if i != ax)

    def back(g):
        dxhat = g * gd
        dx = rstd * (
            dxhat
            - dxhat.mean(axis=st, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=st, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _make(out, (x, gamma, beta), back, "layer_norm")
