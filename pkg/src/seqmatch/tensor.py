"""Dense-tensor engine with reverse-mode differentiation.

Tensors hold row-major numpy buffers. Every operation that sees a
gradient-requiring input appends a node to a thread-local tape; backward()
replays that tape in reverse, which is a valid topological order because
the tape records operations in execution order.

The engine runs in one of two precision modes: float32 for training and
inference, float64 for gradient-check suites. The mode is engine-wide
(per thread); tensors created under a mode keep its dtype.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

from .errors import ContractError, DegenerateMaskError, DimensionError

_DTYPES = {"float32": np.float32, "float64": np.float64}

# Additive offset for masked logits: large enough that exp() underflows to
# exactly zero after the max shift, small enough to stay finite.
_MASK_OFFSET = {
    np.dtype(np.float32): np.float32(1e9),
    np.dtype(np.float64): np.float64(1e30),
}


class _EngineState(threading.local):
    def __init__(self):
        self.dtype = np.float32
        self.tape = []
        self.grad_enabled = True


_STATE = _EngineState()


def set_precision(mode):
    """Set the engine-wide dtype: "float32" or "float64"."""
    if mode not in _DTYPES:
        raise ContractError(f"unknown precision mode {mode!r}")
    _STATE.dtype = _DTYPES[mode]


def get_precision():
    return "float64" if _STATE.dtype == np.float64 else "float32"


@contextlib.contextmanager
def precision(mode):
    """Temporarily switch the engine dtype."""
    old = get_precision()
    set_precision(mode)
    try:
        yield
    finally:
        set_precision(old)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording; tensors computed inside are frozen."""
    old = _STATE.grad_enabled
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = old


def tape_size():
    return len(_STATE.tape)


def clear_tape():
    _STATE.tape.clear()


class Tensor:
    """A dense n-dimensional array, optionally tracked for gradients."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else _STATE.dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)

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

    def item(self):
        return float(self.data.item())

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _result(data, inputs):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = _STATE.grad_enabled and any(t.requires_grad for t in inputs)
    return out


def _record(out, fn):
    if out.requires_grad:
        _STATE.tape.append((out, fn))


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to the target shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def backward(loss):
    """Populate .grad on every gradient-requiring tensor the loss depends on.

    The tape is consumed: it is cleared once the replay finishes.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ContractError("backward expects a scalar Tensor loss")
    if not loss.requires_grad:
        raise ContractError("backward: loss is not connected to a recorded tape")
    loss.grad = np.ones_like(loss.data)
    tape = _STATE.tape
    for out, fn in reversed(tape):
        if out.grad is not None:
            fn(out.grad)
    tape.clear()


# ---------------------------------------------------------------------------
# Elementwise operations
# ---------------------------------------------------------------------------


def _binary_data(a, b, opname):
    try:
        return np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise DimensionError(
            f"{opname}: operand shapes {a.data.shape} and {b.data.shape} do not align"
        ) from None


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_data(a, b, "add")
    out = _result(a.data + b.data, (a, b))

    def fn(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    _record(out, fn)
    return out


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_data(a, b, "sub")
    out = _result(a.data - b.data, (a, b))

    def fn(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    _record(out, fn)
    return out


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_data(a, b, "mul")
    out = _result(a.data * b.data, (a, b))

    def fn(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    _record(out, fn)
    return out


def neg(a):
    a = _as_tensor(a)
    out = _result(-a.data, (a,))

    def fn(g):
        _accumulate(a, -g)

    _record(out, fn)
    return out


def relu(a):
    a = _as_tensor(a)
    out = _result(np.maximum(a.data, 0), (a,))

    def fn(g):
        _accumulate(a, g * (a.data > 0))

    _record(out, fn)
    return out


def tanh(a):
    a = _as_tensor(a)
    y = np.tanh(a.data)
    out = _result(y, (a,))

    def fn(g):
        _accumulate(a, g * (1.0 - y * y))

    _record(out, fn)
    return out


def sigmoid(a):
    a = _as_tensor(a)
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = _result(y, (a,))

    def fn(g):
        _accumulate(a, g * y * (1.0 - y))

    _record(out, fn)
    return out


def exp(a):
    a = _as_tensor(a)
    y = np.exp(a.data)
    out = _result(y, (a,))

    def fn(g):
        _accumulate(a, g * y)

    _record(out, fn)
    return out


def log(a):
    a = _as_tensor(a)
    out = _result(np.log(a.data), (a,))

    def fn(g):
        _accumulate(a, g / a.data)

    _record(out, fn)
    return out


def absolute(a):
    a = _as_tensor(a)
    out = _result(np.abs(a.data), (a,))

    def fn(g):
        _accumulate(a, g * np.sign(a.data))

    _record(out, fn)
    return out


def clamp_min(a, floor):
    """Elementwise maximum with a constant floor (gradient 0 where clamped)."""
    a = _as_tensor(a)
    out = _result(np.maximum(a.data, floor), (a,))

    def fn(g):
        _accumulate(a, g * (a.data > floor))

    _record(out, fn)
    return out


# ---------------------------------------------------------------------------
# Linear algebra and shape surgery
# ---------------------------------------------------------------------------


def matmul(a, b):
    """Matrix product; supports equal leading batch dims on either operand."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(
            f"matmul needs 2-d or higher operands, got {a.shape} x {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ, {a.shape} x {b.shape}")
    try:
        data = a.data @ b.data
    except ValueError:
        raise DimensionError(f"matmul: batch extents differ, {a.shape} x {b.shape}") from None
    out = _result(data, (a, b))

    def fn(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape))

    _record(out, fn)
    return out


def concat(parts, axis=-1):
    parts = [_as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    out = _result(data, parts)
    sizes = [p.data.shape[axis] for p in parts]

    def fn(g):
        offsets = np.cumsum([0] + sizes)
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis if axis >= 0 else g.ndim + axis] = slice(lo, hi)
            _accumulate(p, g[tuple(idx)])

    _record(out, fn)
    return out


def stack(parts, axis=0):
    parts = [_as_tensor(p) for p in parts]
    out = _result(np.stack([p.data for p in parts], axis=axis), parts)

    def fn(g):
        for i, p in enumerate(parts):
            _accumulate(p, np.take(g, i, axis=axis))

    _record(out, fn)
    return out


def narrow(a, axis, start, length):
    """Contiguous slice [start, start+length) along one axis."""
    a = _as_tensor(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = _result(a.data[idx], (a,))

    def fn(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        _accumulate(a, full)

    _record(out, fn)
    return out


def select(a, axis, index):
    """Index one position along an axis, squeezing it away."""
    a = _as_tensor(a)
    out = _result(np.take(a.data, index, axis=axis), (a,))

    def fn(g):
        full = np.zeros_like(a.data)
        idx = [slice(None)] * a.ndim
        idx[axis] = index
        full[tuple(idx)] = g
        _accumulate(a, full)

    _record(out, fn)
    return out


def reshape(a, shape):
    a = _as_tensor(a)
    out = _result(a.data.reshape(shape), (a,))

    def fn(g):
        _accumulate(a, g.reshape(a.data.shape))

    _record(out, fn)
    return out


def swapaxes(a, ax1, ax2):
    a = _as_tensor(a)
    out = _result(a.data.swapaxes(ax1, ax2), (a,))

    def fn(g):
        _accumulate(a, g.swapaxes(ax1, ax2))

    _record(out, fn)
    return out


def tile_batch(a, reps):
    """Repeat a leading batch axis of extent 1 (gradient sums back)."""
    a = _as_tensor(a)
    if a.shape[0] != 1:
        raise DimensionError(f"tile_batch expects leading extent 1, got {a.shape}")
    out = _result(np.repeat(a.data, reps, axis=0), (a,))

    def fn(g):
        _accumulate(a, g.sum(axis=0, keepdims=True))

    _record(out, fn)
    return out


def gather_rows(table, ids):
    """Embedding lookup: rows of a 2-d table selected by an integer array."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise DimensionError(f"gather_rows expects a 2-d table, got {table.shape}")
    out = _result(table.data[ids], (table,))

    def fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        _accumulate(table, full)

    _record(out, fn)
    return out


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def sum_(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out = _result(a.data.sum(axis=axis, keepdims=keepdims), (a,))

    def fn(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape).astype(a.dtype, copy=False))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.data.shape))

    _record(out, fn)
    return out


def mean_(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    s = sum_(a, axis=axis, keepdims=keepdims)
    return mul(s, Tensor(np.asarray(1.0 / n, dtype=a.dtype)))


# ---------------------------------------------------------------------------
# Masked operations
# ---------------------------------------------------------------------------


def _mask_array(mask, dtype):
    data = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    return data.astype(dtype, copy=False)


def masked_softmax(scores, mask, axis=-1):
    """Softmax along `axis` restricted to positions where mask == 1.

    Masked positions receive exactly zero weight; the score values there
    cannot influence the result. Raises DegenerateMaskError if any slice
    along the axis is fully masked.
    """
    scores = _as_tensor(scores)
    m = _mask_array(mask, scores.dtype)
    try:
        m = np.broadcast_to(m, scores.shape)
    except ValueError:
        raise DimensionError(
            f"masked_softmax: mask {m.shape} does not broadcast to scores {scores.shape}"
        ) from None
    if np.any(m.sum(axis=axis) == 0):
        raise DegenerateMaskError("masked_softmax: a slice has every position masked")
    offset = _MASK_OFFSET[scores.dtype]
    shifted = scores.data + (m - 1.0) * offset
    shifted = shifted - shifted.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    y = ex / ex.sum(axis=axis, keepdims=True)
    out = _result(y, (scores,))

    def fn(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        _accumulate(scores, y * (g - inner))

    _record(out, fn)
    return out


def log_softmax(a, axis=-1):
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    out = _result(y, (a,))

    def fn(g):
        _accumulate(a, g - np.exp(y) * g.sum(axis=axis, keepdims=True))

    _record(out, fn)
    return out


def softmax(a, axis=-1):
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    y = ex / ex.sum(axis=axis, keepdims=True)
    out = _result(y, (a,))

    def fn(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        _accumulate(a, y * (g - inner))

    _record(out, fn)
    return out


def masked_pool(h, mask, kind):
    """Max or mean over the time axis, restricted to unmasked positions.

    Accepts (T, d) with mask (T,) or (B, T, d) with mask (B, T).
    """
    h = _as_tensor(h)
    m = _mask_array(mask, h.dtype)
    if h.ndim not in (2, 3) or m.shape != h.shape[:-1]:
        raise DimensionError(f"masked_pool: states {h.shape} vs mask {m.shape}")
    counts = m.sum(axis=-1)
    if np.any(counts == 0):
        raise DegenerateMaskError("masked_pool: empty sequence")
    if kind == "max":
        offset = _MASK_OFFSET[h.dtype]
        shifted = h.data + ((m - 1.0) * offset)[..., None]
        idx = shifted.argmax(axis=-2)
        out_data = np.take_along_axis(h.data, np.expand_dims(idx, -2), axis=-2)
        out = _result(out_data.squeeze(-2), (h,))

        def fn(g):
            full = np.zeros_like(h.data)
            np.put_along_axis(full, np.expand_dims(idx, -2), np.expand_dims(g, -2), axis=-2)
            _accumulate(h, full)

        _record(out, fn)
        return out
    if kind == "mean":
        weights = (m / counts[..., None])[..., None]
        out = _result((h.data * weights).sum(axis=-2), (h,))

        def fn(g):
            _accumulate(h, np.expand_dims(g, -2) * weights)

        _record(out, fn)
        return out
    raise ContractError(f"masked_pool: unknown kind {kind!r}")
