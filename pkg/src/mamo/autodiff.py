"""Reverse-mode automatic differentiation over numpy buffers.

A :class:`Tensor` wraps an ndarray plus an optional gradient slot.  Operations
applied while a :class:`Tape` is active append records; :func:`backward`
replays the records in reverse application order and accumulates gradients
additively into every reachable tensor that asked for them.

Broadcasting policy: elementwise ops require identical shapes, except a
size-1 tensor or a python number, which broadcasts as a scalar.  The only
other sanctioned broadcasts are the explicit ops ``add_bias`` (suffix-shape
add), ``add_constant`` (non-differentiated additive mask) and
``broadcast_to``.  Everything else raises :class:`ShapeMismatch` carrying
both shapes.
"""

from __future__ import annotations

import threading

import numpy as np


class ShapeMismatch(ValueError):
    """Raised when an op receives incompatible shapes; message carries both."""

    def __init__(self, op: str, *shapes):
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(tuple(s)) for s in shapes)}")
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)


class GradientError(RuntimeError):
    """Raised when backward hits a structural or numeric problem."""


class Tensor:
    """N-dimensional value with an optional gradient buffer.

    Immutable by convention after creation; only ``grad`` is written during a
    backward pass (and ``values`` by the optimizer, which owns its params).
    """

    __slots__ = ("values", "requires_grad", "grad", "_tracked")

    def __init__(self, values, requires_grad: bool = False, dtype=None):
        arr = np.asarray(values)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind in "iub":
            arr = arr.astype(np.float64)
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        # True once this tensor participates in the active tape, either as a
        # leaf that wants gradients or as an op output.
        self._tracked = self.requires_grad

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def size(self):
        return self.values.size

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        return float(self.values.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


def param(values, dtype=np.float32) -> Tensor:
    """A leaf tensor that collects gradients."""
    return Tensor(np.array(values, dtype=dtype), requires_grad=True)


# --- tape ------------------------------------------------------------------

_STATE = threading.local()


class _Record:
    __slots__ = ("op", "out", "backward")

    def __init__(self, op, out, backward):
        self.op = op
        self.out = out
        self.backward = backward


class Tape:
    """Ordered record of applied primitives, enough to replay gradients.

    One tape is single-threaded; independent tapes on other threads share no
    state (the active tape is thread-local).
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self):
        stack = getattr(_STATE, "stack", None)
        if stack is None:
            stack = _STATE.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _STATE.stack.pop()
        return False


class no_grad:
    """Context that suppresses recording; outputs become plain constants."""

    def __enter__(self):
        stack = getattr(_STATE, "stack", None)
        if stack is None:
            stack = _STATE.stack = []
        stack.append(None)
        return self

    def __exit__(self, *exc):
        _STATE.stack.pop()
        return False


def _active_tape():
    stack = getattr(_STATE, "stack", None)
    return stack[-1] if stack else None


def _emit(op: str, inputs, out_values, backward_fn) -> Tensor:
    """Wrap op output; record on the active tape when any input is tracked."""
    out = Tensor(out_values)
    tape = _active_tape()
    if tape is not None and any(t._tracked for t in inputs):
        out._tracked = True
        tape.records.append(_Record(op, out, backward_fn))
    return out


def _accumulate(tensor: Tensor, grad):
    if tensor.grad is None:
        tensor.grad = np.array(grad, dtype=tensor.values.dtype, copy=True)
    else:
        tensor.grad += grad


def backward(loss: Tensor, tape: Tape, nan_check: bool = True) -> None:
    """Populate ``grad`` for every tracked ancestor of a scalar loss.

    Walks the tape in reverse application order exactly once.  Tensors not on
    a path to the loss keep ``grad is None``, which is distinguishable from a
    zero gradient.
    """
    if loss.size != 1:
        raise GradientError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not np.all(np.isfinite(loss.values)):
        raise GradientError("backward requires a finite loss")
    _accumulate(loss, np.ones_like(loss.values))
    for rec in reversed(tape.records):
        g = rec.out.grad
        if g is None:
            continue
        for tensor, contribution in rec.backward(g):
            if not tensor._tracked:
                continue
            if nan_check and not np.all(np.isfinite(contribution)):
                raise GradientError(f"non-finite gradient produced by primitive '{rec.op}'")
            _accumulate(tensor, contribution)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# --- shape helpers ----------------------------------------------------------


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _is_scalar_operand(x) -> bool:
    return isinstance(x, (int, float)) or (isinstance(x, Tensor) and x.size == 1)


def _check_same_shape(op, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeMismatch(op, a.shape, b.shape)


def _reduce_to_scalar(g) -> np.ndarray:
    return np.sum(g, keepdims=True).reshape(())


# --- elementwise arithmetic --------------------------------------------------


def _binary(op, a, b, fwd, grad_a, grad_b) -> Tensor:
    """Shared same-shape / scalar-broadcast plumbing for + - * /."""
    a_scalar = _is_scalar_operand(a) and isinstance(b, Tensor) and b.size != 1
    b_scalar = _is_scalar_operand(b) and not a_scalar
    ta, tb = _as_tensor(a), _as_tensor(b)
    if not (a_scalar or b_scalar):
        _check_same_shape(op, ta, tb)
    av = ta.values.reshape(()) if (a_scalar and ta.size == 1) else ta.values
    bv = tb.values.reshape(()) if (b_scalar and tb.size == 1) else tb.values
    out = fwd(av, bv)

    def back(g):
        ga = grad_a(g, av, bv)
        gb = grad_b(g, av, bv)
        if a_scalar:
            ga = _reduce_to_scalar(ga).reshape(ta.shape)
        if b_scalar:
            gb = _reduce_to_scalar(gb).reshape(tb.shape)
        return ((ta, ga), (tb, gb))

    return _emit(op, (ta, tb), out, back)


def add(a, b) -> Tensor:
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b) -> Tensor:
    return _binary("div", a, b, lambda x, y: x / y,
                   lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


def neg(a: Tensor) -> Tensor:
    return _emit("neg", (a,), -a.values, lambda g: ((a, -g),))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x + b where b's shape is a suffix of x's (the documented row broadcast).

    Gradient for b sums over the leading axes.
    """
    if b.ndim > x.ndim or x.shape[x.ndim - b.ndim:] != b.shape:
        raise ShapeMismatch("add_bias", x.shape, b.shape)
    lead = tuple(range(x.ndim - b.ndim))

    def back(g):
        return ((x, g), (b, g.sum(axis=lead) if lead else g))

    return _emit("add_bias", (x, b), x.values + b.values, back)


def add_constant(x: Tensor, c: np.ndarray) -> Tensor:
    """x + c for a non-differentiated constant broadcastable to x's shape."""
    out = x.values + c
    if out.shape != x.shape:
        raise ShapeMismatch("add_constant", x.shape, np.shape(c))
    return _emit("add_constant", (x,), out, lambda g: ((x, g),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    """Explicit broadcast; gradient sums over expanded axes."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.values, shape)
    except ValueError as exc:
        raise ShapeMismatch("broadcast_to", x.shape, shape) from exc
    pad = len(shape) - x.ndim

    def back(g):
        axes = tuple(range(pad)) + tuple(
            i for i in range(pad, len(shape)) if x.shape[i - pad] != shape[i]
        )
        gx = g.sum(axis=axes, keepdims=True) if axes else g
        return ((x, gx.reshape(x.shape)),)

    return _emit("broadcast_to", (x,), np.ascontiguousarray(out), back)


# --- structural ops ----------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = x.values.reshape(shape)
    return _emit("reshape", (x,), out, lambda g: ((x, g.reshape(x.shape)),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.values.transpose(axes))
    return _emit("transpose", (x,), out, lambda g: ((x, g.transpose(inv)),))


def concat(parts, axis: int) -> Tensor:
    parts = list(parts)
    base = list(parts[0].shape)
    for p in parts[1:]:
        other = list(p.shape)
        if len(other) != len(base) or any(
            i != axis and other[i] != base[i] for i in range(len(base))
        ):
            raise ShapeMismatch("concat", parts[0].shape, p.shape)
    out = np.concatenate([p.values for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        pieces = np.split(g, splits, axis=axis)
        return tuple((p, piece) for p, piece in zip(parts, pieces))

    return _emit("concat", tuple(parts), out, back)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis; gradient zero-pads the complement."""
    if start < 0 or start + length > x.shape[axis]:
        raise ShapeMismatch("narrow", x.shape, (axis, start, length))
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def back(g):
        gx = np.zeros_like(x.values)
        gx[index] = g
        return ((x, gx),)

    return _emit("narrow", (x,), np.ascontiguousarray(x.values[index]), back)


def take_index(x: Tensor, axis: int, indices) -> Tensor:
    """Index-gather with one shared index list along an axis (may repeat)."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeMismatch("take_index", x.shape, idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[axis]):
        raise IndexError(f"take_index: index out of range for axis {axis} with extent {x.shape[axis]}")
    out = np.take(x.values, idx, axis=axis)

    def back(g):
        gx = np.zeros_like(x.values)
        np.add.at(gx, (slice(None),) * axis + (idx,), g)
        return ((x, gx),)

    return _emit("take_index", (x,), out, back)


def gather_positions(x: Tensor, positions) -> Tensor:
    """Per-row gather over sequence positions: [B,T,...] x [B,K] -> [B,K,...]."""
    pos = np.asarray(positions, dtype=np.intp)
    if pos.ndim != 2 or pos.shape[0] != x.shape[0]:
        raise ShapeMismatch("gather_positions", x.shape, pos.shape)
    if pos.size and (pos.min() < 0 or pos.max() >= x.shape[1]):
        raise IndexError(f"gather_positions: position out of range for sequence length {x.shape[1]}")
    rows = np.arange(x.shape[0])[:, None]
    out = x.values[rows, pos]

    def back(g):
        gx = np.zeros_like(x.values)
        np.add.at(gx, (rows, pos), g)
        return ((x, gx),)

    return _emit("gather_positions", (x,), np.ascontiguousarray(out), back)


def gather_bt(x: Tensor, batch_index, pos_index) -> Tensor:
    """Ragged gather: out[m] = x[batch_index[m], pos_index[m]] for flat index lists."""
    bi = np.asarray(batch_index, dtype=np.intp)
    ti = np.asarray(pos_index, dtype=np.intp)
    if bi.shape != ti.shape or bi.ndim != 1:
        raise ShapeMismatch("gather_bt", bi.shape, ti.shape)
    out = x.values[bi, ti]

    def back(g):
        gx = np.zeros_like(x.values)
        np.add.at(gx, (bi, ti), g)
        return ((x, gx),)

    return _emit("gather_bt", (x,), np.ascontiguousarray(out), back)


def scatter_positions(base: Tensor, positions, updates: Tensor) -> Tensor:
    """Copy of base with rows replaced per sample: out[b, positions[b,k]] = updates[b,k].

    Positions must be unique within each row.
    """
    pos = np.asarray(positions, dtype=np.intp)
    if pos.ndim != 2 or pos.shape[0] != base.shape[0]:
        raise ShapeMismatch("scatter_positions", base.shape, pos.shape)
    if pos.shape != updates.shape[:2] or base.shape[2:] != updates.shape[2:]:
        raise ShapeMismatch("scatter_positions", updates.shape, pos.shape)
    for row in pos:
        if len(np.unique(row)) != len(row):
            raise ValueError("scatter_positions: duplicate positions within a row")
    rows = np.arange(base.shape[0])[:, None]
    out = base.values.copy()
    out[rows, pos] = updates.values

    def back(g):
        g_base = g.copy()
        g_base[rows, pos] = 0.0
        return ((base, g_base), (updates, np.ascontiguousarray(g[rows, pos])))

    return _emit("scatter_positions", (base, updates), out, back)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup: out[..., :] = table[ids[...], :]; gradient scatter-adds."""
    idx = np.asarray(ids, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding: id out of range for table with {table.shape[0]} rows")
    out = table.values[idx]

    def back(g):
        gt = np.zeros_like(table.values)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return ((table, gt),)

    return _emit("embedding", (table,), out, back)


# --- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product on the last two axes.

    Accepts equal leading (batch) dims or a 2-D operand on either side; no
    other broadcasting.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    out = np.matmul(a.values, b.values)

    def back(g):
        bt = np.swapaxes(b.values, -1, -2)
        at = np.swapaxes(a.values, -1, -2)
        ga = np.matmul(g, bt)
        if ga.shape != a.shape:  # b carried batch dims a lacks
            ga = ga.sum(axis=tuple(range(ga.ndim - a.ndim)))
        gb = np.matmul(at, g)
        if gb.shape != b.shape:  # a carried batch dims b lacks
            gb = gb.sum(axis=tuple(range(gb.ndim - b.ndim)))
        return ((a, ga), (b, gb))

    return _emit("matmul", (a, b), out, back)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    return add_bias(out, b) if b is not None else out


# --- nonlinearities ------------------------------------------------------------

_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-form GELU: 0.5 x (1 + tanh(c (x + 0.044715 x^3)))."""
    v = x.values
    inner = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def back(g):
        sech2 = 1.0 - t * t
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return ((x, g * (0.5 * (1.0 + t) + 0.5 * v * sech2 * d_inner)),)

    return _emit("gelu", (x,), out, back)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.values)
    return _emit("exp", (x,), out, lambda g: ((x, g * out),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along one axis."""
    v = x.values
    shifted = v - v.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((x, y * (g - dot)),)

    return _emit("softmax", (x,), y, back)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    if gain.shape != x.shape[-1:] or shift.shape != x.shape[-1:]:
        raise ShapeMismatch("layer_norm", x.shape, gain.shape)
    v = x.values
    d = v.shape[-1]
    mu = v.mean(axis=-1, keepdims=True)
    centered = v - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.values + shift.values

    def back(g):
        lead = tuple(range(v.ndim - 1))
        g_gain = (g * xhat).sum(axis=lead)
        g_shift = g.sum(axis=lead)
        gx_hat = g * gain.values
        gx = inv * (gx_hat
                    - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return ((x, gx), (gain, g_gain), (shift, g_shift))

    return _emit("layer_norm", (x, gain, shift), out, back)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Rows scaled to unit Euclidean norm along the last axis."""
    v = x.values
    norm = np.sqrt((v * v).sum(axis=-1, keepdims=True) + eps)
    y = v / norm

    def back(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return ((x, (g - y * dot) / norm),)

    return _emit("l2_normalize", (x,), y, back)


# --- reductions and losses ------------------------------------------------------


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.values.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            return ((x, np.broadcast_to(g, x.shape).copy()),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return ((x, np.broadcast_to(g_exp, x.shape).copy()),)

    return _emit("sum", (x,), out, back)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    out = x.values.mean(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            return ((x, np.broadcast_to(g / n, x.shape).copy()),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return ((x, np.broadcast_to(g_exp / n, x.shape).copy()),)

    return _emit("mean", (x,), out, back)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over every entry."""
    _check_same_shape("mse", pred, target)
    diff = pred.values - target.values
    out = np.array((diff * diff).mean() if diff.size else 0.0)
    scale = 2.0 / max(diff.size, 1)

    def back(g):
        gd = g * scale * diff
        return ((pred, gd), (target, -gd))

    return _emit("mse", (pred, target), out, back)


def mae(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error over every entry; subgradient 0 at ties."""
    _check_same_shape("mae", pred, target)
    diff = pred.values - target.values
    out = np.array(np.abs(diff).mean() if diff.size else 0.0)
    scale = 1.0 / max(diff.size, 1)

    def back(g):
        gd = g * scale * np.sign(diff)
        return ((pred, gd), (target, -gd))

    return _emit("mae", (pred, target), out, back)


def cross_entropy(logits: Tensor, target_ids) -> Tensor:
    """Mean of -log softmax(logits)[target] over rows; logits are [N, C]."""
    if logits.ndim != 2:
        raise ShapeMismatch("cross_entropy", logits.shape, ("N", "C"))
    ids = np.asarray(target_ids, dtype=np.intp)
    if ids.shape != (logits.shape[0],):
        raise ShapeMismatch("cross_entropy", logits.shape, ids.shape)
    if ids.size == 0:
        return _emit("cross_entropy", (logits,), np.array(0.0), lambda g: ((logits, np.zeros_like(logits.values)),))
    if ids.min() < 0 or ids.max() >= logits.shape[1]:
        raise IndexError(f"cross_entropy: target id out of range for {logits.shape[1]} classes")
    v = logits.values
    shifted = v - v.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    rows = np.arange(v.shape[0])
    nll = -(shifted[rows, ids] - np.log(e.sum(axis=1)))
    out = np.array(nll.mean())

    def back(g):
        gl = probs.copy()
        gl[rows, ids] -= 1.0
        return ((logits, g * gl / v.shape[0]),)

    return _emit("cross_entropy", (logits,), out, back)


PRIMITIVES = (
    "add", "sub", "mul", "div", "neg", "add_bias", "add_constant", "broadcast_to",
    "reshape", "transpose", "concat", "narrow", "take_index", "gather_positions",
    "gather_bt", "scatter_positions", "embedding", "matmul", "gelu", "exp",
    "softmax", "layer_norm", "l2_normalize", "sum_", "mean", "mse", "mae",
    "cross_entropy",
)


def primitive_set() -> tuple[str, ...]:
    """Names of the differentiable primitives this module provides."""
    return PRIMITIVES
