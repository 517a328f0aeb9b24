"""Dense tensors with tape-based reverse-mode automatic differentiation.

Every op is a plain function over :class:`Tensor` objects. When a :class:`Tape`
is active on the current thread and at least one input is tracked, the op
appends a record holding its inputs, outputs and a closure that maps output
adjoints to input adjoints. Without an active tape the ops are thin wrappers
around numpy and record nothing, which is how inference runs.

    >>> W = parameter(np.eye(2))
    >>> with Tape() as tape:
    ...     loss = sum_(linear(tensor([1.0, 2.0]), W))
    >>> backward(tape, loss)[W]
    array([[1., 2.],
           [1., 2.]])
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit, ndtr

__all__ = [
    "NonFiniteError",
    "Tape",
    "Tensor",
    "abs_",
    "add",
    "backward",
    "clamp_min",
    "clip_global_norm",
    "concat",
    "div",
    "dropout",
    "expm1",
    "gelu",
    "get_default_dtype",
    "getitem",
    "global_norm",
    "linear",
    "log1p",
    "lstm_cell",
    "lstm_sequence",
    "matmul",
    "mean",
    "mul",
    "neg",
    "parameter",
    "reshape",
    "set_default_dtype",
    "sigmoid",
    "softmax",
    "stack",
    "sub",
    "sum_",
    "tanh",
    "tensor",
    "transpose",
]

_DTYPE = np.float64
CHECK_FINITE = True

_local = threading.local()


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


def set_default_dtype(dtype) -> None:
    """Select float64 (default) or float32 for newly created tensors."""
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float64, np.float32):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype.type


def get_default_dtype():
    return _DTYPE


class Tensor:
    __slots__ = ("data", "requires_grad", "node_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, np.ndarray) and dtype is None and data.dtype.kind == "f":
            self.data = data
        else:
            self.data = np.asarray(data, dtype=dtype or _DTYPE)
        self.requires_grad = requires_grad
        self.node_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

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

    def __getitem__(self, index):
        return getitem(self, index)


def tensor(data, dtype=None) -> Tensor:
    """A constant (untracked) tensor."""
    return Tensor(np.array(data, dtype=dtype or _DTYPE))


def parameter(data, dtype=None) -> Tensor:
    """A leaf tensor whose gradient :func:`backward` reports."""
    return Tensor(np.array(data, dtype=dtype or _DTYPE), requires_grad=True)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DTYPE))


# --------------------------------------------------------------------------
# tape


class _Record:
    __slots__ = ("inputs", "outputs", "backward_fn", "tracked")

    def __init__(self, inputs, outputs, backward_fn, tracked):
        self.inputs = inputs
        self.outputs = outputs
        self.backward_fn = backward_fn
        self.tracked = tracked


class Tape:
    """Ordered record of primitive ops for one forward pass.

    Use as a context manager; tapes nest per thread and must not be shared
    between threads.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.records)


def active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class no_grad:
    """Suspend recording inside the block."""

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(None)

    def __exit__(self, *exc):
        _local.stack.pop()


def _check(arr: np.ndarray, name: str) -> np.ndarray:
    if CHECK_FINITE and not np.isfinite(arr).all():
        raise NonFiniteError(f"{name} produced non-finite values")
    return arr


def _record(name: str, inputs: Sequence, out_arrays, backward_fn: Callable):
    """Wrap output arrays as tensors and append a tape record if needed."""
    single = not isinstance(out_arrays, (tuple, list))
    arrays = (out_arrays,) if single else tuple(out_arrays)
    arrays = tuple(np.asarray(a) for a in arrays)
    outs = tuple(Tensor(_check(a, name)) for a in arrays)
    tape = active_tape()
    if tape is not None:
        tracked = tuple(isinstance(x, Tensor) and x.requires_grad for x in inputs)
        if any(tracked):
            node = len(tape.records)
            for o in outs:
                o.requires_grad = True
                o.node_id = node
            tape.records.append(_Record(tuple(inputs), outs, backward_fn, tracked))
    return outs[0] if single else outs


def backward(tape: Tape, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict:
    """Reverse sweep over ``tape`` from a scalar ``loss``.

    Returns a dict mapping each leaf tensor reached by the sweep to its
    gradient. Tensors listed in ``params`` are always present (zeros when the
    loss does not depend on them).
    """
    if tape.consumed:
        raise RuntimeError("backward already ran on this tape")
    if loss.data.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    nid = loss.node_id
    if nid is None or nid >= len(tape.records) or not any(
        o is loss for o in tape.records[nid].outputs
    ):
        raise ValueError("loss was not produced on this tape")
    tape.consumed = True

    adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records[: nid + 1]):
        gouts = [adj.pop(id(o), None) for o in rec.outputs]
        if all(g is None for g in gouts):
            continue
        gouts = [np.zeros_like(o.data) if g is None else g for o, g in zip(rec.outputs, gouts)]
        gins = rec.backward_fn(*gouts)
        for x, g, tr in zip(rec.inputs, gins, rec.tracked):
            if not tr or g is None:
                continue
            key = id(x)
            if x.node_id is None:
                leaves[key] = x
            prev = adj.get(key)
            adj[key] = g if prev is None else prev + g
    grads = {leaves[k]: adj[k] for k in leaves if k in adj}
    if params is not None:
        for p in params:
            if p not in grads:
                grads[p] = np.zeros_like(p.data)
    return grads


def global_norm(grads: Mapping | Iterable) -> float:
    values = grads.values() if isinstance(grads, Mapping) else grads
    return float(np.sqrt(sum(float(np.sum(np.square(g))) for g in values)))


def clip_global_norm(grads, c: float):
    """Scale all gradients by ``c / g`` when their global L2 norm ``g`` exceeds ``c``."""
    if c <= 0:
        raise ValueError("clip threshold must be positive")
    g = global_norm(grads)
    if g <= c:
        return grads
    scale = c / g
    if isinstance(grads, Mapping):
        return {k: v * scale for k, v in grads.items()}
    return [v * scale for v in grads]


# --------------------------------------------------------------------------
# elementwise


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _record(
        "add", (a, b), a.data + b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _record(
        "sub", (a, b), a.data - b.data,
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _record(
        "mul", (a, b), a.data * b.data,
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data

    def bw(g):
        gb = -g * out / b.data
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(gb, b.shape)

    return _record("div", (a, b), out, bw)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _record("neg", (a,), -a.data, lambda g: (-g,))


def abs_(a) -> Tensor:
    a = _as_tensor(a)
    return _record("abs", (a,), np.abs(a.data), lambda g: (g * np.sign(a.data),))


def clamp_min(a, lo: float = 0.0) -> Tensor:
    a = _as_tensor(a)
    keep = a.data > lo
    return _record("clamp_min", (a,), np.where(keep, a.data, lo), lambda g: (g * keep,))


def clamp_min_straight(a, lo: float = 0.0) -> Tensor:
    """Clamp in the forward pass, identity in the backward pass."""
    a = _as_tensor(a)
    return _record("clamp_min_straight", (a,), np.maximum(a.data, lo), lambda g: (g,))


def expm1(a) -> Tensor:
    a = _as_tensor(a)
    out = np.expm1(a.data)
    return _record("expm1", (a,), out, lambda g: (g * (out + 1.0),))


def log1p(a) -> Tensor:
    a = _as_tensor(a)
    return _record("log1p", (a,), np.log1p(a.data), lambda g: (g / (1.0 + a.data),))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = expit(a.data)
    return _record("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _record("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the standard normal CDF."""
    a = _as_tensor(a)
    x = a.data
    cdf = ndtr(x)
    out = x * cdf

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _record("gelu", (a,), out, bw)


def softmax(a, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is False get weight 0.

    Every slice must keep at least one unmasked entry.
    """
    a = _as_tensor(a)
    x = a.data
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _record("softmax", (a,), out, bw)


def dropout(a, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout. Identity (the same object) in eval mode or when p == 0."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    a = _as_tensor(a)
    if not training or p == 0.0:
        return a
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    keep = keep.astype(a.data.dtype)
    return _record("dropout", (a,), a.data * keep, lambda g: (g * keep,))


# --------------------------------------------------------------------------
# reductions and shape


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum", (a,), np.asarray(out), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    return _record("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    inv = np.argsort(axes)
    return _record("transpose", (a,), np.transpose(a.data, axes), lambda g: (np.transpose(g, inv),))


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a, index) -> Tensor:
    a = _as_tensor(a)
    basic = _is_basic(index)
    out = a.data[index]

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _record("getitem", (a,), np.array(out, copy=not basic) if basic else out, bw)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _record("concat", ts, out, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _record("stack", ts, out, bw)


# --------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Batched ``a @ b`` for operands with at least two dimensions."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands need at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record("matmul", (a, b), a.data @ b.data, bw)


def linear(x, W, b=None) -> Tensor:
    """``y = x W^T (+ b)`` over the last axis of ``x``; ``W`` is (out, in)."""
    x, W = _as_tensor(x), _as_tensor(W)
    if W.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise ValueError(f"linear shape mismatch: x {x.shape}, W {W.shape}")
    out = x.data @ W.data.T
    inputs = [x, W]
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (W.shape[0],):
            raise ValueError(f"bias shape {b.shape} does not match W {W.shape}")
        out = out + b.data
        inputs.append(b)

    def bw(g):
        g2 = g.reshape(-1, W.shape[0])
        x2 = x.data.reshape(-1, W.shape[1])
        grads = [g @ W.data, g2.T @ x2]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _record("linear", inputs, out, bw)


# --------------------------------------------------------------------------
# LSTM
#
# Gate layout along the 4H axis is (input, forget, candidate, output).


_GATE_AFFINE: dict = {}


def _gate_affine(H: int, dtype):
    key = (H, np.dtype(dtype).str)
    if key not in _GATE_AFFINE:
        scale = np.full(4 * H, 0.5, dtype)
        scale[2 * H : 3 * H] = 1.0
        offset = np.full(4 * H, 0.5, dtype)
        offset[2 * H : 3 * H] = 0.0
        _GATE_AFFINE[key] = (scale, offset)
    return _GATE_AFFINE[key]


def _gates(pre: np.ndarray, H: int) -> np.ndarray:
    """Gate activations in place of the pre-activations (..., 4H).

    The sigmoids use sigmoid(x) = (1 + tanh(x / 2)) / 2 so a single tanh call
    covers all four gates (scipy's expit is several times slower).
    """
    scale, offset = _gate_affine(H, pre.dtype)
    pre *= scale
    g = np.tanh(pre, out=pre)
    g *= scale
    g += offset
    return g


def _gate_slopes(g: np.ndarray, H: int) -> np.ndarray:
    d = g * (1.0 - g)
    cand = g[..., 2 * H : 3 * H]
    d[..., 2 * H : 3 * H] = 1.0 - cand * cand
    return d


def _lstm_forward(pre: np.ndarray, c_prev: np.ndarray):
    H = c_prev.shape[-1]
    g = _gates(pre, H)
    c = g[..., H : 2 * H] * c_prev + g[..., :H] * g[..., 2 * H : 3 * H]
    tc = np.tanh(c)
    h = g[..., 3 * H :] * tc
    return h, c, g, tc


def _lstm_backward(gh, gc, c_prev, g, tc, slope, out):
    """Adjoints of one cell step. Writes d(pre-activation) into ``out`` and
    returns d(c_prev)."""
    H = c_prev.shape[-1]
    gc = gc + gh * g[..., 3 * H :] * (1.0 - tc * tc)
    out[..., :H] = gc * g[..., 2 * H : 3 * H]
    out[..., H : 2 * H] = gc * c_prev
    out[..., 2 * H : 3 * H] = gc * g[..., :H]
    out[..., 3 * H :] = gh * tc
    out *= slope
    return gc * g[..., H : 2 * H]


def lstm_cell(x, h, c, W_ih, W_hh, b):
    """One LSTM step. Returns ``(h_new, c_new)``."""
    x, h, c, W_ih, W_hh, b = map(_as_tensor, (x, h, c, W_ih, W_hh, b))
    H = W_hh.shape[1]
    if W_ih.shape != (4 * H, x.shape[-1]) or W_hh.shape != (4 * H, H) or b.shape != (4 * H,):
        raise ValueError("lstm weight shapes inconsistent")
    pre = x.data @ W_ih.data.T + h.data @ W_hh.data.T + b.data
    h_new, c_new, g, tc = _lstm_forward(pre, c.data)

    def bw(gh, gc):
        d_pre = np.empty_like(g)
        dc = _lstm_backward(gh, gc, c.data, g, tc, _gate_slopes(g, H), d_pre)
        d2 = d_pre.reshape(-1, 4 * H)
        return (
            d_pre @ W_ih.data,
            d_pre @ W_hh.data,
            dc,
            d2.T @ x.data.reshape(-1, x.shape[-1]),
            d2.T @ h.data.reshape(-1, H),
            d2.sum(axis=0),
        )

    return _record("lstm_cell", (x, h, c, W_ih, W_hh, b), (h_new, c_new), bw)


def lstm_sequence(x, W_ih, W_hh, b, h0=None, c0=None):
    """Run an LSTM over axis 1 of ``x`` (batch, steps, in).

    Returns ``(h_all, h_last, c_last)`` with ``h_all`` of shape
    (batch, steps, H). Initial states default to zeros.
    """
    x, W_ih, W_hh, b = map(_as_tensor, (x, W_ih, W_hh, b))
    n, S, _ = x.shape
    H = W_hh.shape[1]
    if W_ih.shape != (4 * H, x.shape[-1]) or W_hh.shape != (4 * H, H) or b.shape != (4 * H,):
        raise ValueError("lstm weight shapes inconsistent")
    dtype = x.data.dtype
    h0 = _as_tensor(np.zeros((n, H), dtype) if h0 is None else h0)
    c0 = _as_tensor(np.zeros((n, H), dtype) if c0 is None else c0)

    # time-major buffers keep every per-step slice contiguous
    xw = np.ascontiguousarray(np.swapaxes(x.data, 0, 1)) @ W_ih.data.T + b.data  # (S, n, 4H)
    Wt = W_hh.data.T
    hs = np.empty((S, n, H), dtype)
    cs = np.empty((S, n, H), dtype)
    tcs = np.empty((S, n, H), dtype)
    h, c = h0.data, c0.data
    for t in range(S):
        pre = xw[t]
        pre += h @ Wt
        h, c, _, tc = _lstm_forward(pre, c)
        hs[t], cs[t], tcs[t] = h, c, tc
    gates = xw  # overwritten in place by the activations

    def bw(g_all, g_hl, g_cl):
        slopes = _gate_slopes(gates, H)
        d_pre = np.empty((S, n, 4 * H), dtype)
        g_all = np.swapaxes(g_all, 0, 1)
        gh = g_hl.copy()
        gc = g_cl.copy()
        W = W_hh.data
        for t in range(S - 1, -1, -1):
            gh = gh + g_all[t]
            c_prev = cs[t - 1] if t else c0.data
            gc = _lstm_backward(gh, gc, c_prev, gates[t], tcs[t], slopes[t], d_pre[t])
            gh = d_pre[t] @ W
        h_prev = np.concatenate([h0.data[None], hs[:-1]], axis=0)
        d2 = d_pre.reshape(-1, 4 * H)
        return (
            np.swapaxes(d_pre @ W_ih.data, 0, 1),
            d2.T @ np.swapaxes(x.data, 0, 1).reshape(-1, x.shape[-1]),
            d2.T @ h_prev.reshape(-1, H),
            d2.sum(axis=0),
            gh,
            gc,
        )

    h_all = np.ascontiguousarray(np.swapaxes(hs, 0, 1))
    return _record(
        "lstm_sequence", (x, W_ih, W_hh, b, h0, c0), (h_all, hs[-1].copy(), cs[-1].copy()), bw
    )
