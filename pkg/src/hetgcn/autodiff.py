"""Dense tensors with tape-based reverse-mode differentiation.

Every primitive computes its forward value with numpy and, when a
:class:`Tape` is active and any input requires a gradient, appends a
closure that maps the output gradient to input gradients. ``backward``
replays the tape in reverse creation order, which is a valid reverse
topological order because a node can only be created after its inputs.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_state = threading.local()
_DTYPE = {"float64": np.float64, "float32": np.float32}
_default_dtype = np.float64


class ShapeError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


def set_default_dtype(name: str) -> None:
    """Switch the floating point precision used for new tensors ("float64" or "float32")."""
    global _default_dtype
    _default_dtype = _DTYPE[name]


def get_default_dtype():
    return _default_dtype


class Tensor:
    """A node in the computation graph.

    ``data`` is a numpy array; ``grad`` is filled by :func:`backward` for
    tensors that require it.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=_default_dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    # operator sugar for the few ops used inline
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of the primitive ops executed while the tape is active.

    Use as a context manager; nested tapes are not supported.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        if getattr(_state, "tape", None) is not None:
            raise RuntimeError("a tape is already recording")
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = None

    def __len__(self) -> int:
        return len(self.nodes)


def _current_tape() -> Tape | None:
    return getattr(_state, "tape", None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(out: np.ndarray, op: str) -> None:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced a non-finite value")


def _make(out: np.ndarray, parents: tuple[Tensor, ...], grad_fn, op: str) -> Tensor:
    _check_finite(out, op)
    t = Tensor(out)
    tape = _current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = parents
        t._backward = grad_fn
        tape.nodes.append(t)
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    """Hadamard product (with numpy broadcasting)."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                 "mul")


hadamard = mul


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid(a.data)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def smooth_l1(a) -> Tensor:
    """Elementwise smooth-l1 with transition point 1: 0.5 x^2 if |x| < 1 else |x| - 0.5."""
    a = as_tensor(a)
    x = a.data
    small = np.abs(x) < 1.0
    y = np.where(small, 0.5 * x * x, np.abs(x) - 0.5)
    dy = np.where(small, x, np.sign(x))
    return _make(y, (a,), lambda g: (g * dy,), "smooth_l1")


def detach(a) -> Tensor:
    """Same value, cut from the graph."""
    return Tensor(as_tensor(a).data.copy())


# ---------------------------------------------------------------- linear algebra / shape


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    """Concatenate along the last axis (or ``axis``)."""
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in ts)
        raise ShapeError(f"concat: incompatible shapes {shapes}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def grad_fn(g):
        return np.split(g, bounds, axis=axis)

    return _make(out, tuple(ts), grad_fn, "concat")


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def gather_rows(a, index) -> Tensor:
    """Select rows ``a[index]``; repeated indices accumulate in backward."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for shape {a.shape}")
    shape = a.shape

    def grad_fn(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), grad_fn, "gather_rows")


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def grad_fn(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[..., start:stop] = g
        return (out,)

    return _make(a.data[..., start:stop].copy(), (a,), grad_fn, "slice_cols")


def slice_rows(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def grad_fn(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[start:stop] = g
        return (out,)

    return _make(a.data[start:stop].copy(), (a,), grad_fn, "slice_rows")


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _make(np.asarray(a.data.sum()), (a,),
                 lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    return scale(sum_all(a), 1.0 / n) if n else Tensor(0.0)


def sum_axis(a, axis: int) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _make(a.data.sum(axis=axis), (a,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),), "sum_axis")


def mean_axis(a, axis: int) -> Tensor:
    a = as_tensor(a)
    return scale(sum_axis(a, axis), 1.0 / a.shape[axis])


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (a,), grad_fn, "softmax")


# ---------------------------------------------------------------- segment reductions


def segment_sum(a, segment_ids, n_segments: int) -> Tensor:
    """Sum rows of ``a`` into ``n_segments`` buckets given per-row segment ids."""
    a = as_tensor(a)
    ids = np.asarray(segment_ids, dtype=np.intp)
    if ids.shape[0] != a.shape[0]:
        raise ShapeError(f"segment_sum: {ids.shape[0]} ids for {a.shape[0]} rows")
    out = np.zeros((n_segments,) + a.shape[1:], dtype=a.data.dtype)
    np.add.at(out, ids, a.data)
    return _make(out, (a,), lambda g: (g[ids],), "segment_sum")


def segment_max(a, segment_ids, n_segments: int) -> Tensor:
    """Column-wise max of the rows in each segment; empty segments give zeros.

    Backward routes each output element's gradient to a single argmax row,
    the lowest row index among ties.
    """
    a = as_tensor(a)
    x = a.data
    ids = np.asarray(segment_ids, dtype=np.intp)
    if ids.shape[0] != x.shape[0] or x.ndim != 2:
        raise ShapeError(f"segment_max: {ids.shape[0]} ids for rows of shape {x.shape}")
    n_rows, width = x.shape
    out = np.full((n_segments, width), -np.inf, dtype=x.dtype)
    np.maximum.at(out, ids, x)
    empty = np.isneginf(out[:, 0]) if width else np.zeros(n_segments, bool)
    out[empty] = 0.0
    # argmax row per (segment, column): lowest index among rows equal to the max
    arg = np.full((n_segments, width), n_rows, dtype=np.intp)
    if n_rows:
        hit = x == out[ids]
        rows = np.broadcast_to(np.arange(n_rows)[:, None], x.shape)
        cand = np.where(hit, rows, n_rows)
        np.minimum.at(arg, ids, cand)
    cols = np.broadcast_to(np.arange(width), (n_segments, width))
    valid = ~empty

    def grad_fn(g):
        ga = np.zeros_like(x)
        ga[arg[valid], cols[valid]] = g[valid]
        return (ga,)

    return _make(out, (a,), grad_fn, "segment_max")


# ---------------------------------------------------------------- recurrent cell


def gru_cell(x, h, w_x, w_h, b_x, b_h) -> Tensor:
    """One GRU step with reset/update/new gate ordering.

    Shapes: x (n, in), h (n, H), w_x (in, 3H), w_h (H, 3H), b_x and b_h (3H,).

        r  = sigmoid(x Wxr + bxr + h Whr + bhr)
        z  = sigmoid(x Wxz + bxz + h Whz + bhz)
        n  = tanh(x Wxn + bxn + r * (h Whn + bhn))
        h' = (1 - z) * n + z * h
    """
    x, h, w_x, w_h, b_x, b_h = (as_tensor(t) for t in (x, h, w_x, w_h, b_x, b_h))
    hid = h.shape[1]
    if (w_x.shape != (x.shape[1], 3 * hid) or w_h.shape != (hid, 3 * hid)
            or b_x.shape != (3 * hid,) or b_h.shape != (3 * hid,) or x.shape[0] != h.shape[0]):
        raise ShapeError(
            f"gru_cell: x {x.shape}, h {h.shape}, w_x {w_x.shape}, w_h {w_h.shape}, "
            f"b_x {b_x.shape}, b_h {b_h.shape}")
    xd, hd = x.data, h.data
    gx = xd @ w_x.data + b_x.data
    gh = hd @ w_h.data + b_h.data
    r = _sigmoid(gx[:, :hid] + gh[:, :hid])
    z = _sigmoid(gx[:, hid:2 * hid] + gh[:, hid:2 * hid])
    ghn = gh[:, 2 * hid:]
    n = np.tanh(gx[:, 2 * hid:] + r * ghn)
    out = (1.0 - z) * n + z * hd

    def grad_fn(g):
        dn = g * (1.0 - z)
        dz = g * (hd - n)
        dn_pre = dn * (1.0 - n * n)
        dr = dn_pre * ghn
        dr_pre = dr * r * (1.0 - r)
        dz_pre = dz * z * (1.0 - z)
        dgx = np.concatenate([dr_pre, dz_pre, dn_pre], axis=1)
        dgh = np.concatenate([dr_pre, dz_pre, dn_pre * r], axis=1)
        dx = dgx @ w_x.data.T
        dh = dgh @ w_h.data.T + g * z
        return dx, dh, xd.T @ dgx, hd.T @ dgh, dgx.sum(axis=0), dgh.sum(axis=0)

    return _make(out, (x, h, w_x, w_h, b_x, b_h), grad_fn, "gru_cell")


# ---------------------------------------------------------------- backward


def backward(loss: Tensor, tape: Tape, params: Iterable[Tensor] = ()) -> dict[int, np.ndarray]:
    """Propagate d(loss)/d(node) through ``tape``.

    Gradients accumulate into ``.grad`` of every leaf that requires them.
    Parameters listed in ``params`` that are not on the path get a zero
    gradient. Returns a mapping ``id(param) -> grad`` for ``params``.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    params = list(params)
    for p in params:
        p.grad = np.zeros_like(p.data)
    if not loss.requires_grad:
        return {id(p): p.grad for p in params}

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is None:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
    return {id(p): p.grad for p in params}
