"""Dense float64 tensors with a reverse-mode gradient tape.

Operations record themselves on the active :class:`Tape` whenever at least one
input requires a gradient. ``backward`` replays the tape once, in reverse.

>>> x = Tensor([3.0], requires_grad=True)
>>> with Tape():
...     y = (x * x).sum()
...     backward(y)
>>> float(x.grad[0])
6.0
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np


class ShapeMismatch(ValueError):
    pass


class NonScalarLoss(ValueError):
    pass


class TapeError(RuntimeError):
    pass


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Append-only record of differentiable operations.

    Use as a context manager; nesting is allowed and the innermost tape wins.
    A tape may be replayed by :func:`backward` exactly once.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)


class _Node:
    __slots__ = ("op", "inputs", "output", "grad_fn")

    def __init__(self, op: str, inputs: Sequence["Tensor"], output: "Tensor", grad_fn: Callable) -> None:
        self.op = op
        self.inputs = inputs
        self.output = output
        self.grad_fn = grad_fn


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False) -> None:
        arr = np.array(data, dtype=np.float64, copy=True) if not isinstance(data, np.ndarray) else data
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # operator sugar
    def __add__(self, other) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other) -> "Tensor":
        return sub(_as_tensor(other), self)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        return div(self, other)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mean(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, grad_fn: Callable) -> Tensor:
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape = tape
        tape.nodes.append(_Node(op, tuple(inputs), out, grad_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _record("add", (a, b), a.data + b.data, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _record("sub", (a, b), a.data - b.data, lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _record("mul", (a, b), ad * bd, lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _record(
        "div", (a, b), out, lambda g: (_unbroadcast(g / bd, a.shape), _unbroadcast(-g * out / bd, b.shape))
    )


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    out = _stable_sigmoid(x.data)
    return _record("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def log_sigmoid(x: Tensor) -> Tensor:
    z = x.data
    out = np.minimum(z, 0.0) - np.log1p(np.exp(-np.abs(z)))
    return _record("log_sigmoid", (x,), out, lambda g: (g * _stable_sigmoid(-z),))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _record("log", (x,), np.log(xd), lambda g: (g / xd,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _record("exp", (x,), out, lambda g: (g * out,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return _record("clip", (x,), np.clip(x.data, lo, hi), lambda g: (g * inside,))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _record("square", (x,), xd * xd, lambda g: (2.0 * g * xd,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _record("sqrt", (x,), out, lambda g: (g * 0.5 / out,))


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: surviving entries are scaled by ``1 / (1 - rate)``."""
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a random generator")
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep) / keep
    return _record("dropout", (x,), x.data * mask, lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# linear algebra and reductions
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _record("matmul", (a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _record("sum", (x,), np.array(x.data.sum()), lambda g: (np.broadcast_to(g, shape).copy(),))


def sum_rows(x: Tensor) -> Tensor:
    """Sum over the last axis, keeping it as width 1."""
    return _record("sum_rows", (x,), x.data.sum(axis=-1, keepdims=True), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    shape = x.shape
    return _record("mean", (x,), np.array(x.data.mean()), lambda g: (np.broadcast_to(g / n, shape).copy(),))


def broadcast(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeMismatch(f"broadcast: cannot broadcast {x.shape} to {shape}") from None
    return _record("broadcast", (x,), out, lambda g: (_unbroadcast(g, x.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (default: feature columns)."""
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeMismatch("concat: no inputs")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeMismatch(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _record("concat", tensors, out, grad_fn)


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    return concat(tensors, axis=0)


def row_gather(x: Tensor, index) -> Tensor:
    idx = np.asarray(index, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeMismatch(f"row_gather: index out of range for {x.shape[0]} rows")
    shape = x.shape

    def grad_fn(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _record("row_gather", (x,), x.data[idx], grad_fn)


def segment_sum(values: Tensor, segment_ids, n_segments: int) -> Tensor:
    """Sum rows of ``values`` sharing a segment id; empty segments give zero rows."""
    ids = np.asarray(segment_ids, dtype=np.int64)
    if ids.shape[0] != values.shape[0]:
        raise ShapeMismatch(f"segment_sum: {values.shape[0]} rows but {ids.shape[0]} segment ids")
    out = np.zeros((n_segments,) + values.shape[1:])
    np.add.at(out, ids, values.data)
    return _record("segment_sum", (values,), out, lambda g: (g[ids],))


def segment_max(values: Tensor, segment_ids, n_segments: int) -> Tensor:
    """Column-wise max of each segment's rows; empty segments give zero rows.

    The gradient flows to the first row attaining the maximum.
    """
    ids = np.asarray(segment_ids, dtype=np.int64)
    if ids.shape[0] != values.shape[0]:
        raise ShapeMismatch(f"segment_max: {values.shape[0]} rows but {ids.shape[0]} segment ids")
    v = values.data
    width = v.shape[1]
    out = np.full((n_segments, width), -np.inf)
    np.maximum.at(out, ids, v)
    present = np.zeros(n_segments, dtype=bool)
    present[ids] = True
    out[~present] = 0.0

    # winner row per (segment, column): first row index that attains the max
    winner = np.full((n_segments, width), -1, dtype=np.int64)
    hits = v == out[ids]
    for col in range(width):
        rows = np.nonzero(hits[:, col])[0]
        segs = ids[rows]
        # iterate in reverse so the smallest row index is written last
        winner[segs[::-1], col] = rows[::-1]

    def grad_fn(g):
        grad = np.zeros_like(v)
        seg_idx, col_idx = np.nonzero(winner >= 0)
        grad[winner[seg_idx, col_idx], col_idx] = g[seg_idx, col_idx]
        return (grad,)

    return _record("segment_max", (values,), out, grad_fn)


def max_over_rows(x: Tensor) -> Tensor:
    return segment_max(x, np.zeros(x.shape[0], dtype=np.int64), 1)


def where(mask, a: Tensor, b: Tensor) -> Tensor:
    """Select ``a`` where ``mask`` is true, else ``b`` (mask is a constant)."""
    a, b = _as_tensor(a), _as_tensor(b)
    m = np.asarray(mask, dtype=bool)
    out = np.where(m, a.data, b.data)
    return _record(
        "where", (a, b), out, lambda g: (_unbroadcast(np.where(m, g, 0.0), a.shape), _unbroadcast(np.where(m, 0.0, g), b.shape))
    )


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every gradient-requiring leaf reachable from ``loss``.

    Leaf gradients accumulate; intermediate gradients are not retained.
    """
    if loss.data.size != 1:
        raise NonScalarLoss(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    if tape is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    if tape.consumed:
        raise TapeError("backward already ran on this tape")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.grad_fn(g)
        for t, tg in zip(node.inputs, in_grads):
            if not t.requires_grad or tg is None:
                continue
            if t.tape is None:  # leaf
                t.grad = tg.copy() if t.grad is None else t.grad + tg
            else:
                key = id(t)
                grads[key] = grads[key] + tg if key in grads else tg
