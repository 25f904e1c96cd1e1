"""Dense float64 tensors with a define-by-run reverse-mode tape.

Every differentiable op appends one record to the thread's current tape.
``backward`` walks that tape in exact reverse order, fills ``.grad`` on
every participating tensor that requires it, then clears the tape.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
LAYER_NORM_EPS = 1e-5


class ShapeError(ValueError):
    pass


class _Record:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered list of recorded operations."""

    def __init__(self):
        self.records: list[_Record] = []
        self.enabled = True

    def __len__(self):
        return len(self.records)

    def record(self, inputs, output, backward):
        self.records.append(_Record(tuple(inputs), output, backward))

    def clear(self):
        self.records.clear()


_local = threading.local()


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


@contextlib.contextmanager
def no_grad():
    tape = current_tape()
    prev = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = prev


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.array(values, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values)

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    tape = current_tape()
    needs = tape.enabled and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.values = values
    out.requires_grad = needs
    out.grad = None
    out.name = None
    if needs:
        tape.record(inputs, out, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.values + b.values, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.values - b.values, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def back(g):
        return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)

    return _make(a.values * b.values, (a, b), back)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.values * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    # -inf inputs (masked attention rows) map to exactly 0 with zero gradient
    active = a.values > 0
    return _make(np.where(active, a.values, 0.0), (a,), lambda g: (g * active,))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.values, -1, -2))
        gb = np.matmul(np.swapaxes(a.values, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(np.matmul(a.values, b.values), (a, b), back)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.values, axes), (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _make(a.values.reshape(shape), (a,), lambda g: (g.reshape(old),))


def flatten(a: Tensor, start_axis: int = 1) -> Tensor:
    """Collapse every axis from ``start_axis`` on into one."""
    return reshape(a, a.shape[:start_axis] + (-1,))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.values for t in tensors], axis=axis), tensors, back)


def take(a: Tensor, indices, axis: int) -> Tensor:
    """Select positions along ``axis`` (indices may repeat)."""
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % a.ndim

    def back(g):
        out = np.zeros(a.shape, dtype=DTYPE)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (out,)

    return _make(np.take(a.values, indices, axis=axis), (a,), back)


def embedding_gather(table: Tensor, indices, frozen_rows: Iterable[int] = ()) -> Tensor:
    """Row lookup ``table[indices]``; ``frozen_rows`` never receive gradient."""
    indices = np.asarray(indices, dtype=np.intp)
    if table.ndim != 2:
        raise ShapeError(f"embedding_gather: table must be 2-D, got {table.shape}")
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise IndexError(f"embedding index out of range for table of {table.shape[0]} rows")
    frozen = np.fromiter(frozen_rows, dtype=np.intp)

    def back(g):
        out = np.zeros(table.shape, dtype=DTYPE)
        np.add.at(out, indices.reshape(-1), g.reshape(-1, table.shape[1]))
        out[frozen] = 0.0
        return (out,)

    return _make(table.values[indices], (table,), back)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.values.sum(axis=axis, keepdims=keepdims), dtype=DTYPE), (a,), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.values.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------- attention pieces


def masked_softmax(logits: Tensor, mask) -> Tensor:
    """Softmax over the last axis of ``logits + mask``.

    ``mask`` is additive with entries in {0, -inf}. A row with no finite
    entry produces an all-zero row instead of NaN.
    """
    mask = np.asarray(mask.values if isinstance(mask, Tensor) else mask, dtype=DTYPE)
    try:
        z = logits.values + mask
    except ValueError:
        raise ShapeError(f"masked_softmax: logits {logits.shape} vs mask {mask.shape}") from None
    if z.shape != logits.shape:
        raise ShapeError(f"masked_softmax: mask {mask.shape} does not fit logits {logits.shape}")
    finite = np.isfinite(z)
    row_max = np.max(np.where(finite, z, -np.inf), axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.where(finite, np.exp(np.where(finite, z - row_max, 0.0)), 0.0)
    total = e.sum(axis=-1, keepdims=True)
    y = np.divide(e, total, out=np.zeros_like(e), where=total > 0)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (logits,), back)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Plain (untaped) numerically stable softmax for inference."""
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    mu = x.values.mean(axis=-1, keepdims=True)
    xc = x.values - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    d = x.shape[-1]

    def back(g):
        gx_hat = g * gain.values
        gx = inv / d * (d * gx_hat - gx_hat.sum(-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _make(xhat * gain.values + bias.values, (x, gain, bias), back)


# ---------------------------------------------------------------- loss


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Mean negative log-softmax of the target class.

    ``weights`` (per class) turns the mean into a weighted mean.
    """
    targets = np.asarray(targets, dtype=np.intp)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be [batch, classes], got {logits.shape}")
    n, c = logits.shape
    if c < 2:
        raise ShapeError("cross_entropy needs at least 2 classes")
    if targets.shape != (n,):
        raise ShapeError(f"cross_entropy: {targets.shape[0] if targets.ndim else 0} targets for {n} rows")
    if n and (targets.min() < 0 or targets.max() >= c):
        raise IndexError(f"target index out of range [0, {c})")
    z = logits.values - logits.values.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - log_norm
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=DTYPE)[targets]
    total_w = w.sum()
    loss = -(w * logp[np.arange(n), targets]).sum() / total_w

    def back(g):
        p = np.exp(logp)
        p[np.arange(n), targets] -= 1.0
        return (g * p * (w / total_w)[:, None],)

    return _make(np.asarray(loss, dtype=DTYPE), (logits,), back)


# ---------------------------------------------------------------- backward


def backward(loss: Tensor):
    """Populate ``.grad`` for every requires-grad ancestor of ``loss``."""
    if loss.values.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = current_tape()
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    touched: dict[int, Tensor] = {id(loss): loss}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        rec.output.grad = g
        for t, gi in zip(rec.inputs, rec.backward(g)):
            if not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                touched[key] = t
    # whatever is left in ``grads`` belongs to leaves (parameters)
    for key, g in grads.items():
        t = touched[key]
        t.grad = g if t.grad is None else t.grad + g
    tape.clear()
