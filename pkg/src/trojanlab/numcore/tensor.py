"""Dense float64 tensors with a reverse-mode gradient tape.

Operations are plain functions (plus operator overloads on :class:`Tensor`).
When a :class:`GradTape` is active and at least one input is being tracked,
the op records a vector-Jacobian product closure on the tape.  Tracking starts
from :meth:`GradTape.watch`; untracked computation costs nothing extra.
"""

from __future__ import annotations

import contextvars
from typing import Callable, Sequence

import numpy as np

_ACTIVE_TAPE: contextvars.ContextVar["GradTape | None"] = contextvars.ContextVar(
    "trojanlab_active_tape", default=None
)


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class TapeError(LookupError):
    """A tensor was not recorded on the tape a gradient was requested from."""


class Tensor:
    __slots__ = ("data", "__weakref__")
    # make numpy defer to our operators for ndarray (op) Tensor
    __array_ufunc__ = None

    def __init__(self, data) -> None:
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, data={np.array2string(self.data, threshold=8)})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Record:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class GradTape:
    """Ordered record of primitive ops, replayed backwards by :func:`grad`.

    Use as a context manager::

        with GradTape() as tape:
            tape.watch(x)
            y = mse(matmul(x, w), target)
        dx = grad(tape, y, x)
    """

    def __init__(self) -> None:
        self.records: list[_Record] = []
        self._tracked: set[int] = set()
        self._keep: list[Tensor] = []
        self._token = None

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            if not isinstance(t, Tensor):
                raise TypeError(f"can only watch Tensor, got {type(t).__name__}")
            if id(t) not in self._tracked:
                self._tracked.add(id(t))
                self._keep.append(t)

    def is_tracked(self, t: Tensor) -> bool:
        return id(t) in self._tracked

    def __enter__(self) -> "GradTape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        self.records.append(_Record(out, inputs, vjp))
        self._tracked.add(id(out))


def _record(out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(tape.is_tracked(t) for t in inputs):
        tape._record(out, inputs, vjp)
    return out


def grad(tape: GradTape, output: Tensor, wrt: Tensor | Sequence[Tensor]):
    """Reverse-mode gradient of a scalar ``output`` with respect to ``wrt``.

    ``wrt`` may be a single tensor or a sequence; the return value mirrors it.
    Tensors that were watched but do not influence ``output`` get zeros.
    """
    single = isinstance(wrt, Tensor)
    targets = [wrt] if single else list(wrt)
    for t in targets:
        if not tape.is_tracked(t):
            raise TapeError(f"tensor with shape {t.shape} was not recorded on this tape")
    if output.size != 1:
        raise DimensionError(f"gradient needs a scalar output, got shape {output.shape}")

    adj: dict[int, np.ndarray] = {}
    if tape.is_tracked(output):
        adj[id(output)] = np.ones_like(output.data)
    for rec in reversed(tape.records):
        g = adj.get(id(rec.out))
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.vjp(g)):
            if gi is None or not tape.is_tracked(inp):
                continue
            key = id(inp)
            adj[key] = adj[key] + gi if key in adj else gi
    out = [adj.get(id(t), np.zeros_like(t.data)).reshape(t.shape) for t in targets]
    return out[0] if single else out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: cannot combine shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    out = Tensor(a.data * b.data)
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    out = Tensor(a.data @ b.data)
    return _record(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0.0
    out = Tensor(np.where(mask, x.data, 0.0))
    return _record(out, (x,), lambda g: (g * mask,))


def reduce_sum(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.sum(axis=axis))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _record(out, (x,), vjp)


def reduce_mean(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return mul(reduce_sum(x, axis=axis), 1.0 / n)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.reshape(tuple(shape)))
    return _record(out, (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _record(out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def take(x, index: int, axis: int = -1) -> Tensor:
    """Select one slice along ``axis`` (e.g. a single neuron's activation column)."""
    x = as_tensor(x)
    n = x.shape[axis]
    if not -n <= index < n:
        raise IndexError(f"take: index {index} out of range for axis of size {n}")
    out = Tensor(np.take(x.data, index, axis=axis))

    def vjp(g):
        full = np.zeros_like(x.data)
        sl = [slice(None)] * x.data.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return _record(out, (x,), vjp)


def mse(pred, target) -> Tensor:
    """Mean over elements of (target - pred)^2."""
    pred, target = as_tensor(pred), as_tensor(target)
    diff = sub(target, pred)
    return reduce_mean(mul(diff, diff))


def cross_entropy(logits, target) -> Tensor:
    """Mean softmax cross-entropy.

    ``logits`` is (C,) with an int ``target`` or (n, C) with an int array of n labels.
    """
    logits = as_tensor(logits)
    squeeze = logits.data.ndim == 1
    z = logits.data.reshape(1, -1) if squeeze else logits.data
    labels = np.atleast_1d(np.asarray(target))
    if labels.dtype.kind not in "iu":
        if not np.all(np.equal(np.mod(labels, 1), 0)):
            raise ValueError(f"class targets must be integers, got {labels!r}")
        labels = labels.astype(np.int64)
    n, c = z.shape
    if labels.shape != (n,):
        raise DimensionError(f"cross_entropy: {n} rows of logits but {labels.shape} targets")
    if np.any(labels < 0) or np.any(labels >= c):
        bad = labels[(labels < 0) | (labels >= c)][0]
        raise IndexError(f"class index {int(bad)} out of range for {c} classes")
    shifted = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsumexp
    rows = np.arange(n)
    out = Tensor(-logp[rows, labels].mean())

    def vjp(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        dz = p * (g / n)
        return (dz.reshape(logits.shape),)

    return _record(out, (logits,), vjp)


def softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
