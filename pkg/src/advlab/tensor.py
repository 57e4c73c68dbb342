"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation executed while some input tracks gradients is
appended to the calling thread's active :class:`Tape`.  ``backward`` replays
that tape in reverse, accumulating gradients into every reachable tensor that
requires them, and then retires the tape.  The next recorded operation on the
same thread opens a fresh tape.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Raised on misuse of the gradient tape (consumed tape, non-scalar loss)."""


class Tape:
    """Ordered record of operations on one thread.

    Each record is ``(output, inputs, backward_fn)`` where ``backward_fn`` maps
    the output gradient to a tuple of input gradients (``None`` for inputs that
    do not track gradients).
    """

    _ids = itertools.count()

    def __init__(self) -> None:
        self.id = next(Tape._ids)
        self.records: list[tuple["Tensor", tuple["Tensor", ...], Callable]] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: "Tensor", inputs: tuple["Tensor", ...], backward_fn: Callable) -> None:
        if self.consumed:
            raise TapeError("cannot record onto a consumed tape")
        out._tape = self
        out.node_id = len(self.records)
        self.records.append((out, inputs, backward_fn))


_local = threading.local()


def active_tape() -> Tape:
    """The live tape of the calling thread, opening a new one if needed."""
    tape = getattr(_local, "tape", None)
    if tape is None or tape.consumed:
        tape = Tape()
        _local.tape = tape
    return tape


def reset_tape() -> None:
    """Discard everything recorded on this thread without differentiating."""
    tape = getattr(_local, "tape", None)
    if tape is not None:
        tape.records.clear()
        tape.consumed = True
    _local.tape = None


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run operations without recording them (inference, parameter updates)."""
    prev = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self._tape: Tape | None = None

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

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

    def backward(self) -> None:
        backward(self)

    # -- arithmetic -----------------------------------------------------------
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def make_result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as an op output, recording ``backward_fn`` if needed."""
    needs = grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        active_tape().record(out, tuple(inputs), backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad tensor that ``loss`` depends on."""
    if loss.size != 1:
        raise TapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise TapeError("loss was not produced under an active tape")
    if tape.consumed:
        raise TapeError("tape already consumed by an earlier backward()")
    loss.grad = np.ones_like(loss.data)
    # Buffers allocated during this pass may be updated in place; anything else
    # (op outputs, pre-existing leaf grads) is treated as shared and never mutated.
    owned: set[int] = set()
    for out, inputs, fn in reversed(tape.records):
        if out.grad is None:
            continue
        grads = fn(out.grad)
        for inp, g in zip(inputs, grads):
            if g is None or not inp.requires_grad:
                continue
            _accumulate(inp, g, owned)
    tape.records.clear()
    tape.consumed = True
    if getattr(_local, "tape", None) is tape:
        _local.tape = None


class SliceGrad:
    """Gradient that is zero everywhere except ``value`` at ``index``."""

    __slots__ = ("index", "value")

    def __init__(self, index, value: np.ndarray):
        self.index = index
        self.value = value


def _accumulate(inp: Tensor, g, owned: set[int]) -> None:
    key = id(inp)
    if isinstance(g, SliceGrad):
        if inp.grad is None:
            inp.grad = np.zeros(inp.shape, dtype=DTYPE)
            owned.add(key)
        elif key not in owned:
            inp.grad = inp.grad.copy()
            owned.add(key)
        inp.grad[g.index] += g.value
        return
    if g.shape != inp.shape:
        g = np.broadcast_to(g, inp.shape)
    if inp.grad is None:
        inp.grad = g
    elif key in owned:
        inp.grad += g
    else:
        inp.grad = inp.grad + g
        owned.add(key)


# -- elementwise -----------------------------------------------------------


def broadcast_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a} and {b}") from None


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def elementwise(op_kind: str, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    x, y = a.data, b.data
    if op_kind == "add":
        data = x + y

        def fn(g):
            return unbroadcast(g, x.shape), unbroadcast(g, y.shape)
    elif op_kind == "sub":
        data = x - y

        def fn(g):
            return unbroadcast(g, x.shape), unbroadcast(-g, y.shape)
    elif op_kind == "mul":
        data = x * y

        def fn(g):
            ga = unbroadcast(g * y, x.shape) if a.requires_grad else None
            gb = unbroadcast(g * x, y.shape) if b.requires_grad else None
            return ga, gb
    elif op_kind == "div":
        with np.errstate(divide="ignore", invalid="ignore"):
            data = x / y

        def fn(g):
            with np.errstate(divide="ignore", invalid="ignore"):
                ga = unbroadcast(g / y, x.shape) if a.requires_grad else None
                gb = unbroadcast(-g * x / (y * y), y.shape) if b.requires_grad else None
            return ga, gb
    else:
        raise ValueError(f"unknown elementwise op {op_kind!r}")
    return make_result(data, (a, b), fn)


def add(a, b) -> Tensor:
    return elementwise("add", a, b)


def sub(a, b) -> Tensor:
    return elementwise("sub", a, b)


def mul(a, b) -> Tensor:
    return elementwise("mul", a, b)


def div(a, b) -> Tensor:
    return elementwise("div", a, b)


def power(a: Tensor, exponent: float) -> Tensor:
    x = a.data
    data = x**exponent
    return make_result(data, (a,), lambda g: (g * exponent * x ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)
    return make_result(data, (a,), lambda g: (g * data,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return make_result(np.log(x), (a,), lambda g: (g / x,))


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)
    return make_result(data, (a,), lambda g: (g / (2.0 * data),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_result(a.data * mask, (a,), lambda g: (g * mask,))


# -- reductions and linear algebra ---------------------------------------------


def _norm_axis(axis, ndim: int):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)
    shape = a.shape

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return make_result(data, (a,), fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axes, keepdims) * (1.0 / count)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading batch axes must agree."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must have at least two dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if a.shape[:-2] != b.shape[:-2] and a.ndim == b.ndim:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
    x, y = a.data, b.data
    data = x @ y

    def fn(g):
        ga = unbroadcast(g @ np.swapaxes(y, -1, -2), x.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(x, -1, -2) @ g, y.shape) if b.requires_grad else None
        return ga, gb

    return make_result(data, (a, b), fn)


# -- structural -----------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} into {shape}") from None
    src = a.shape
    return make_result(data, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"invalid permutation {axes} for rank {a.ndim}")
    inverse = tuple(np.argsort(axes))
    data = np.ascontiguousarray(a.data.transpose(axes))
    return make_result(data, (a,), lambda g: (g.transpose(inverse),))


def getitem(a: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing; out-of-range integer indices raise IndexError."""
    data = a.data[index]
    shape = a.shape

    def fn(g):
        if _is_advanced(index):
            full = np.zeros(shape, dtype=DTYPE)
            np.add.at(full, index, g)
            return (full,)
        return (SliceGrad(index, g),)

    return make_result(np.array(data, dtype=DTYPE), (a,), fn)


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as err:
        raise ShapeError(str(err)) from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def fn(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return make_result(data, tuple(tensors), fn)


def split(a: Tensor, sections: int, axis: int = 0) -> list[Tensor]:
    n = a.shape[axis]
    if n % sections:
        raise ShapeError(f"axis of length {n} does not split into {sections}")
    step = n // sections
    out = []
    for i in range(sections):
        index = [slice(None)] * a.ndim
        index[axis] = slice(i * step, (i + 1) * step)
        out.append(getitem(a, tuple(index)))
    return out
