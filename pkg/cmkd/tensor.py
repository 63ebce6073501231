"""
Dense float64 tensors with an eager, single-use reverse-mode gradient tape.

Every primitive validates shapes (no implicit broadcasting, except that a 0-d
tensor or Python number may meet a tensor of any shape), checks that its
result is finite and, when an operand requires grad, records itself on the
active tape. `backward(loss)` replays the tape in reverse and consumes it;
the next primitive starts a fresh tape.
"""

from __future__ import annotations

import builtins
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np

from cmkd.exceptions import NumericalError, ShapeError, TapeError

EPS = 1e-12

Operand = Union["Tensor", float, int]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class _Record:
    op: str
    output: "Tensor"
    inputs: tuple["Tensor", ...]
    backward: BackwardFn


class GradTape:
    """Ordered record of the primitives executed since the last backward pass."""

    def __init__(self) -> None:
        self.records: list[_Record] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.records)

    def record(
        self, op: str, output: "Tensor", inputs: tuple["Tensor", ...], fn: BackwardFn
    ) -> None:
        if self.consumed:
            raise TapeError("cannot record on a consumed tape")
        self.records.append(_Record(op, output, inputs, fn))

    def backward(self, loss: "Tensor") -> None:
        if self.consumed:
            raise TapeError("tape already consumed; run a new forward pass first")
        if loss.shape != ():
            raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
        if loss._tape is not self:
            raise TapeError("loss was not produced on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
        leaves: dict[int, Tensor] = {}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi
                if inp._tape is None:
                    leaves[key] = inp

        for key, leaf in leaves.items():
            grad = np.asarray(grads[key], dtype=np.float64).reshape(leaf.shape)
            if not np.all(np.isfinite(grad)):
                raise NumericalError("non-finite gradient reached a leaf")
            leaf.grad = grad

        self.consumed = True
        self.records.clear()
        if _active_tape.get() is self:
            _active_tape.set(None)


_active_tape: ContextVar[Optional[GradTape]] = ContextVar("cmkd_tape", default=None)
_grad_enabled: ContextVar[bool] = ContextVar("cmkd_grad_enabled", default=True)


def current_tape() -> GradTape:
    tape = _active_tape.get()
    if tape is None or tape.consumed:
        tape = GradTape()
        _active_tape.set(tape)
    return tape


@contextmanager
def no_grad() -> Iterator[None]:
    """Run primitives without recording them (evaluation passes)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def is_grad_enabled() -> bool:
    return _grad_enabled.get()


class Tensor:
    __slots__ = ("_data", "requires_grad", "grad", "_tape", "name")

    def __init__(
        self,
        data: object,
        requires_grad: bool = False,
        name: Optional[str] = None,
    ):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, name or "tensor")
        arr.setflags(write=False)
        self._data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[GradTape] = None
        self.name = name

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return int(self._data.size)

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single value, got shape {self.shape}")
        return float(self._data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self._data)

    def assign_(self, values: np.ndarray) -> None:
        """Replace the values of a leaf in place (optimizer updates, gradcheck)."""
        if not self.is_leaf:
            raise TapeError("only leaf tensors can be assigned")
        values = np.array(values, dtype=np.float64)
        if values.shape != self.shape:
            raise ShapeError(f"assign shape {values.shape} != {self.shape}")
        _check_finite(values, self.name or "assign")
        values.setflags(write=False)
        self._data = values

    def backward(self) -> None:
        backward(self)

    def sum(self, axis: Optional[int] = None) -> "Tensor":
        return sum(self, axis)

    def mean(self, axis: Optional[int] = None) -> "Tensor":
        return mean(self, axis)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def reshape(self, *shape: int) -> "Tensor":
        return reshape(self, shape)

    def __add__(self, other: Operand) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Operand) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Operand) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Operand) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Operand) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Operand) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: Operand) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: Operand) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def as_tensor(value: Operand) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{op} produced non-finite values")


def _result(
    op: str, data: np.ndarray, inputs: tuple[Tensor, ...], fn: BackwardFn
) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    data = np.asarray(data, dtype=np.float64)
    data.setflags(write=False)
    out._data = data
    out.grad = None
    out._tape = None
    out.name = None
    out.requires_grad = is_grad_enabled() and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        tape = current_tape()
        for t in inputs:
            if t.requires_grad and t._tape is not None and t._tape is not tape:
                raise TapeError(
                    f"{op}: operand was produced on a consumed tape; recompute it"
                )
        out._tape = tape
        tape.record(op, out, inputs, fn)
    return out


def backward(loss: Tensor) -> None:
    if not loss.requires_grad:
        raise TapeError("loss does not depend on any tensor that requires grad")
    if loss._tape is None:
        raise TapeError("loss is a leaf; nothing to differentiate")
    loss._tape.backward(loss)


# elementwise


def _pair(a: Operand, b: Operand, op: str) -> tuple[Tensor, Tensor]:
    ta, tb = as_tensor(a), as_tensor(b)
    if ta.shape != tb.shape and ta.ndim != 0 and tb.ndim != 0:
        raise ShapeError(f"{op}: shape mismatch {ta.shape} vs {tb.shape}")
    return ta, tb


def _fit(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a: Operand, b: Operand) -> Tensor:
    ta, tb = _pair(a, b, "add")
    return _result(
        "add",
        ta.data + tb.data,
        (ta, tb),
        lambda g: (_fit(g, ta.shape), _fit(g, tb.shape)),
    )


def sub(a: Operand, b: Operand) -> Tensor:
    ta, tb = _pair(a, b, "sub")
    return _result(
        "sub",
        ta.data - tb.data,
        (ta, tb),
        lambda g: (_fit(g, ta.shape), _fit(-g, tb.shape)),
    )


def mul(a: Operand, b: Operand) -> Tensor:
    ta, tb = _pair(a, b, "mul")
    return _result(
        "mul",
        ta.data * tb.data,
        (ta, tb),
        lambda g: (_fit(g * tb.data, ta.shape), _fit(g * ta.data, tb.shape)),
    )


def div(a: Operand, b: Operand) -> Tensor:
    ta, tb = _pair(a, b, "div")
    if np.any(np.abs(tb.data) <= EPS):
        raise NumericalError("div: denominator at or below the stability floor")
    out = ta.data / tb.data

    def fn(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _fit(g / tb.data, ta.shape), _fit(-g * out / tb.data, tb.shape)

    return _result("div", out, (ta, tb), fn)


def neg(x: Tensor) -> Tensor:
    return _result("neg", -x.data, (x,), lambda g: (-g,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    """log(max(x, EPS)); the gradient is zero where the floor is active."""
    clamped = np.maximum(x.data, EPS)
    live = x.data > EPS
    return _result("log", np.log(clamped), (x,), lambda g: (g * live / clamped,))


def relu(x: Tensor) -> Tensor:
    live = x.data > 0
    return _result("relu", np.where(live, x.data, 0.0), (x,), lambda g: (g * live,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _result("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def clip_max(x: Tensor, limit: float) -> Tensor:
    live = x.data < limit
    return _result(
        "clip_max", np.minimum(x.data, limit), (x,), lambda g: (g * live,)
    )


# reductions and reshaping


def sum(x: Tensor, axis: Optional[int] = None) -> Tensor:
    shape = x.shape

    def fn(g: np.ndarray) -> tuple[np.ndarray]:
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _result("sum", np.sum(x.data, axis=axis), (x,), fn)


def mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    if n == 0:
        raise ShapeError("mean over an empty axis")
    return sum(x, axis) / float(n)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got shape {x.shape}")
    return _result("transpose", x.data.T, (x,), lambda g: (g.T,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape {old} -> {tuple(shape)}: {exc}") from exc
    return _result("reshape", out, (x,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of nothing")
    ndim = tensors[0].ndim
    for t in tensors:
        other = [d for i, d in enumerate(t.shape) if i != axis % ndim]
        first = [d for i, d in enumerate(tensors[0].shape) if i != axis % ndim]
        if t.ndim != ndim or other != first:
            shapes = [t.shape for t in tensors]
            raise ShapeError(f"concat: incompatible shapes {shapes}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(
        "concat",
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, bounds, axis=axis)),
    )


def slice(x: Tensor, index: tuple[object, ...] | object) -> Tensor:
    """Basic (slice/int) indexing; fancy indexing is rejected."""
    idx = index if isinstance(index, tuple) else (index,)
    for part in idx:
        if not isinstance(part, (int, builtins.slice, type(Ellipsis))):
            raise ShapeError("slice accepts ints and slices only")
    shape = x.shape
    out = x.data[idx]

    def fn(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _result("slice", out, (x,), fn)


# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _result(
        "matmul",
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """x[N×D] + bias[D], the one row-wise broadcast the engine allows."""
    if x.ndim != 2 or bias.shape != (x.shape[1],):
        raise ShapeError(f"add_bias: {x.shape} with bias {bias.shape}")
    return _result(
        "add_bias", x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=0))
    )


def row_l2_normalize(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"row_l2_normalize needs a matrix, got shape {x.shape}")
    norm = np.sqrt(np.sum(x.data * x.data, axis=1, keepdims=True))
    denom = np.maximum(norm, EPS)
    out = x.data / denom
    live = norm > EPS

    def fn(g: np.ndarray) -> tuple[np.ndarray]:
        radial = np.sum(g * out, axis=1, keepdims=True)
        return (g / denom - live * out * radial / denom,)

    return _result("row_l2_normalize", out, (x,), fn)


def softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows needs a matrix, got shape {x.shape}")
    z = np.exp(x.data - x.data.max(axis=1, keepdims=True))
    out = z / z.sum(axis=1, keepdims=True)

    def fn(g: np.ndarray) -> tuple[np.ndarray]:
        return (out * (g - np.sum(g * out, axis=1, keepdims=True)),)

    return _result("softmax_rows", out, (x,), fn)


def log_softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"log_softmax_rows needs a matrix, got shape {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(out)

    def fn(g: np.ndarray) -> tuple[np.ndarray]:
        return (g - probs * g.sum(axis=1, keepdims=True),)

    return _result("log_softmax_rows", out, (x,), fn)


def gather_diagonal(x: Tensor) -> Tensor:
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ShapeError(f"gather_diagonal needs a square matrix, got {x.shape}")
    return _result(
        "gather_diagonal", np.diagonal(x.data).copy(), (x,), lambda g: (np.diag(g),)
    )


def gather_columns(x: Tensor, columns: np.ndarray) -> Tensor:
    """out[i] = x[i, columns[i]]"""
    columns = np.asarray(columns, dtype=np.int64)
    if x.ndim != 2 or columns.shape != (x.shape[0],):
        raise ShapeError(f"gather_columns: {x.shape} with index {columns.shape}")
    if np.any(columns < 0) or np.any(columns >= x.shape[1]):
        raise ShapeError("gather_columns: column index out of range")
    rows = np.arange(x.shape[0])
    shape = x.shape

    def fn(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros(shape)
        full[rows, columns] = g
        return (full,)

    return _result("gather_columns", x.data[rows, columns], (x,), fn)
