"""Reverse-mode automatic differentiation on dense float64 arrays.

A :class:`Tape` records every operation applied to tracked tensors during a
forward pass; :meth:`Tape.backward` walks the records once in reverse and
accumulates a gradient for every tracked leaf. Records are appended in
execution order, which is already a topological order of the computation
graph, so no sorting is needed on the way back.

Everything is float64. Broadcasting in binary operations is deliberately
limited to two auditable cases: a size-1 (scalar) operand, and a length-n
vector combined with each row of an (m, n) matrix. A tape and the tensors
recorded on it belong to a single unit of execution; parallel training runs
must each build their own parameters and tapes.
"""

from __future__ import annotations

import itertools
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import DimensionError, EmptyInputError, NumericError, TapeError

_TAPE_STACK: list["Tape"] = []
_TAPE_IDS = itertools.count(1)


class Tensor:
    """Dense n-dimensional float64 array, optionally tracked on a tape."""

    __slots__ = ("data", "requires_grad", "grad", "tape_id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.size == 0:
            raise EmptyInputError(f"zero-extent tensor of shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Copy of this tensor's values, disconnected from any tape."""
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; floats go through scale/shift so the broadcast
    # rules of the binary ops stay narrow
    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            return shift(self, float(other))
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            return shift(self, -float(other))
        return sub(self, other)

    def __rsub__(self, other) -> "Tensor":
        return shift(neg(self), float(other))

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def sum(self, axis: int | None = None) -> "Tensor":
        return reduce_sum(self, axis)

    def mean(self, axis: int | None = None) -> "Tensor":
        return reduce_mean(self, axis)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


class _Record(NamedTuple):
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


class Tape:
    """Ordered log of operations, consumed by a single backward sweep."""

    def __init__(self):
        self.id = next(_TAPE_IDS)
        self._records: list[_Record] = []
        self._leaves: dict[int, Tensor] = {}
        self._produced: set[int] = set()
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        if not _TAPE_STACK or _TAPE_STACK[-1] is not self:
            raise TapeError("tape stack corrupted: exiting a non-innermost tape")
        _TAPE_STACK.pop()
        return False

    def watch(self, t: Tensor) -> None:
        """Track ``t`` as a leaf even if no operation consumes it."""
        if not t.requires_grad:
            raise TapeError("watch() requires a requires_grad tensor")
        self._claim(t)
        self._leaves.setdefault(id(t), t)

    def _claim(self, t: Tensor) -> None:
        # A tensor may carry a stale id from an already-popped tape; only a
        # conflicting *live* registration is an error.
        if t.tape_id is not None and t.tape_id != self.id:
            if any(tp.id == t.tape_id for tp in _TAPE_STACK):
                raise TapeError("tensor is already registered on another active tape")
        t.tape_id = self.id

    def _add_record(self, rec: _Record) -> None:
        for t in rec.inputs:
            if t.requires_grad:
                self._claim(t)
                if id(t) not in self._produced:
                    self._leaves.setdefault(id(t), t)
        rec.output.tape_id = self.id
        self._produced.add(id(rec.output))
        self._records.append(rec)

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Accumulate gradients of ``loss`` into every tracked leaf.

        Returns a map from leaf tensor to its gradient array (also stored on
        ``leaf.grad``). Leaves not reachable from ``loss`` get zeros. A tape
        can be consumed once; rerun the forward pass for fresh gradients.
        """
        if self._consumed:
            raise TapeError("tape already consumed: backward is single-use")
        if loss.data.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.shape}")
        if loss.tape_id != self.id and id(loss) not in self._leaves:
            raise TapeError("loss tensor was not recorded on this tape")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self._records):
            g_out = grads.pop(id(rec.output), None)
            if g_out is None:
                continue  # not on a path to the loss
            for t, g_in in zip(rec.inputs, rec.backward(g_out)):
                if g_in is None or not t.requires_grad:
                    continue
                acc = grads.get(id(t))
                if acc is None:
                    grads[id(t)] = g_in
                else:
                    acc += g_in

        result: dict[Tensor, np.ndarray] = {}
        for t in self._leaves.values():
            g = grads.get(id(t))
            if g is None:
                g = np.zeros_like(t.data)
            t.grad = g
            result[t] = g
        return result


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _emit(inputs: tuple[Tensor, ...], out_data: np.ndarray, backward) -> Tensor:
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        tape._add_record(_Record(inputs, out, backward))
    return out


# ---------------------------------------------------------------------------
# binary elementwise ops (same shape, scalar, or row-vector-over-rows)

_SAME, _ROW, _B_SCALAR, _A_SCALAR = range(4)


def _binary_mode(a: Tensor, b: Tensor, op: str) -> int:
    if a.shape == b.shape:
        return _SAME
    if b.data.size == 1:
        return _B_SCALAR
    if a.data.size == 1:
        return _A_SCALAR
    if a.ndim == 2 and b.ndim == 1 and b.shape[0] == a.shape[1]:
        return _ROW
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, mode: int, side: str, shape: tuple[int, ...]) -> np.ndarray:
    if mode == _SAME:
        return g
    if mode == _ROW:
        return g if side == "a" else g.sum(axis=0)
    if mode == _B_SCALAR:
        return g if side == "a" else g.sum().reshape(shape)
    return g.sum().reshape(shape) if side == "a" else g


def add(a: Tensor, b: Tensor) -> Tensor:
    mode = _binary_mode(a, b, "add")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _reduce_to(g, mode, "a", sa), _reduce_to(g, mode, "b", sb)

    return _emit((a, b), a.data + b.data, backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    mode = _binary_mode(a, b, "sub")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _reduce_to(g, mode, "a", sa), _reduce_to(-g, mode, "b", sb)

    return _emit((a, b), a.data - b.data, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    mode = _binary_mode(a, b, "mul")
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data

    def backward(g):
        return _reduce_to(g * bd, mode, "a", sa), _reduce_to(g * ad, mode, "b", sb)

    return _emit((a, b), ad * bd, backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    mode = _binary_mode(a, b, "div")
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _reduce_to(g / bd, mode, "a", sa),
            _reduce_to(-g * ad / (bd * bd), mode, "b", sb),
        )

    return _emit((a, b), ad / bd, backward)


# ---------------------------------------------------------------------------
# unary ops


def _unary(a: Tensor, out_data: np.ndarray, local_grad) -> Tensor:
    def backward(g):
        return (g * local_grad,)

    return _emit((a,), out_data, backward)


def relu(a: Tensor) -> Tensor:
    # subgradient at 0 is 0
    return _unary(a, np.maximum(a.data, 0.0), (a.data > 0.0).astype(np.float64))


def sigmoid(a: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))  # overflow-free logistic
    return _unary(a, y, y * (1.0 - y))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _unary(a, y, 1.0 - y * y)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _unary(a, y, y)


def log(a: Tensor) -> Tensor:
    return _unary(a, np.log(a.data), 1.0 / a.data)


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)
    return _unary(a, y, 0.5 / y)


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g):
        return (g * c,)

    return _emit((a,), a.data * c, backward)


def shift(a: Tensor, c: float) -> Tensor:
    def backward(g):
        return (g,)

    return _emit((a,), a.data + c, backward)


def clip_min(a: Tensor, lo: float) -> Tensor:
    mask = (a.data > lo).astype(np.float64)

    def backward(g):
        return (g * mask,)

    return _emit((a,), np.maximum(a.data, lo), backward)


# ---------------------------------------------------------------------------
# structural ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ bd.T, ad.T @ g

    return _emit((a, b), ad @ bd, backward)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got shape {a.shape}")

    def backward(g):
        return (g.T,)

    return _emit((a,), a.data.T.copy(), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.data.size:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}")
    old = a.shape

    def backward(g):
        return (g.reshape(old),)

    return _emit((a,), a.data.reshape(shape), backward)


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    return _reduce(a, axis, "sum")


def reduce_mean(a: Tensor, axis: int | None = None) -> Tensor:
    return _reduce(a, axis, "mean")


def _reduce(a: Tensor, axis: int | None, kind: str) -> Tensor:
    if axis is not None and not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"{kind}: axis {axis} out of range for shape {a.shape}")
    shape = a.shape
    if kind == "sum":
        out, denom = a.data.sum(axis=axis), 1.0
    else:
        out = a.data.mean(axis=axis)
        denom = float(a.data.size if axis is None else shape[axis])

    def backward(g):
        if axis is None:
            return (np.full(shape, float(g) / denom),)
        expanded = np.expand_dims(g, axis=axis)
        return (np.broadcast_to(expanded, shape).copy() / denom,)

    return _emit((a,), out, backward)


def softmax(a: Tensor, axis: int) -> Tensor:
    if np.isnan(a.data).any():
        raise NumericError("softmax: NaN in input")
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"softmax: axis {axis} out of range for shape {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _emit((a,), s, backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if len(tensors) == 0:
        raise EmptyInputError("concat of zero tensors")
    if len(tensors) == 1:
        return tensors[0]
    first = tensors[0]
    if not -first.ndim <= axis < first.ndim:
        raise DimensionError(f"concat: axis {axis} out of range for shape {first.shape}")
    axis = axis % first.ndim
    for t in tensors[1:]:
        if t.ndim != first.ndim:
            raise DimensionError(f"concat: rank mismatch {first.shape} vs {t.shape}")
        for d in range(first.ndim):
            if d != axis and t.shape[d] != first.shape[d]:
                raise DimensionError(f"concat: shape mismatch {first.shape} vs {t.shape}")
    offsets = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, offsets, axis=axis))

    return _emit(tuple(tensors), np.concatenate([t.data for t in tensors], axis=axis), backward)


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows of a matrix; backward scatter-adds into the source rows."""
    if a.ndim != 2:
        raise DimensionError(f"gather_rows: expected a matrix, got shape {a.shape}")
    idx_arr = np.asarray(idx, dtype=np.intp)
    if idx_arr.ndim != 1:
        raise DimensionError(f"gather_rows: index list must be 1-D, got shape {idx_arr.shape}")
    n = a.shape[0]
    if idx_arr.size and (idx_arr.min() < 0 or idx_arr.max() >= n):
        bad = idx_arr[(idx_arr < 0) | (idx_arr >= n)][0]
        raise DimensionError(f"gather_rows: index {bad} out of range [0, {n})")
    shape = a.shape

    def backward(g):
        z = np.zeros(shape)
        np.add.at(z, idx_arr, g)
        return (z,)

    return _emit((a,), a.data[idx_arr], backward)
