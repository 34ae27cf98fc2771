"""Dense float64 tensors with a minimal reverse-mode tape.

A :class:`Tape` records every operation whose inputs include a tracked
tensor.  ``backward(loss)`` walks the records in reverse creation order and
returns the gradient of the scalar ``loss`` with respect to every leaf that
was registered with :meth:`Tape.watch`.

Tapes are single use: once ``backward`` has run, the tape refuses new
operations and further backward calls.  Rebuild the graph to differentiate
again.
"""
from __future__ import annotations

import builtins
import io
import struct
from typing import BinaryIO, Iterable, Sequence

import numpy as np

__all__ = [
    "NonFiniteError", "Tape", "Tensor", "as_tensor", "backward",
    "add", "sub", "mul", "scale", "matmul", "transpose", "exp", "sqrt",
    "sum", "mean", "row_softmax", "relu", "sigmoid", "reshape", "slice", "concat",
    "squared_frobenius_norm", "write_tensor", "read_tensor",
    "write_tensors", "read_tensors",
]

TENSOR_MAGIC = b"TNSR"


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class Tape:
    """Operation record for one forward pass; differentiated exactly once."""

    def __init__(self):
        self._records = []  # (vjp, parent node ids); index == node id
        self._leaves = []
        self.consumed = False

    def __len__(self):
        return len(self._records)

    def watch(self, data) -> "Tensor":
        """Register ``data`` as a differentiable leaf and return its tensor."""
        self._check_open()
        arr = np.array(data, dtype=np.float64)  # always a private copy
        _check_finite(arr, "watch")
        t = Tensor(arr, self, self._push(None, ()))
        self._leaves.append(t)
        return t

    def _push(self, vjp, parents) -> int:
        self._records.append((vjp, parents))
        return len(self._records) - 1

    def _check_open(self):
        if self.consumed:
            raise RuntimeError("tape already differentiated; rebuild the graph")


class Tensor:
    """An n-d float64 array, optionally a node on a :class:`Tape`."""

    __slots__ = ("data", "tape", "node")
    __array_priority__ = 1000

    def __init__(self, data, tape: Tape | None = None, node: int | None = None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    @property
    def tape_id(self) -> int | None:
        return None if self.tape is None else id(self.tape)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar()

    def __repr__(self):
        tag = f", tape={self.tape_id:#x}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    @property
    def T(self):
        return transpose(self)

    def __getitem__(self, index):
        return slice(self, index)


def _raise_not_scalar():
    raise ValueError("tensor is not a scalar")


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=np.float64)
    _check_finite(arr, "input")
    return Tensor(arr)


def _check_finite(arr: np.ndarray, op: str):
    # a NaN/Inf anywhere poisons the sum; cheaper than an elementwise mask
    with np.errstate(all="ignore"):
        total = np.add.reduce(arr, axis=None)
    if not np.isfinite(total) and not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced a non-finite value")


class _trap:
    """Turn numpy floating-point faults inside an op into NonFiniteError.

    Ops on finite tensors that cannot overflow silently (everything except
    matmul) rely on this instead of rescanning their output.
    """

    def __init__(self, op):
        self.op = op
        self.state = None

    def __enter__(self):
        self.state = np.seterr(over="raise", invalid="raise", divide="raise")

    def __exit__(self, exc_type, exc, tb):
        np.seterr(**self.state)
        if exc_type is FloatingPointError and not isinstance(exc, NonFiniteError):
            raise NonFiniteError(f"{self.op}: {exc}") from exc
        return False


def _common_tape(tensors: Sequence[Tensor]) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif t.tape is not tape:
            raise ValueError("inputs belong to different tapes")
    if tape is not None:
        tape._check_open()
    return tape


def _record(op: str, out: np.ndarray, inputs: Sequence[Tensor], vjp, check: bool = False) -> Tensor:
    if check:
        _check_finite(out, op)
    tape = _common_tape(inputs)
    if tape is None:
        return Tensor(out)
    parents = tuple(t.node if t.tape is tape else None for t in inputs)
    return Tensor(out, tape, tape._push(vjp, parents))


def _need(parents):
    return tuple(p is not None for p in parents)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from None


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    with _trap("add"):
        out = a.data + b.data
    return _record("add", out, (a, b),
                   lambda g, need: (need[0] and _unbroadcast(g, sa), need[1] and _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    with _trap("sub"):
        out = a.data - b.data
    return _record("sub", out, (a, b),
                   lambda g, need: (need[0] and _unbroadcast(g, sa), need[1] and -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    with _trap("mul"):
        out = ad * bd
    return _record("mul", out, (a, b),
                   lambda g, need: (need[0] and _unbroadcast(g * bd, ad.shape),
                                    need[1] and _unbroadcast(g * ad, bd.shape)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    if not np.isfinite(c):
        raise NonFiniteError("scale by a non-finite factor")
    with _trap("scale"):
        out = a.data * c
    return _record("scale", out, (a,), lambda g, need: (g * c,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with _trap("exp"):
        y = np.exp(a.data)
    return _record("exp", y, (a,), lambda g, need: (g * y,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if (a.data < 0).any():
        raise NonFiniteError("sqrt of a negative value")
    y = np.sqrt(a.data)

    def vjp(g, need):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (g * 0.5 / y,)
    return _record("sqrt", y, (a,), vjp)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _record("relu", np.where(mask, a.data, 0.0), (a,), lambda g, need: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))  # no overflow for large |a|
    return _record("sigmoid", y, (a,), lambda g, need: (g * y * (1.0 - y),))


# -- linear algebra and reshaping -------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g, need):
        ga = need[0] and _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = need[1] and _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb
    with np.errstate(all="ignore"):  # the finiteness check below reports it
        out = ad @ bd
    return _record("matmul", out, (a, b), vjp, check=True)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; by default swap the last two."""
    a = as_tensor(a)
    if axes is None:
        if a.ndim < 2:
            raise ValueError("transpose needs at least 2 dimensions")
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ValueError(f"transpose: invalid permutation {axes} for rank {a.ndim}")
    inv = tuple(np.argsort(axes))
    return _record("transpose", np.transpose(a.data, axes), (a,),
                   lambda g, need: (np.transpose(g, inv),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {old} to {tuple(shape)}") from None
    return _record("reshape", out, (a,), lambda g, need: (g.reshape(old),))


def slice(a, index) -> Tensor:
    """Basic (view) indexing: ints, slices, Ellipsis and None only."""
    a = as_tensor(a)
    if not isinstance(index, tuple):
        index = (index,)
    for ix in index:
        if not (ix is None or ix is Ellipsis or isinstance(ix, (int, np.integer, builtins.slice))):
            raise TypeError(f"slice supports basic indexing only, got {type(ix).__name__}")
    shape = a.shape
    out = a.data[index]

    def vjp(g, need):
        full = np.zeros(shape)
        full[index] = g
        return (full,)
    return _record("slice", np.array(out), (a,), vjp)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat of nothing")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as err:
        raise ValueError(f"concat: {err}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _record("concat", out, ts, lambda g, need: tuple(np.split(g, bounds, axis=axis)))


# -- reductions ---------------------------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    with _trap("sum"):
        out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g, need):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return _record("sum", np.asarray(out), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def row_softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = as_tensor(a)
    y = a.data - a.data.max(axis=-1, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=-1, keepdims=True)
    return _record("row_softmax", y, (a,),
                   lambda g, need: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def squared_frobenius_norm(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _record("squared_frobenius_norm", np.asarray(np.vdot(ad, ad)), (a,), check=True, vjp=
                   lambda g, need: (2.0 * g * ad,))


# -- differentiation ----------------------------------------------------------

def backward(loss: Tensor, wrt: Sequence[Tensor] | None = None):
    """Gradients of scalar ``loss``.

    Returns a list aligned with ``wrt`` when given, otherwise a dict mapping
    every watched leaf to its gradient.  Leaves the loss does not depend on
    get zeros.  A non-finite leaf gradient raises :class:`NonFiniteError`.
    """
    if not isinstance(loss, Tensor) or not loss.tracked:
        raise ValueError("loss is not recorded on a tape")
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    tape = loss.tape
    tape._check_open()
    tape.consumed = True

    grads: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
    with np.errstate(all="ignore"):  # faults surface in the leaf check below
        _sweep(tape, loss.node, grads)

    def leaf_grad(t: Tensor):
        if t.tape is not tape:
            raise ValueError("tensor is not a leaf of the loss's tape")
        g = grads.get(t.node)
        if g is None:
            return np.zeros(t.shape)
        g = np.asarray(g).reshape(t.shape)
        _check_finite(g, "backward")
        return g

    if wrt is not None:
        return [leaf_grad(t) for t in wrt]
    return {t: leaf_grad(t) for t in tape._leaves}


def _sweep(tape, top: int, grads: dict) -> None:
    for node in range(top, -1, -1):
        g = grads.get(node)
        if g is None:
            continue
        vjp, parents = tape._records[node]
        if vjp is None:
            continue
        for parent, pg in zip(parents, vjp(g, _need(parents))):
            if parent is None:
                continue
            if parent in grads:
                grads[parent] = grads[parent] + pg
            else:
                grads[parent] = pg
        if node != top:
            del grads[node]  # interior grads are no longer needed


# -- serialization ------------------------------------------------------------

def write_tensor(f: BinaryIO, x) -> None:
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype="<f8", order="C")
    f.write(TENSOR_MAGIC)
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    f.write(arr.tobytes())


def read_tensor(f: BinaryIO) -> np.ndarray:
    magic = f.read(4)
    if magic != TENSOR_MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", f.read(4))
    dims = struct.unpack(f"<{rank}Q", f.read(8 * rank))
    n = int(np.prod(dims, dtype=np.int64))
    payload = f.read(8 * n)
    if len(payload) != 8 * n:
        raise ValueError("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)


def write_tensors(path, arrays: Iterable) -> None:
    with open(path, "wb") as f:
        for a in arrays:
            write_tensor(f, a)


def read_tensors(path) -> list[np.ndarray]:
    with open(path, "rb") as f:
        raw = f.read()
    buf, out = io.BytesIO(raw), []
    while buf.tell() < len(raw):
        out.append(read_tensor(buf))
    return out
