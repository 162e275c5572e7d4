"""Dense n-dimensional float tensors and the primitive kernels everything else uses.

Tensors are immutable values: the underlying buffer is marked read-only and
every operation returns a fresh tensor.  Storage is a row-major flat buffer;
image data uses a channel-first (C, H, W) layout throughout the package.

Two precisions exist: float32 for training (the default) and float64 for
finite-difference gradient checking.  The active default is switched globally
with `set_default_dtype` or scoped with the `precision` context manager;
operations always preserve the dtype of their operands, so a graph built
under `precision("float64")` stays 64-bit.

There is no broadcasting beyond scalar-with-tensor: binary operations demand
exactly equal shapes.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "DomainError",
    "zeros",
    "ones",
    "elementwise",
    "matmul",
    "concat",
    "reduce",
    "slice_along",
    "set_default_dtype",
    "get_default_dtype",
    "precision",
]


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's shape rule."""


class DomainError(ValueError):
    """Raised when operand values leave an operation's domain (log <= 0, x/0, ...)."""


_FLOAT_DTYPES = {np.dtype(np.float32), np.dtype(np.float64)}
_default_dtype = np.dtype(np.float32)


def set_default_dtype(dtype) -> None:
    dt = np.dtype(dtype)
    if dt not in _FLOAT_DTYPES:
        raise ValueError(f"default dtype must be float32 or float64, got {dt}")
    global _default_dtype
    _default_dtype = dt


def get_default_dtype() -> np.dtype:
    return _default_dtype


@contextmanager
def precision(dtype):
    """Temporarily switch the default dtype (used for 64-bit gradient checks)."""
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


class Tensor:
    """An immutable n-dimensional array of float32 or float64 values.

    The shape is fixed at construction; `reshape` returns a new tensor sharing
    the same element count.  Scalar results of full reductions are represented
    with shape ().
    """

    __slots__ = ("_data",)

    def __init__(self, data, dtype=None):
        if isinstance(data, Tensor):
            if dtype is None:
                dtype = data.dtype  # re-wrapping keeps precision
            data = data._data
        if dtype is None:
            dtype = _default_dtype
        arr = np.ascontiguousarray(data, dtype=np.dtype(dtype))
        arr = arr.copy() if not arr.flags.owndata else arr
        arr.flags.writeable = False
        self._data = arr

    @property
    def data(self) -> np.ndarray:
        """The underlying read-only numpy buffer."""
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def dtype(self) -> np.dtype:
        return self._data.dtype

    @property
    def size(self) -> int:
        return self._data.size

    @property
    def ndim(self) -> int:
        return self._data.ndim

    def reshape(self, shape) -> "Tensor":
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape, dtype=np.int64)) != self.size:
            raise ShapeError(f"cannot reshape {self.shape} (size {self.size}) into {shape}")
        return Tensor(self._data.reshape(shape), dtype=self.dtype)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self._data, dtype=dtype)

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() on tensor of size {self.size}")
        return float(self._data.reshape(()))

    def tolist(self):
        return self._data.tolist()

    # Arithmetic sugar; all routed through `elementwise` so the shape and
    # domain rules live in one place.
    def __add__(self, other):
        return elementwise("add", self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return elementwise("div", self, other)

    def __neg__(self):
        return elementwise("mul", self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name})"


def _check_dims(shape) -> tuple[int, ...]:
    dims = tuple(int(d) for d in shape)
    if len(dims) == 0:
        raise ShapeError("shape must list at least one dimension")
    for d in dims:
        if d < 1:
            raise ShapeError(f"dimensions must be >= 1, got {dims}")
    return dims


def zeros(shape) -> Tensor:
    """Tensor of the given shape filled with 0.0."""
    return Tensor(np.zeros(_check_dims(shape), dtype=_default_dtype))


def ones(shape) -> Tensor:
    """Tensor of the given shape filled with 1.0."""
    return Tensor(np.ones(_check_dims(shape), dtype=_default_dtype))


_BINARY = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
    "max": np.maximum,
}
_UNARY = {"exp": np.exp, "log": np.log}


def elementwise(op: str, a: Tensor, b=None) -> Tensor:
    """Apply `op` elementwise.

    Binary ops (add, sub, mul, div, max) take a second tensor of identical
    shape or a python scalar; unary ops (exp, log) take only `a`.  Division by
    zero and log of a non-positive value raise DomainError naming the op.
    """
    if not isinstance(a, Tensor):
        raise TypeError("first operand must be a Tensor")
    if op in _UNARY:
        if b is not None:
            raise TypeError(f"{op} is unary")
        if op == "log" and not np.all(a.data > 0):
            raise DomainError("log: all inputs must be > 0")
        return Tensor(_UNARY[op](a.data), dtype=a.dtype)
    if op not in _BINARY:
        raise ValueError(f"unknown elementwise op {op!r}")
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
        if a.dtype != b.dtype:
            raise TypeError(f"{op}: mixed precisions {a.dtype} vs {b.dtype}")
        bval = b.data
    elif isinstance(b, (int, float)):
        bval = a.dtype.type(b)
    else:
        raise TypeError(f"{op}: second operand must be Tensor or scalar, got {type(b)}")
    if op == "div" and np.any(bval == 0):
        raise DomainError("div: zero divisor")
    return Tensor(_BINARY[op](a.data, bval), dtype=a.dtype)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Standard matrix product of a (m, k) and a (k, n) tensor."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    if a.dtype != b.dtype:
        raise TypeError(f"matmul: mixed precisions {a.dtype} vs {b.dtype}")
    return Tensor(a.data @ b.data, dtype=a.dtype)


def concat(tensors, axis: int) -> Tensor:
    """Concatenate along `axis`; all other dimensions must agree."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    first = tensors[0]
    if not (0 <= axis < first.ndim):
        raise ShapeError(f"concat axis {axis} out of range for rank {first.ndim}")
    for t in tensors[1:]:
        if t.ndim != first.ndim:
            raise ShapeError("concat: rank mismatch")
        if t.dtype != first.dtype:
            raise TypeError(f"concat: mixed precisions {first.dtype} vs {t.dtype}")
        for ax, (da, db) in enumerate(zip(first.shape, t.shape)):
            if ax != axis and da != db:
                raise ShapeError(f"concat: shapes {first.shape} and {t.shape} differ off-axis")
    return Tensor(np.concatenate([t.data for t in tensors], axis=axis), dtype=first.dtype)


def reduce(op: str, t: Tensor, axis=None):
    """Reduce with sum, mean or max.

    axis=None reduces everything to a python float; an integer axis removes
    that axis and returns a tensor.
    """
    fns = {"sum": np.sum, "mean": np.mean, "max": np.max}
    if op not in fns:
        raise ValueError(f"unknown reduce op {op!r}")
    if axis is None:
        return float(fns[op](t.data))
    if not (0 <= axis < t.ndim):
        raise ShapeError(f"reduce axis {axis} out of range for rank {t.ndim}")
    out = fns[op](t.data, axis=axis)
    return Tensor(out, dtype=t.dtype)


def slice_along(t: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start, stop) along one axis (inverse of concat)."""
    if not (0 <= axis < t.ndim):
        raise ShapeError(f"slice axis {axis} out of range for rank {t.ndim}")
    index = [slice(None)] * t.ndim
    index[axis] = slice(start, stop)
    return Tensor(t.data[tuple(index)], dtype=t.dtype)
