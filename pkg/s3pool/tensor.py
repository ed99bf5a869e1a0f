import math
from numbers import Real
from typing import Sequence, Union

import numpy as np
from attrs import field, frozen

from .exceptions import (
    IndexOutOfRange,
    InvalidAxes,
    InvalidDims,
    ShapeMismatch,
)

AXES = {"n": 0, "c": 1, "h": 2, "w": 3}
MAX_ELEMENTS = 2**31

Dims = tuple[int, int, int, int]
Operand = Union["Tensor4", Real]


def check_dims(dims: Sequence[int]) -> Dims:
    """Validate a (n, c, h, w) tuple.

    Raises:
        InvalidDims: Not four integers >= 1, or too many elements to allocate.
    """
    dims = tuple(dims)
    if len(dims) != 4 or not all(
        isinstance(d, (int, np.integer)) and d >= 1 for d in dims
    ):
        raise InvalidDims(dims)
    if math.prod(dims) > MAX_ELEMENTS:
        raise InvalidDims(dims)
    return tuple(int(d) for d in dims)


def _freeze(value) -> np.ndarray:
    if (
        isinstance(value, np.ndarray)
        and not value.flags.writeable
        and value.dtype in (np.float32, np.float64)
    ):
        return value
    arr = np.array(value, copy=True)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    arr.flags.writeable = False
    return arr


def _check_data(instance, attribute, value):
    if value.ndim != 4:
        raise InvalidDims(value.shape)
    check_dims(value.shape)


def _to_offsets(indices: Sequence[int], size: int) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size == 0:
        raise IndexOutOfRange("[]", size)
    bad = (idx < 1) | (idx > size)
    if bad.any():
        raise IndexOutOfRange(int(idx[bad][0]), size)
    return idx - 1


@frozen(eq=False)
class Tensor4:
    """Dense rank-4 array laid out as (batch, channel, height, width).

    The buffer is read-only once constructed; every operation returns a new
    tensor. Row and column indices in the public methods are 1-based.
    """

    data: np.ndarray = field(converter=_freeze, validator=_check_data)

    def __eq__(self, other):
        if not isinstance(other, Tensor4):
            return NotImplemented
        return self.dims == other.dims and bool(np.array_equal(self.data, other.data))

    @property
    def dims(self) -> Dims:
        return tuple(int(d) for d in self.data.shape)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        """Return the (read-only) underlying array."""
        return self.data

    def astype(self, dtype) -> "Tensor4":
        return Tensor4(self.data.astype(dtype))

    def _binary(self, other: Operand, op) -> "Tensor4":
        if isinstance(other, Tensor4):
            if other.dims != self.dims:
                raise ShapeMismatch(self.dims, other.dims)
            return Tensor4(op(self.data, other.data))
        return Tensor4(op(self.data, other))

    def add(self, other: Operand) -> "Tensor4":
        return self._binary(other, np.add)

    def sub(self, other: Operand) -> "Tensor4":
        return self._binary(other, np.subtract)

    def mul(self, other: Operand) -> "Tensor4":
        return self._binary(other, np.multiply)

    def scale(self, factor: Real) -> "Tensor4":
        return Tensor4(self.data * factor)

    __add__ = add
    __sub__ = sub
    __mul__ = mul

    def __neg__(self) -> "Tensor4":
        return self.scale(-1)

    def reduce(self, op: str, axes: Sequence[Union[str, int]]) -> "Tensor4":
        """Reduce with `max`, `mean` or `sum`, keeping reduced axes as singletons.

        Args:
            op (str): One of "max", "mean", "sum".
            axes (Sequence[str | int]): Axis names ("n", "c", "h", "w") or
                positions. An empty list returns a copy.

        Raises:
            InvalidAxes: Unknown axis or operation.
        """
        reducers = {"max": np.max, "mean": np.mean, "sum": np.sum}
        if op not in reducers:
            raise InvalidAxes(op)
        positions = set()
        for axis in axes:
            pos = AXES.get(axis, axis) if isinstance(axis, str) else axis
            if not isinstance(pos, (int, np.integer)) or not 0 <= pos < 4:
                raise InvalidAxes(tuple(axes))
            positions.add(int(pos))
        if not positions:
            return Tensor4(self.data)
        return Tensor4(reducers[op](self.data, axis=tuple(sorted(positions)), keepdims=True))

    def slice_rows_cols(self, rows: Sequence[int], cols: Sequence[int]) -> "Tensor4":
        """Gather `out[n, c, i, j] = self[n, c, rows[i], cols[j]]` (1-based indices).

        Raises:
            IndexOutOfRange: An index is outside the map or a list is empty.
        """
        r = _to_offsets(rows, self.dims[2])
        c = _to_offsets(cols, self.dims[3])
        return Tensor4(self.data[:, :, r[:, None], c[None, :]])

    def inner(self, other: "Tensor4") -> float:
        """Inner product over all elements."""
        if other.dims != self.dims:
            raise ShapeMismatch(self.dims, other.dims)
        return float(np.vdot(self.data, other.data))

    def __repr__(self):
        return f"Tensor4(dims={self.dims}, dtype={self.dtype})"


def zeros(dims: Sequence[int], dtype=np.float64) -> Tensor4:
    return Tensor4(np.zeros(check_dims(dims), dtype=dtype))


def full(dims: Sequence[int], value: Real, dtype=np.float64) -> Tensor4:
    return Tensor4(np.full(check_dims(dims), value, dtype=dtype))


def scatter_add_rows_cols(
    grad_out: Tensor4, rows: Sequence[int], cols: Sequence[int], target_dims: Sequence[int]
) -> Tensor4:
    """Adjoint of `Tensor4.slice_rows_cols`.

    Position (rows[i], cols[j]) of a zero tensor of `target_dims` receives
    grad_out[..., i, j]; repeated indices accumulate.

    Raises:
        ShapeMismatch: grad_out does not have |rows| x |cols| spatial dims.
        IndexOutOfRange: An index is outside the target map.
    """
    target_dims = check_dims(target_dims)
    r = _to_offsets(rows, target_dims[2])
    c = _to_offsets(cols, target_dims[3])
    expected = target_dims[:2] + (r.size, c.size)
    if grad_out.dims != expected:
        raise ShapeMismatch(grad_out.dims, expected)
    out = np.zeros(target_dims, dtype=grad_out.dtype)
    np.add.at(out, (slice(None), slice(None), r[:, None], c[None, :]), grad_out.data)
    return Tensor4(out)
