"""Dense float64 tensors in row-major NCHW layout.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. The helpers
here add the shape validation the rest of the package relies on and never
modify their inputs.
"""
from __future__ import annotations

import math
from typing import Sequence, Union

import numpy as np

Tensor = np.ndarray
Shape = Sequence[int]

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


def check_shape(shape: Shape) -> tuple[int, ...]:
    dims = tuple(int(d) for d in shape)
    if not 1 <= len(dims) <= 4:
        raise ShapeError(f"shape must have 1 to 4 dims, got {len(dims)}")
    if any(d < 1 for d in dims):
        raise ShapeError(f"every dim must be >= 1, got {dims}")
    if math.prod(dims) >= 2**63:
        raise ShapeError(f"element count of {dims} overflows a machine word")
    return dims


def _finite(t: Tensor) -> Tensor:
    # callers compute under np.errstate so overflow surfaces here as one error
    if not np.isfinite(t).all():
        raise FloatingPointError("operation produced non-finite values")
    return t


def as_tensor(data, shape: Shape | None = None) -> Tensor:
    """Copy ``data`` into a fresh contiguous float64 tensor."""
    t = np.array(data, dtype=DTYPE, order="C", copy=True)
    if shape is not None:
        t = reshape(t, shape)
    return t


def zeros(shape: Shape) -> Tensor:
    return np.zeros(check_shape(shape), dtype=DTYPE)


def elementwise(op: str, a: Tensor, b: Union[Tensor, float]) -> Tensor:
    """Apply ``add``, ``sub``, ``mul`` or ``scale`` entrywise.

    ``b`` may be a scalar for every op; ``scale`` requires it.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        return _elementwise(op, np.asarray(a, dtype=DTYPE), b)


def _elementwise(op, a, b):
    if op == "scale":
        if not np.isscalar(b):
            raise ShapeError("scale takes a scalar factor")
        return _finite(a * float(b))
    if not np.isscalar(b):
        b = np.asarray(b, dtype=DTYPE)
        if b.shape != a.shape:
            raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    if op == "add":
        out = a + b
    elif op == "sub":
        out = a - b
    elif op == "mul":
        out = a * b
    else:
        raise ValueError(f"unknown elementwise op {op!r}")
    return _finite(np.asarray(out, dtype=DTYPE))


def add(a, b):
    return elementwise("add", a, b)


def sub(a, b):
    return elementwise("sub", a, b)


def mul(a, b):
    return elementwise("mul", a, b)


def scale(a, factor: float):
    return elementwise("scale", a, factor)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dims disagree: {a.shape} @ {b.shape}")
    return _finite(a @ b)


def reshape(t: Tensor, new_shape: Shape) -> Tensor:
    dims = check_shape(new_shape)
    t = np.asarray(t, dtype=DTYPE)
    if math.prod(dims) != t.size:
        raise ShapeError(f"cannot reshape {t.size} elements into {dims}")
    return np.array(t.reshape(dims), copy=True)


def flatten(t: Tensor) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    t = np.asarray(t, dtype=DTYPE)
    if t.ndim == 1:
        return t.copy()
    return reshape(t, (t.shape[0], math.prod(t.shape[1:])))


def flat_index(shape: Shape, coords: Sequence[int]) -> int:
    """Row-major offset of ``coords``; last dim varies fastest."""
    dims = check_shape(shape)
    if len(coords) != len(dims):
        raise ShapeError(f"expected {len(dims)} coordinates, got {len(coords)}")
    idx = 0
    for c, d in zip(coords, dims):
        if not 0 <= c < d:
            raise IndexError(f"coordinate {c} out of range for dim {d}")
        idx = idx * d + c
    return idx


def unravel(shape: Shape, index: int) -> tuple[int, ...]:
    dims = check_shape(shape)
    if not 0 <= index < math.prod(dims):
        raise IndexError(f"flat index {index} out of range for {dims}")
    coords = []
    for d in reversed(dims):
        index, c = divmod(index, d)
        coords.append(c)
    return tuple(reversed(coords))
