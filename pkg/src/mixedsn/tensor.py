"""Dense tensor helpers and the seeded random generator.

Tensors are plain C-contiguous numpy arrays of float32 or float64.  The
helpers here add the shape checks the rest of the package relies on and a
matmul with a fixed, left-to-right reduction order for deterministic runs.
"""

from __future__ import annotations

import contextlib
from typing import Iterator, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

DTYPES = (np.float32, np.float64)
DEFAULT_DTYPE = np.float32
RNG_ALGORITHM = "PCG64"


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _check_dtype(dtype) -> np.dtype:
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(d) for d in DTYPES):
        raise TypeError(f"unsupported dtype {dtype}; expected float32 or float64")
    return dtype


def as_tensor(values, dtype=DEFAULT_DTYPE) -> np.ndarray:
    return np.ascontiguousarray(values, dtype=_check_dtype(dtype))


def zeros(shape: Sequence[int], dtype=DEFAULT_DTYPE) -> np.ndarray:
    return np.zeros(tuple(shape), dtype=_check_dtype(dtype))


def fill(shape: Sequence[int], value: float, dtype=DEFAULT_DTYPE) -> np.ndarray:
    return np.full(tuple(shape), value, dtype=_check_dtype(dtype))


def reshape(t: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != t.size:
        raise ShapeError(f"cannot reshape {t.shape} ({t.size} values) to {shape}")
    return np.ascontiguousarray(t).reshape(shape)


def _same_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def ewise_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b, "add")
    return a + b


def ewise_max(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b, "max")
    return np.maximum(a, b)


def scale(a: np.ndarray, c: float) -> np.ndarray:
    return a * a.dtype.type(c)


def matmul(a: np.ndarray, b: np.ndarray, deterministic: bool = True) -> np.ndarray:
    """Matrix product of two 2-axis tensors.

    With ``deterministic`` set, every output entry is accumulated over the
    inner axis strictly left to right (one multiply and one add per step),
    which makes the result reproducible bit for bit against a naive triple
    loop.  Otherwise the BLAS kernel is used.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-axis operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} vs {b.shape}")
    if not deterministic:
        return a @ b
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.result_type(a, b))
    for k in range(a.shape[1]):
        out += a[:, k : k + 1] * b[k : k + 1, :]
    return out


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Return a PCG64 generator for ``seed`` and optional sub-stream keys.

    Sub-streams are derived with ``SeedSequence`` so that, e.g., the shuffle
    for epoch 3 is a pure function of ``(seed, 3)``.
    """
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    entropy = [int(seed), *(int(k) for k in keys)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


@contextlib.contextmanager
def deterministic_mode(enabled: bool = True) -> Iterator[None]:
    """Pin BLAS/OpenMP pools to one thread while the block runs."""
    if not enabled:
        yield
        return
    with threadpool_limits(limits=1):
        yield
