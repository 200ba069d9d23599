"""Dense 4-D tensor container, counter-based RNG, and comparison utilities.

Tensors are plain NCHW value containers backed by a C-contiguous numpy
array: batch outermost, then channel, row, column.  Storage is float32 by
default; the verification paths construct float64 tensors through the same
API.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import InvalidRangeError, ShapeError

Dims = tuple[int, int, int, int]

# Flat layout: index(n,c,h,w) = ((n*C + c)*H + h)*W + w.  Everything in the
# engine assumes this and nothing else.


def _check_dims(dims) -> Dims:
    if len(dims) != 4:
        raise ShapeError(f"expected 4 dims (n, c, h, w), got {dims!r}")
    dims = tuple(int(d) for d in dims)
    if any(d < 1 for d in dims):
        raise ShapeError(f"all dims must be >= 1, got {dims}")
    n, c, h, w = dims
    if n * c * h * w > 2**40:
        raise ShapeError(f"dimension product overflows sane limits: {dims}")
    return dims


class Tensor4D:
    """A (n, c, h, w) array of 32-bit reals (64-bit on the verification path)."""

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray):
        if data.ndim != 4:
            raise ShapeError(f"Tensor4D requires a 4-D array, got ndim={data.ndim}")
        _check_dims(data.shape)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float32)
        self.data = np.ascontiguousarray(data)

    @property
    def dims(self) -> Dims:
        return self.data.shape  # type: ignore[return-value]

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def copy(self) -> "Tensor4D":
        return Tensor4D(self.data.copy())

    def __repr__(self):
        return f"Tensor4D(dims={self.dims}, dtype={self.data.dtype})"

    # -- debug dump format: four u64 little-endian dims, then flat f32 ----

    def dump_bytes(self) -> bytes:
        header = struct.pack("<4Q", *self.dims)
        return header + self.data.astype("<f4").tobytes()

    @classmethod
    def load_bytes(cls, blob: bytes) -> "Tensor4D":
        dims = struct.unpack("<4Q", blob[:32])
        flat = np.frombuffer(blob[32:], dtype="<f4")
        if flat.size != int(np.prod(dims)):
            raise ShapeError(f"payload holds {flat.size} values, dims {dims} need {int(np.prod(dims))}")
        return cls(flat.reshape(dims).astype(np.float32))


class Rng:
    """Deterministic counter-based random stream (Philox).

    The same seed yields the same sequence no matter how the work consuming
    the numbers is partitioned across workers; generation itself is always a
    single bulk draw.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._calls = 0

    def _gen(self) -> np.random.Generator:
        # Fresh keyed stream per call: the (seed, call index) pair is the counter.
        g = np.random.Generator(np.random.Philox(key=(self.seed & (2**64 - 1), self._calls)))
        self._calls += 1
        return g

    def uniform(self, dims, lo: float, hi: float, dtype=np.float32) -> np.ndarray:
        if not lo < hi:
            raise InvalidRangeError(f"uniform range requires lo < hi, got [{lo}, {hi})")
        shape = tuple(int(d) for d in dims)
        u = self._gen().random(shape, dtype=np.float64)
        return ((hi - lo) * u + lo).astype(dtype)

    def normal(self, dims, dtype=np.float32) -> np.ndarray:
        shape = tuple(int(d) for d in dims)
        return self._gen().standard_normal(shape, dtype=np.float64).astype(dtype)

    def integers(self, lo: int, hi: int) -> int:
        return int(self._gen().integers(lo, hi))


def tensor_filled(dims, value: float, dtype=np.float32) -> Tensor4D:
    """A tensor of the given dims with every element equal to `value`."""
    dims = _check_dims(dims)
    return Tensor4D(np.full(dims, value, dtype=dtype))


def tensor_random(dims, rng: Rng, lo: float = 0.0, hi: float = 1.0, dtype=np.float32) -> Tensor4D:
    """A tensor with elements uniform in [lo, hi), reproducible from the rng seed."""
    dims = _check_dims(dims)
    return Tensor4D(rng.uniform(dims, lo, hi, dtype=dtype))


@dataclass
class ApproxReport:
    """Worst-element report from an approximate comparison."""

    ok: bool
    worst_index: tuple[int, int, int, int]
    abs_diff: float
    allowed: float

    def __str__(self):
        verdict = "ok" if self.ok else "MISMATCH"
        return (
            f"{verdict}: worst at {self.worst_index}, "
            f"|a-b|={self.abs_diff:.3e} vs allowed {self.allowed:.3e}"
        )


def tensor_approx_eq(
    a: Tensor4D | np.ndarray,
    b: Tensor4D | np.ndarray,
    rel_tol: float = 1e-5,
    abs_tol: float = 0.0,
) -> tuple[bool, ApproxReport]:
    """Elementwise |a-b| <= abs_tol + rel_tol*max(|a|,|b|), with a worst-offender report."""
    da = a.data if isinstance(a, Tensor4D) else np.asarray(a)
    db = b.data if isinstance(b, Tensor4D) else np.asarray(b)
    if da.shape != db.shape:
        raise ShapeError(f"shape mismatch: {da.shape} vs {db.shape}")
    diff = np.abs(da.astype(np.float64) - db.astype(np.float64))
    allowed = abs_tol + rel_tol * np.maximum(np.abs(da), np.abs(db)).astype(np.float64)
    margin = diff - allowed
    worst_flat = int(np.argmax(margin))
    idx = tuple(int(i) for i in np.unravel_index(worst_flat, da.shape))
    ok = bool(np.all(margin <= 0.0))
    report = ApproxReport(ok, idx, float(diff[idx]), float(allowed[idx]))
    return ok, report
