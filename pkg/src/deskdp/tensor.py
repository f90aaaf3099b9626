"""Dense tensors with an explicit storage dtype and exact byte accounting.

FP16 tensors hold IEEE-754 binary16 values (numpy ``float16`` storage). Every
op widens its operands to float32, computes there, and rounds the result back
to binary16 with round-to-nearest-even. FP64 exists only as the reference
precision used by finite-difference oracles.
"""

from __future__ import annotations

import enum
from typing import Sequence

import numpy as np

from deskdp import kernels
from deskdp.errors import ShapeError

MAX_RANK = 4


class DType(enum.Enum):
    FP32 = "fp32"
    FP16 = "fp16"
    FP64 = "fp64"

    @property
    def width(self) -> int:
        return _WIDTH[self]

    @property
    def storage(self) -> np.dtype:
        return _STORAGE[self]

    @property
    def compute(self) -> np.dtype:
        """numpy dtype arithmetic is carried out in."""
        return np.dtype(np.float64) if self is DType.FP64 else np.dtype(np.float32)

    @classmethod
    def parse(cls, value) -> "DType":
        if isinstance(value, DType):
            return value
        return cls(str(value).lower())


_WIDTH = {DType.FP32: 4, DType.FP16: 2, DType.FP64: 8}
_STORAGE = {DType.FP32: np.dtype(np.float32), DType.FP16: np.dtype(np.float16), DType.FP64: np.dtype(np.float64)}

FP32 = DType.FP32
FP16 = DType.FP16
FP64 = DType.FP64


def check_shape(shape) -> tuple[int, ...]:
    shape = tuple(int(d) for d in shape)
    if len(shape) > MAX_RANK:
        raise ShapeError(f"rank {len(shape)} exceeds {MAX_RANK}")
    if any(d < 1 for d in shape):
        raise ShapeError(f"invalid shape {shape}: all dims must be >= 1")
    return shape


class Tensor:
    """Row-major buffer plus dtype. Treated as immutable once built."""

    __slots__ = ("data", "dtype")

    def __init__(self, data, dtype: DType | str = FP32):
        dtype = DType.parse(dtype)
        arr = np.asarray(data)
        check_shape(arr.shape)
        # float64 -> float16 would round twice if routed through float32; numpy
        # rounds directly from the source dtype, which is what we want.
        with np.errstate(over="ignore"):
            self.data = np.asarray(arr, dtype=dtype.storage, order="C")
        self.dtype = dtype

    @classmethod
    def _wrap(cls, arr: np.ndarray, dtype: DType) -> "Tensor":
        t = object.__new__(cls)
        with np.errstate(over="ignore"):  # FP16 overflow to inf is intended
            t.data = np.asarray(arr, dtype=dtype.storage, order="C")
        t.dtype = dtype
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def numel(self) -> int:
        return int(self.data.size)

    @property
    def bytes(self) -> int:
        return self.numel * self.dtype.width

    def widen(self) -> np.ndarray:
        """Values in the compute dtype (exact for every storage dtype)."""
        return self.data.astype(self.dtype.compute)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.numel != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def astype(self, dtype: DType | str) -> "Tensor":
        dtype = DType.parse(dtype)
        if dtype is self.dtype:
            return self
        return Tensor._wrap(self.data, dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.value})"

    def __eq__(self, other):
        return NotImplemented

    __hash__ = object.__hash__


def from_compute(arr: np.ndarray, dtype: DType) -> Tensor:
    """Round a compute-precision result into ``dtype`` storage."""
    return Tensor._wrap(arr, dtype)


def tensor_create(shape: Sequence[int], dtype: DType | str = FP32, fill: float | None = 0.0,
                  seed: int | None = None, low: float = 0.0, high: float = 1.0) -> Tensor:
    """Constant-filled tensor, or seeded uniform values on ``[low, high)`` when ``seed`` is given."""
    shape = check_shape(shape)
    dtype = DType.parse(dtype)
    if seed is not None:
        rng = np.random.default_rng(seed)
        arr = rng.uniform(low, high, size=shape)
    else:
        arr = np.full(shape, fill, dtype=np.float64)
    return Tensor(arr, dtype)


def byte_size(t: Tensor) -> int:
    return t.bytes


def _same_dtype(*ts: Tensor) -> DType:
    dt = ts[0].dtype
    for t in ts[1:]:
        if t.dtype is not dt:
            raise ShapeError(f"dtype mismatch: {dt.value} vs {t.dtype.value}")
    return dt


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if len(a.shape) != 2 or len(b.shape) != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    dt = _same_dtype(a, b)
    return from_compute(kernels.matmul(a.widen(), b.widen()), dt)


def conv2d(x: Tensor, k: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    if len(x.shape) != 4 or len(k.shape) != 4:
        raise ShapeError(f"conv2d needs NCHW input and OCkk kernel, got {x.shape} and {k.shape}")
    if x.shape[1] != k.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape[1]}, kernel {k.shape[1]}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"invalid stride {stride} / pad {pad}")
    ho = kernels.conv_out_size(x.shape[2], k.shape[2], stride, pad)
    wo = kernels.conv_out_size(x.shape[3], k.shape[3], stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be {ho}x{wo}")
    dt = _same_dtype(x, k)
    return from_compute(kernels.conv2d_forward(x.widen(), k.widen(), stride, pad), dt)


UNARY = ("relu", "leaky_relu", "exp")
BINARY = ("add", "sub", "mul")


def leaky_relu_array(x: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x >= 0, x, x * x.dtype.type(slope))


def elementwise(kind: str, a: Tensor, b: Tensor | None = None, slope: float = 0.01) -> Tensor:
    if kind in BINARY:
        if b is None:
            raise ShapeError(f"{kind} needs two operands")
        if a.shape != b.shape:
            raise ShapeError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")
        dt = _same_dtype(a, b)
        x, y = a.widen(), b.widen()
        out = {"add": np.add, "sub": np.subtract, "mul": np.multiply}[kind](x, y)
    elif kind in UNARY:
        dt = a.dtype
        x = a.widen()
        if kind == "relu":
            out = np.maximum(x, x.dtype.type(0))
        elif kind == "leaky_relu":
            out = leaky_relu_array(x, slope)
        else:
            out = np.exp(x)
    else:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return from_compute(out, dt)


def _norm_axes(axes, rank) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(rank))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -rank <= ax < rank:
            raise ShapeError(f"axis {ax} out of range for rank {rank}")
        out.append(ax % rank)
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated axis in {axes}")
    return tuple(sorted(out))


def reduce(kind: str, a: Tensor, axes=None) -> Tensor:
    """sum / mean / max over ``axes`` (all axes when None). Result keeps the input dtype."""
    axes = _norm_axes(axes, len(a.shape))
    x = a.widen()
    if kind == "sum":
        out = np.sum(x, axis=axes)
    elif kind == "mean":
        out = np.mean(x, axis=axes)
    elif kind == "max":
        out = np.max(x, axis=axes)
    else:
        raise ValueError(f"unknown reduce kind {kind!r}")
    return from_compute(np.asarray(out, dtype=x.dtype), a.dtype)
