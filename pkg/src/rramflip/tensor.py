"""Typed dense tensors with a bit-exact word view.

Every supported element type is stored as a numpy array whose raw bytes are
the IEEE-754 (or two's complement) encoding of the elements.  bfloat16 has no
numpy dtype, so it is stored directly as ``uint16`` words.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import prod

import numpy as np


class UnsupportedDtypeError(TypeError):
    """Raised for element types outside the six supported kinds."""


@dataclass(frozen=True)
class ElementType:
    kind: str
    bit_width: int
    exponent_bits: int
    mantissa_bits: int
    has_sign: bool

    @property
    def is_float(self) -> bool:
        return self.exponent_bits > 0

    @property
    def word_dtype(self) -> np.dtype:
        return np.dtype(f"uint{self.bit_width}")

    @property
    def storage_dtype(self) -> np.dtype:
        return np.dtype(_STORAGE[self.kind])

    @property
    def compute_dtype(self) -> np.dtype:
        """Dtype arithmetic is carried out in (16-bit floats widen to float32)."""
        if self.kind == "float64":
            return np.dtype(np.float64)
        if self.is_float:
            return np.dtype(np.float32)
        return np.dtype(np.int32)

    def __str__(self) -> str:
        return self.kind


FLOAT16 = ElementType("float16", 16, 5, 10, True)
BFLOAT16 = ElementType("bfloat16", 16, 8, 7, True)
FLOAT32 = ElementType("float32", 32, 8, 23, True)
FLOAT64 = ElementType("float64", 64, 11, 52, True)
INT8 = ElementType("int8", 8, 0, 0, True)
UINT8 = ElementType("uint8", 8, 0, 0, False)

DTYPES = {t.kind: t for t in (FLOAT16, BFLOAT16, FLOAT32, FLOAT64, INT8, UINT8)}

_STORAGE = {
    "float16": np.float16,
    "bfloat16": np.uint16,
    "float32": np.float32,
    "float64": np.float64,
    "int8": np.int8,
    "uint8": np.uint8,
}


def element_type(kind: str | ElementType) -> ElementType:
    if isinstance(kind, ElementType):
        if DTYPES.get(kind.kind) != kind:
            raise UnsupportedDtypeError(f"unsupported element type {kind!r}")
        return kind
    try:
        return DTYPES[kind]
    except KeyError:
        raise UnsupportedDtypeError(
            f"unsupported element type {kind!r}; expected one of {sorted(DTYPES)}"
        ) from None


class Tensor:
    """Row-major tensor; the backing buffer is read-only after construction."""

    __slots__ = ("shape", "dtype", "data")

    def __init__(self, data: np.ndarray, dtype: ElementType | str):
        dtype = element_type(dtype)
        data = np.ascontiguousarray(data)
        if data.dtype != dtype.storage_dtype:
            raise TypeError(
                f"buffer dtype {data.dtype} does not store {dtype.kind} "
                f"(expected {dtype.storage_dtype})"
            )
        data.flags.writeable = False
        self.shape = tuple(data.shape)
        self.dtype = dtype
        self.data = data

    @classmethod
    def from_values(cls, values, dtype: ElementType | str = FLOAT32) -> Tensor:
        """Build a tensor by rounding arbitrary numeric values into ``dtype``."""
        dtype = element_type(dtype)
        return cls(_encode(np.asarray(values), dtype), dtype)

    @property
    def size(self) -> int:
        return prod(self.shape)

    @property
    def words(self) -> np.ndarray:
        """Zero-copy, read-only bit view."""
        return self.data.view(self.dtype.word_dtype)

    def values(self) -> np.ndarray:
        """Element values widened to the compute dtype (exact for every kind)."""
        if self.dtype.kind == "bfloat16":
            return (self.data.astype(np.uint32) << 16).view(np.float32)
        return self.data.astype(self.dtype.compute_dtype)

    def reshape(self, *shape) -> Tensor:
        return Tensor(self.data.reshape(*shape), self.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.kind})"


def bit_view(t: Tensor) -> np.ndarray:
    """Copy of the element bit patterns as unsigned words of ``bit_width`` bits."""
    if not isinstance(t, Tensor):
        raise TypeError(f"expected Tensor, got {type(t).__name__}")
    element_type(t.dtype)
    return t.words.copy()


def from_bits(words, dtype: ElementType | str, shape=None) -> Tensor:
    """Materialise a tensor whose element bit patterns are exactly ``words``."""
    dtype = element_type(dtype)
    words = np.asarray(words)
    if words.dtype != dtype.word_dtype:
        if words.dtype.kind not in "ui":
            raise TypeError(f"bit words must be integers, got {words.dtype}")
        words = words.astype(dtype.word_dtype)
    data = np.ascontiguousarray(words).view(dtype.storage_dtype)
    if shape is not None:
        data = data.reshape(shape)
    return Tensor(data.copy(), dtype)


def cast(t: Tensor, target: ElementType | str) -> Tensor:
    """Round-to-nearest-even conversion; overflow gives inf (floats) or saturates (ints)."""
    target = element_type(target)
    if target == t.dtype:
        return t
    return Tensor(_encode(t.values(), target), target)


def _encode(values: np.ndarray, target: ElementType) -> np.ndarray:
    """Round numeric ``values`` into the storage representation of ``target``."""
    if target.kind == "bfloat16":
        return _to_bfloat16_words(values)
    if target.is_float:
        with np.errstate(over="ignore", invalid="ignore"):
            return values.astype(target.storage_dtype)
    info = np.iinfo(target.storage_dtype)
    if values.dtype.kind in "ui":
        return np.clip(values, info.min, info.max).astype(target.storage_dtype)
    v = np.rint(values.astype(np.float64))
    v = np.where(np.isnan(v), 0.0, v)
    return np.clip(v, info.min, info.max).astype(target.storage_dtype)


def _to_bfloat16_words(values: np.ndarray) -> np.ndarray:
    if values.dtype.kind in "ui":
        values = values.astype(np.float64)
    if values.dtype == np.float64:
        f32 = _float64_to_float32_round_odd(values)
    else:
        f32 = values.astype(np.float32)
    bits = np.ascontiguousarray(f32).view(np.uint32)
    nan = np.isnan(f32)
    lsb = (bits >> 16) & 1
    rounded = ((bits + np.uint32(0x7FFF) + lsb) >> 16).astype(np.uint16)
    # keep NaNs NaN after truncating the payload
    quiet = ((bits >> 16) | 0x0040).astype(np.uint16)
    return np.where(nan, quiet, rounded)


def _float64_to_float32_round_odd(x: np.ndarray) -> np.ndarray:
    """float64 -> float32 with round-to-odd, so a following RNE step to bfloat16
    equals direct RNE from float64 (no double rounding)."""
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(over="ignore", invalid="ignore"):
        t = x.astype(np.float32)
    bits = t.view(np.uint32).copy()
    finite_in = np.isfinite(x)
    away = finite_in & (np.abs(t.astype(np.float64)) > np.abs(x))
    bits[away] -= 1  # step magnitude one ulp toward zero (sign-magnitude encoding)
    inexact = finite_in & (bits.view(np.float32).astype(np.float64) != x)
    bits[inexact] |= 1
    return bits.view(np.float32)
