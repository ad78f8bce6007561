"""Bit-flip write noise on tensors.

A write is simulated with two fliptensors congruent to the tensor's bit view:
``f1`` marks bits that flip 0 -> 1 and ``f2`` bits that flip 1 -> 0.  The noisy
word is ``(x | f1) ^ (x & f2)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ElementType, Tensor, element_type, from_bits

TARGETS = frozenset({"activations", "weights", "biases"})

# Below this probability fliptensors are drawn by geometric gap sampling of
# flip positions; above it, word-at-a-time from random words.
SPARSE_BELOW = 0.03
COMPACT_BELOW = 4  # compact once fewer than 1/4 of the words are live


@dataclass(frozen=True)
class BitMask:
    """Thermometer mask: bits ``start_bit .. bit_width-1`` (MSB = position 0) are noisy."""

    dtype: ElementType
    start_bit: int
    word: int

    @property
    def noisy_bits(self) -> int:
        return self.dtype.bit_width - self.start_bit


def make_startbit_mask(dtype: ElementType | str, start_bit: int) -> BitMask:
    dtype = element_type(dtype)
    if not 0 <= start_bit <= dtype.bit_width:
        raise ValueError(f"start_bit must be in [0, {dtype.bit_width}] for {dtype}, got {start_bit}")
    return BitMask(dtype, start_bit, (1 << (dtype.bit_width - start_bit)) - 1)


@dataclass(frozen=True)
class NoiseSpec:
    p1: float
    p2: float
    mask: BitMask
    targets: frozenset = field(default=frozenset({"activations"}))
    seed: int = 0

    def __post_init__(self):
        for name in ("p1", "p2"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be a probability, got {p}")
        targets = frozenset(self.targets)
        if not targets:
            raise ValueError("noise targets must be non-empty")
        if not targets <= TARGETS:
            raise ValueError(f"unknown noise targets {sorted(targets - TARGETS)}")
        object.__setattr__(self, "targets", targets)

    @classmethod
    def symmetric(cls, p: float, dtype, start_bit: int = 0, targets=("activations",), seed: int = 0):
        return cls(p, p, make_startbit_mask(dtype, start_bit), frozenset(targets), seed)

    @property
    def dtype(self) -> ElementType:
        return self.mask.dtype

    @property
    def is_noop(self) -> bool:
        return self.mask.word == 0 or (self.p1 == 0.0 and self.p2 == 0.0)

    def with_dtype(self, dtype) -> NoiseSpec:
        """Same probabilities and start bit, mask rebuilt for another element type."""
        mask = make_startbit_mask(dtype, min(self.mask.start_bit, element_type(dtype).bit_width))
        return NoiseSpec(self.p1, self.p2, mask, self.targets, self.seed)


@dataclass(frozen=True)
class FlipTensorPair:
    f1: np.ndarray
    f2: np.ndarray


def bernoulli_words(n: int, p: float, mask: int, word_dtype, rng: np.random.Generator) -> np.ndarray:
    """``n`` words whose bits inside ``mask`` are independently 1 with probability ``p``."""
    word_dtype = np.dtype(word_dtype)
    if p <= 0.0 or mask == 0 or n == 0:
        return np.zeros(n, dtype=word_dtype)
    if p >= 1.0:
        return np.full(n, mask, dtype=word_dtype)
    if p < SPARSE_BELOW:
        return _sparse_words(n, p, mask, word_dtype, rng)
    return _dense_words(n, p, mask, word_dtype, rng)


def _random_words(n: int, word_dtype: np.dtype, rng: np.random.Generator) -> np.ndarray:
    per_raw = 8 // word_dtype.itemsize
    raw = rng.bit_generator.random_raw(-(-n // per_raw))
    return raw.view(word_dtype)[:n]


def _dense_words(n, p, mask, word_dtype, rng):
    # Each bit compares a fresh uniform U (revealed one binary digit per round)
    # against the exact binary expansion of p; the bit is 1 iff U < p.
    # Rounds run on the full array while most words still have undecided
    # bits (decided lanes are zero and contribute nothing), then switch to
    # the compacted set of live words.
    num, den = float(p).as_integer_ratio()
    depth = den.bit_length() - 1  # p == num / 2**depth
    out = np.zeros(n, dtype=word_dtype)
    undecided = np.full(n, mask, dtype=word_dtype)
    idx = None
    for k in range(1, depth + 1):
        r = _random_words(undecided.size, word_dtype, rng)
        if (num >> (depth - k)) & 1:
            hit = undecided & ~r
            if idx is None:
                out |= hit
            else:
                out[idx] |= hit
            undecided &= r
        else:
            undecided &= ~r
        live = np.count_nonzero(undecided)
        if live == 0:
            break
        if live < undecided.size // COMPACT_BELOW:
            keep = np.flatnonzero(undecided)
            idx = keep if idx is None else idx[keep]
            undecided = undecided[keep]
    return out


def _sparse_words(n, p, mask, word_dtype, rng):
    # Bernoulli process over the n*m maskable bits via geometric gaps.
    lanes = np.array([b for b in range(word_dtype.itemsize * 8) if (mask >> b) & 1], dtype=np.uint64)
    m = lanes.size
    total = n * m
    expected = total * p
    chunk = int(expected + 6.0 * np.sqrt(expected) + 16)
    log_q = np.log1p(-p)
    parts = []
    last = -1
    while True:
        # geometric gaps by inversion in float64; clamping keeps tiny p from overflowing int64
        with np.errstate(over="ignore", divide="ignore"):
            gaps = np.floor(np.log1p(-rng.random(chunk)) / log_q) + 1.0
        gaps = np.minimum(gaps, float(total + 1)).astype(np.int64)
        pos = last + np.cumsum(gaps)
        if pos[-1] >= total:
            parts.append(pos[pos < total])
            break
        parts.append(pos)
        last = int(pos[-1])
        chunk = max(16, chunk // 4)
    pos = np.concatenate(parts)
    out = np.zeros(n, dtype=word_dtype)
    if pos.size:
        bits = (np.ones(pos.size, dtype=np.uint64) << lanes[pos % m]).astype(word_dtype)
        np.bitwise_or.at(out, pos // m, bits)
    return out


def sample_fliptensors(shape_elems: int, spec: NoiseSpec, rng: np.random.Generator) -> FlipTensorPair:
    wd = spec.dtype.word_dtype
    f1 = bernoulli_words(shape_elems, spec.p1, spec.mask.word, wd, rng)
    f2 = bernoulli_words(shape_elems, spec.p2, spec.mask.word, wd, rng)
    return FlipTensorPair(f1, f2)


def flip_words(x: np.ndarray, f1: np.ndarray, f2: np.ndarray) -> np.ndarray:
    return (x | f1) ^ (x & f2)


def apply_bitflip_noise(x: Tensor, flips: FlipTensorPair) -> Tensor:
    words = x.words.reshape(-1)
    for name in ("f1", "f2"):
        f = getattr(flips, name)
        if f.dtype != words.dtype:
            raise TypeError(f"{name} has word dtype {f.dtype}, tensor {x.dtype} needs {words.dtype}")
        if f.size != words.size:
            raise ValueError(f"{name} has {f.size} words, tensor has {words.size} elements")
    y = flip_words(words, flips.f1.reshape(-1), flips.f2.reshape(-1))
    return from_bits(y, x.dtype, x.shape)


def inject(x: Tensor, spec: NoiseSpec, rng: np.random.Generator) -> Tensor:
    if x.dtype != spec.dtype:
        raise TypeError(f"noise mask is for {spec.dtype}, tensor is {x.dtype}")
    if spec.is_noop:
        return x
    return apply_bitflip_noise(x, sample_fliptensors(x.size, spec, rng))
