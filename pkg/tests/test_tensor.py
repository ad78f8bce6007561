from fractions import Fraction
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rramflip.tensor import (
    BFLOAT16, DTYPES, FLOAT16, FLOAT32, FLOAT64, INT8, UINT8,
    ElementType, Tensor, UnsupportedDtypeError, bit_view, cast, from_bits,
)


def round_to_format(x: float, ebits: int, mbits: int) -> float:
    """Exact round-to-nearest-even of a finite float into a binary format, via Fractions."""
    if x == 0 or math.isinf(x):
        return x
    bias = (1 << (ebits - 1)) - 1
    emin = 1 - bias
    v = Fraction(x)
    sign = -1 if v < 0 else 1
    v = abs(v)
    e = max(math.floor(math.log2(v)), emin)
    # fix log2 rounding at power-of-two boundaries
    while Fraction(2) ** e > v and e > emin:
        e -= 1
    while Fraction(2) ** (e + 1) <= v:
        e += 1
    ulp = Fraction(2) ** (e - mbits)
    q, r = divmod(v, ulp)
    if r > ulp / 2 or (r == ulp / 2 and q % 2 == 1):
        q += 1
    out = q * ulp
    max_finite = (2 - Fraction(2) ** -mbits) * Fraction(2) ** bias
    if out > max_finite:
        return sign * math.inf
    return sign * float(out)


class TestElementTypes:
    def test_layouts(self):
        expected = {"float16": (5, 10), "bfloat16": (8, 7), "float32": (8, 23), "float64": (11, 52)}
        for kind, (e, m) in expected.items():
            t = DTYPES[kind]
            assert (t.exponent_bits, t.mantissa_bits) == (e, m)
            assert t.bit_width == 1 + e + m

    def test_integer_kinds(self):
        for t in (INT8, UINT8):
            assert t.bit_width == 8 and t.exponent_bits == 0 and t.mantissa_bits == 0

    def test_unknown_kind_rejected(self):
        with pytest.raises(UnsupportedDtypeError):
            Tensor.from_values([1.0], "float8")
        with pytest.raises(UnsupportedDtypeError):
            from_bits(np.zeros(2, np.uint16), ElementType("float8", 16, 4, 11, True))


class TestBitView:
    def test_float32_one(self):
        assert bit_view(Tensor.from_values([1.0], FLOAT32))[0] == 0x3F800000

    def test_float32_negative_zero(self):
        assert bit_view(Tensor.from_values([-0.0], FLOAT32))[0] == 0x80000000

    def test_bfloat16_one(self):
        # top half of the float32 pattern 0x3F800000
        assert bit_view(Tensor.from_values([1.0], BFLOAT16))[0] == 0x3F80

    def test_view_is_a_copy(self):
        t = Tensor.from_values([1.0, 2.0], FLOAT32)
        w = bit_view(t)
        w[0] = 0
        assert t.values()[0] == 1.0
        assert from_bits(w, FLOAT32).values()[0] == 0.0

    def test_tensor_buffer_is_read_only(self):
        t = Tensor.from_values([1.0], FLOAT32)
        with pytest.raises(ValueError):
            t.data[0] = 2.0

    def test_rejects_non_tensor(self):
        with pytest.raises(TypeError):
            bit_view(np.zeros(3))

    @pytest.mark.parametrize("dtype", [FLOAT16, BFLOAT16, INT8, UINT8], ids=str)
    def test_round_trip_exhaustive(self, dtype):
        words = np.arange(2 ** dtype.bit_width, dtype=np.uint64).astype(dtype.word_dtype)
        assert np.array_equal(bit_view(from_bits(words, dtype)), words)

    @pytest.mark.parametrize("dtype", [FLOAT32, FLOAT64], ids=str)
    def test_round_trip_random(self, dtype):
        rng = np.random.default_rng(7)
        words = rng.integers(0, 2**63, size=1_000_000, dtype=np.uint64) * np.uint64(2) + np.uint64(1)
        words = words.astype(dtype.word_dtype)
        # include NaN payloads, infinities and signed zeros explicitly
        special = np.array([0x7F800001, 0xFFC00123, 0x7F800000, 0xFF800000, 0, 0x80000000], dtype=np.uint64)
        if dtype == FLOAT64:
            special = np.array([0x7FF0000000000001, 0xFFF8000000000ABC, 0x7FF0000000000000, 0x8000000000000000],
                               dtype=np.uint64)
        words = np.concatenate([words, special.astype(dtype.word_dtype)])
        assert np.array_equal(bit_view(from_bits(words, dtype)), words)


class TestCast:
    def test_float16_one(self):
        h = cast(Tensor.from_values([1.0], FLOAT32), FLOAT16)
        assert h.values()[0] == 1.0 and bit_view(h)[0] == 0x3C00

    def test_float16_overflow(self):
        h = cast(Tensor.from_values([65536.0, -1e6, 65504.0], FLOAT32), FLOAT16)
        assert h.values()[0] == np.inf and h.values()[1] == -np.inf and h.values()[2] == 65504.0

    def test_bfloat16_tenth(self):
        b = cast(Tensor.from_values([0.1], FLOAT32), BFLOAT16)
        assert cast(b, FLOAT32).values()[0] == np.float32(0.10009765625)

    def test_bfloat16_keeps_nan(self):
        b = cast(Tensor.from_values([np.nan, -np.nan], FLOAT32), BFLOAT16)
        assert np.all(np.isnan(b.values()))

    def test_integer_saturation_and_rounding(self):
        t = Tensor.from_values([2.5, 3.5, -2.5, 300.0, -300.0, np.nan], FLOAT32)
        assert cast(t, INT8).values().tolist() == [2, 4, -2, 127, -128, 0]
        assert cast(t, UINT8).values().tolist() == [2, 4, 0, 255, 0, 0]

    @pytest.mark.parametrize("dtype", [FLOAT16, BFLOAT16, FLOAT32], ids=str)
    def test_rounding_matches_exact_oracle(self, dtype):
        rng = np.random.default_rng(11)
        scale = {FLOAT16: 8.0, BFLOAT16: 60.0, FLOAT32: 60.0}[dtype]
        x = rng.standard_normal(3000) * np.exp2(rng.uniform(-scale, scale, 3000))
        # values sitting exactly on rounding ties
        ties = np.array([1.0 + 2.0 ** -(dtype.mantissa_bits + 1), 1.0 + 3 * 2.0 ** -(dtype.mantissa_bits + 1)])
        x = np.concatenate([x, ties, -ties])
        got = Tensor.from_values(x, dtype).values().astype(np.float64)
        want = np.array([round_to_format(float(v), dtype.exponent_bits, dtype.mantissa_bits) for v in x])
        assert np.array_equal(got, want)

    def test_float64_to_bfloat16_avoids_double_rounding(self):
        # just above a bfloat16 tie: RNE via float32 first would land on the tie and round to even
        x = 1.0 + 2.0 ** -8 + 2.0 ** -40
        b = Tensor.from_values(np.array([x]), BFLOAT16).values()[0]
        assert b == round_to_format(x, 8, 7) == 1.0 + 2.0 ** -7

    @pytest.mark.parametrize("narrow", [FLOAT16, BFLOAT16], ids=str)
    @pytest.mark.parametrize("wide", [FLOAT32, FLOAT64], ids=str)
    def test_widen_then_narrow_is_identity(self, narrow, wide):
        words = np.arange(2**16, dtype=np.uint32).astype(np.uint16)
        t = from_bits(words, narrow)
        finite = np.isfinite(t.values())
        back = cast(cast(t, wide), narrow)
        assert np.array_equal(bit_view(back)[finite], words[finite])


@settings(max_examples=200, deadline=None)
@given(st.floats(allow_nan=False, width=32))
def test_float32_values_survive_float64_round_trip(v):
    t = Tensor.from_values(np.array([v], np.float32), FLOAT32)
    assert bit_view(cast(cast(t, FLOAT64), FLOAT32))[0] == bit_view(t)[0]
