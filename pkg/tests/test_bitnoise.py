import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rramflip import bitnoise
from rramflip.bitnoise import (
    FlipTensorPair, NoiseSpec, apply_bitflip_noise, bernoulli_words, inject, make_startbit_mask,
    sample_fliptensors,
)
from rramflip.rng import stream
from rramflip.tensor import BFLOAT16, FLOAT16, FLOAT32, FLOAT64, INT8, UINT8, Tensor, bit_view, from_bits

FLOAT_TYPES = [FLOAT16, BFLOAT16, FLOAT32, FLOAT64, INT8]


def popcount(words: np.ndarray) -> int:
    return int(np.unpackbits(np.ascontiguousarray(words).view(np.uint8)).sum())


def reference_flip(x: int, f1: int, f2: int, width: int) -> int:
    """Per-bit two-branch definition: a 0 bit becomes f1, a 1 bit survives unless f2."""
    y = 0
    for b in range(width):
        xb, f1b, f2b = (x >> b) & 1, (f1 >> b) & 1, (f2 >> b) & 1
        yb = f1b if xb == 0 else 1 - f2b
        y |= yb << b
    return y


class TestStartBitMask:
    def test_all_bits(self):
        assert make_startbit_mask(FLOAT32, 0).word == 0xFFFFFFFF

    def test_mantissa_only(self):
        assert make_startbit_mask(FLOAT32, 9).word == 0x007FFFFF

    def test_all_but_sign_half(self):
        assert make_startbit_mask(FLOAT16, 1).word == 0x7FFF

    def test_empty(self):
        assert make_startbit_mask(FLOAT64, 64).word == 0

    @pytest.mark.parametrize("bad", [-1, 33])
    def test_out_of_range(self, bad):
        with pytest.raises(ValueError):
            make_startbit_mask(FLOAT32, bad)

    @given(st.sampled_from(FLOAT_TYPES), st.data())
    def test_thermometer_shape(self, dtype, data):
        start = data.draw(st.integers(0, dtype.bit_width))
        word = make_startbit_mask(dtype, start).word
        assert bin(word).count("1") == dtype.bit_width - start
        assert word >> (dtype.bit_width - start) == 0


class TestNoiseSpec:
    def test_rejects_bad_probability(self):
        with pytest.raises(ValueError):
            NoiseSpec(1.5, 0.0, make_startbit_mask(FLOAT32, 0))

    def test_rejects_empty_targets(self):
        with pytest.raises(ValueError):
            NoiseSpec(0.1, 0.1, make_startbit_mask(FLOAT32, 0), frozenset())

    def test_rejects_unknown_target(self):
        with pytest.raises(ValueError):
            NoiseSpec.symmetric(0.1, FLOAT32, targets=["gradients"])

    def test_symmetric_defaults(self):
        s = NoiseSpec.symmetric(1e-3, FLOAT32)
        assert s.p1 == s.p2 == 1e-3 and s.targets == {"activations"}


class TestOperator:
    def test_figure_example(self):
        x = Tensor(np.array([0b1010], np.uint8), UINT8)
        flips = FlipTensorPair(np.array([0b0100], np.uint8), np.array([0b0010], np.uint8))
        assert bit_view(apply_bitflip_noise(x, flips))[0] == 0b1100

    def test_zero_fliptensors_identity(self):
        x = Tensor.from_values(np.linspace(-3, 3, 17), FLOAT32)
        z = np.zeros(17, np.uint32)
        assert np.array_equal(bit_view(apply_bitflip_noise(x, FlipTensorPair(z, z))), bit_view(x))

    def test_full_fliptensors_invert(self):
        x = Tensor.from_values(np.linspace(-3, 3, 17), FLOAT32)
        ones = np.full(17, 0xFFFFFFFF, np.uint32)
        assert np.array_equal(bit_view(apply_bitflip_noise(x, FlipTensorPair(ones, ones))), ~bit_view(x))

    def test_truth_table_exhaustive_4bit(self):
        g = np.arange(16, dtype=np.uint8)
        x, f1, f2 = (a.ravel() for a in np.meshgrid(g, g, g, indexing="ij"))
        y = bit_view(apply_bitflip_noise(Tensor(x, UINT8), FlipTensorPair(f1, f2)))
        ref = np.array([reference_flip(int(a), int(b), int(c), 4) for a, b, c in zip(x, f1, f2)])
        assert y.size == 4096 and np.array_equal(y, ref)

    def test_shape_mismatch(self):
        x = Tensor.from_values(np.zeros(4), FLOAT32)
        with pytest.raises(ValueError):
            apply_bitflip_noise(x, FlipTensorPair(np.zeros(3, np.uint32), np.zeros(3, np.uint32)))

    def test_dtype_mismatch(self):
        x = Tensor.from_values(np.zeros(4), FLOAT32)
        with pytest.raises(TypeError):
            apply_bitflip_noise(x, FlipTensorPair(np.zeros(4, np.uint16), np.zeros(4, np.uint16)))

    def test_preserves_shape_and_dtype(self):
        x = Tensor.from_values(np.ones((2, 3, 4)), FLOAT16)
        y = inject(x, NoiseSpec.symmetric(0.3, FLOAT16, seed=1), stream(1))
        assert y.shape == x.shape and y.dtype == FLOAT16


class TestSampling:
    def test_zero_probability(self):
        f = sample_fliptensors(1000, NoiseSpec(0.0, 0.0, make_startbit_mask(FLOAT32, 0)), stream(0))
        assert not f.f1.any() and not f.f2.any()

    def test_unit_probability_fills_mask(self):
        spec = NoiseSpec(1.0, 1.0, make_startbit_mask(FLOAT32, 9))
        f = sample_fliptensors(100, spec, stream(0))
        assert np.all(f.f1 == 0x007FFFFF) and np.all(f.f2 == 0x007FFFFF)

    def test_half_probability_rate(self):
        n_words = 312_500  # 1e7 maskable bits
        f = sample_fliptensors(n_words, NoiseSpec(0.5, 0.0, make_startbit_mask(FLOAT32, 0)), stream(3))
        n = n_words * 32
        frac = popcount(f.f1) / n
        assert abs(frac - 0.5) <= 3 * np.sqrt(0.25 / n)

    @pytest.mark.parametrize("p", [1e-6, 1e-3, bitnoise.SPARSE_BELOW * 0.99, bitnoise.SPARSE_BELOW, 0.3, 0.9])
    @pytest.mark.parametrize("dtype", [FLOAT16, FLOAT32, FLOAT64, INT8], ids=str)
    def test_rate_and_mask_both_paths(self, p, dtype):
        mask = make_startbit_mask(dtype, 2)
        n = max(20_000, int(4e6 / mask.noisy_bits * min(1.0, 1e-2 / p)))
        w = bernoulli_words(n, p, mask.word, dtype.word_dtype, stream(5, dtype.bit_width))
        assert not np.any(w & ~np.asarray(mask.word, dtype=dtype.word_dtype))
        bits = n * mask.noisy_bits
        if p * bits < 20:
            return
        frac = popcount(w) / bits
        assert abs(frac - p) <= 4 * np.sqrt(p * (1 - p) / bits)

    @pytest.mark.parametrize("p", [1e-3, 0.25])
    def test_lanes_are_unbiased(self, p):
        # every bit position carries the same rate (guards against lane-dependent thresholding)
        n = 400_000
        w = bernoulli_words(n, p, 0xFFFFFFFF, np.uint32, stream(9))
        counts = np.array([np.count_nonzero(w & np.uint32(1 << b)) for b in range(32)])
        assert np.all(np.abs(counts / n - p) <= 4.5 * np.sqrt(p * (1 - p) / n))

    @pytest.mark.parametrize("p", [1e-30, 4e-51, 5e-324])
    def test_vanishing_probability_terminates(self, p):
        assert not bernoulli_words(10**6, p, 0xFFFFFFFF, np.uint32, stream(0)).any()

    def test_deterministic(self):
        spec = NoiseSpec.symmetric(0.01, FLOAT32, seed=4)
        a = sample_fliptensors(5000, spec, stream(4, 1, 2))
        b = sample_fliptensors(5000, spec, stream(4, 1, 2))
        c = sample_fliptensors(5000, spec, stream(4, 1, 3))
        assert np.array_equal(a.f1, b.f1) and np.array_equal(a.f2, b.f2)
        assert not np.array_equal(a.f1, c.f1)


class TestInject:
    def test_zero_probability_identity(self):
        x = Tensor.from_values(np.random.default_rng(0).normal(size=1000), FLOAT32)
        y = inject(x, NoiseSpec(0.0, 0.0, make_startbit_mask(FLOAT32, 0)), stream(0))
        assert np.array_equal(bit_view(y), bit_view(x))

    @pytest.mark.parametrize("p", [1e-3, 0.5, 1.0])
    def test_empty_mask_identity(self, p):
        x = Tensor.from_values(np.random.default_rng(0).normal(size=1000), FLOAT32)
        y = inject(x, NoiseSpec(p, p, make_startbit_mask(FLOAT32, 32)), stream(0))
        assert np.array_equal(bit_view(y), bit_view(x))

    def test_hamming_distance_binomial(self):
        n, p = 1_000_000, 1e-2
        x = Tensor.from_values(np.random.default_rng(1).normal(size=n), FLOAT32)
        y = inject(x, NoiseSpec.symmetric(p, FLOAT32), stream(2))
        flips = popcount(bit_view(x) ^ bit_view(y))
        bits = 32 * n
        assert abs(flips - p * bits) <= 3 * np.sqrt(bits * p * (1 - p))

    @pytest.mark.parametrize("fill", [0x00000000, 0xFFFFFFFF])
    def test_flip_rate_independent_of_data(self, fill):
        n, p = 200_000, 0.05
        x = from_bits(np.full(n, fill, np.uint32), FLOAT32)
        y = inject(x, NoiseSpec.symmetric(p, FLOAT32), stream(6))
        bits = 32 * n
        assert abs(popcount(bit_view(x) ^ bit_view(y)) / bits - p) <= 3 * np.sqrt(p * (1 - p) / bits)

    def test_dtype_mismatch(self):
        with pytest.raises(TypeError):
            inject(Tensor.from_values([1.0], FLOAT16), NoiseSpec.symmetric(0.1, FLOAT32), stream(0))

    def test_deterministic(self):
        x = Tensor.from_values(np.random.default_rng(3).normal(size=4096), BFLOAT16)
        spec = NoiseSpec.symmetric(0.02, BFLOAT16, seed=8)
        a = inject(x, spec, stream(8, 0, 3, 1))
        b = inject(x, spec, stream(8, 0, 3, 1))
        assert np.array_equal(bit_view(a), bit_view(b))


@settings(max_examples=60, deadline=None)
@given(
    dtype=st.sampled_from(FLOAT_TYPES),
    start=st.integers(0, 64),
    p=st.sampled_from([1e-4, 0.01, 0.2, 0.5, 1.0]),
    seed=st.integers(0, 2**32),
)
def test_bits_above_start_bit_are_conserved(dtype, start, p, seed):
    start = min(start, dtype.bit_width)
    rng = np.random.default_rng(seed)
    words = rng.integers(0, 2**63, size=2000, dtype=np.uint64).astype(dtype.word_dtype)
    x = from_bits(words, dtype)
    y = inject(x, NoiseSpec.symmetric(p, dtype, start), stream(seed))
    protected = ~np.asarray(make_startbit_mask(dtype, start).word, dtype=dtype.word_dtype)
    assert np.array_equal(bit_view(y) & protected, words & protected)


def test_sparse_threshold_is_a_probability():
    assert 0 < bitnoise.SPARSE_BELOW < 1
