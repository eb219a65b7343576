from __future__ import annotations

from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fastbfp import numerics
from fastbfp.errors import NonFiniteInput
from fastbfp.numerics import (
    NEAREST,
    TRUNCATE,
    ZERO_EXPONENT,
    BfpGroup,
    BfpTensor,
    RoundingMode,
    bfp_round_trip,
    decompose_fp,
    dequantize_group,
    exponent_spread_histogram,
    histogram_csv,
    make_rng,
    quantize_group,
    quantize_tensor,
)
from oracles import exact, group_value, quantize_oracle

finite32 = st.floats(
    min_value=-(2.0**100), max_value=2.0**100, allow_nan=False, allow_infinity=False, width=32
)
groups = st.lists(finite32, min_size=1, max_size=32)


class TestDecompose:
    def test_one_and_a_half(self):
        s = decompose_fp(1.5)
        assert (s.sign, s.exponent, s.mantissa_frac) == (1, 0, 1.5)

    def test_negative_power_of_two(self):
        s = decompose_fp(-8.0)
        assert (s.sign, s.exponent, s.mantissa_frac) == (-1, 3, 1.0)

    def test_zero_is_canonical(self):
        s = decompose_fp(0.0)
        assert (s.sign, s.exponent, s.mantissa_frac) == (1, ZERO_EXPONENT, 0.0)
        assert s.is_zero

    def test_subnormal_flushes(self):
        assert decompose_fp(1e-45).is_zero

    @pytest.mark.parametrize("bad", [float("nan"), float("inf"), -float("inf")])
    def test_non_finite_rejected(self, bad):
        with pytest.raises(NonFiniteInput):
            decompose_fp(bad)

    @given(finite32.filter(lambda v: v == 0 or abs(v) >= 2**-126))
    def test_lossless(self, v):
        assert float(decompose_fp(v)) == float(np.float32(v))


class TestQuantizeGroup:
    def test_no_alignment(self):
        grp = quantize_group([1.5, 1.5], 2, TRUNCATE)
        assert grp.shared_exponent == 0
        assert grp.mantissas == (0b11, 0b11)
        assert dequantize_group(grp) == [1.5, 1.5]

    def test_small_value_shifted_out(self):
        grp = quantize_group([8.0, 1.0], 2, TRUNCATE)
        assert grp.shared_exponent == 3
        assert grp.mantissas == (0b10, 0b00)
        assert dequantize_group(grp) == [8.0, 0.0]

    def test_all_zero(self):
        grp = quantize_group([0.0, -0.0, 0.0], 4)
        assert grp.shared_exponent == ZERO_EXPONENT
        assert grp.is_zero
        assert dequantize_group(grp) == [0.0, 0.0, 0.0]

    def test_short_input_is_padded(self):
        grp = quantize_group([1.0, 2.0], 4, g=16)
        assert grp.g == 16
        assert grp.mantissas[2:] == (0,) * 14

    def test_too_many_values(self):
        with pytest.raises(ValueError):
            quantize_group([1.0] * 17, 4, g=16)

    def test_non_finite(self):
        with pytest.raises(NonFiniteInput):
            quantize_group([1.0, float("nan")], 4)

    def test_stochastic_needs_no_explicit_rng_for_determinism(self):
        a = quantize_group([0.3, 1.0], 2, RoundingMode.stochastic(), rng=5)
        b = quantize_group([0.3, 1.0], 2, RoundingMode.stochastic(), rng=5)
        assert a == b

    def test_dequantize_by_hand(self):
        assert dequantize_group(BfpGroup(3, 2, (1,), (0b10,))) == [8.0]

    def test_nearest_carry_saturates(self):
        # 1.96875 rounds up past 0b11 at m=2 and is held at the largest mantissa
        grp = quantize_group([1.96875], 2, NEAREST)
        assert grp.mantissas == (0b11,)

    @settings(max_examples=300)
    @given(groups, st.sampled_from([1, 2, 3, 4, 8]), st.sampled_from(["truncate", "nearest"]))
    def test_matches_rational_oracle(self, values, m, mode):
        grp = quantize_group(values, m, RoundingMode.parse(mode))
        shared, signs, mags = quantize_oracle(values, m, mode)
        assert list(grp.mantissas) == mags
        if shared is None:
            assert grp.shared_exponent == ZERO_EXPONENT
        else:
            assert grp.shared_exponent == shared
            got = [Fraction(v) for v in dequantize_group(grp)]
            assert got == group_value(shared, m, signs, mags)

    @given(groups)
    def test_truncation_idempotent(self, values):
        once = dequantize_group(quantize_group(values, 4, TRUNCATE))
        twice = dequantize_group(quantize_group(once, 4, TRUNCATE))
        assert once == twice

    @given(groups)
    def test_wider_truncation_never_worse(self, values):
        x = [exact(v) for v in values]
        q4 = [Fraction(v) for v in dequantize_group(quantize_group(values, 4, TRUNCATE))]
        q2 = [Fraction(v) for v in dequantize_group(quantize_group(values, 2, TRUNCATE))]
        assert all(abs(a - v) <= abs(b - v) for a, b, v in zip(q4, q2, x))

    @given(groups, st.sampled_from(["truncate", "nearest", "stochastic"]), st.integers(0, 2**32))
    def test_magnitudes_below_shared_bound(self, values, mode, seed):
        grp = quantize_group(values, 4, RoundingMode.parse(mode), rng=seed)
        if not grp.is_zero:
            bound = 2.0 ** (grp.shared_exponent + 1)
            assert all(abs(v) < bound for v in dequantize_group(grp))


class FixedNoise:
    """Stands in for the generator and returns one noise value everywhere."""

    def __init__(self, value: int) -> None:
        self.value = value

    def integers(self, low, high, size, dtype):
        return np.full(size, self.value, dtype=dtype)


class TestStochastic:
    def test_probability_split(self):
        # 1.0 anchors the exponent; 2/3 of the way between two m=4 grid points
        unit = 2.0**-3
        x = np.float32(unit * (5 + 2 / 3))
        vals = np.tile(np.array([1.0, x], dtype=np.float32), (100_000, 1))
        t = quantize_tensor(vals, 4, 2, RoundingMode.stochastic(24), make_rng(11), axis=1)
        up = t.mantissas[:, 0, 1] == 6
        assert set(np.unique(t.mantissas[:, 0, 1])) <= {5, 6}
        assert abs(up.mean() - 2 / 3) < 0.01

    def test_three_noise_bits_see_only_the_top_fraction_bits(self):
        unit = 2.0**-3
        x = np.float32(unit * (5 + 2 / 3))
        vals = np.tile(np.array([1.0, x], dtype=np.float32), (100_000, 1))
        t = quantize_tensor(vals, 4, 2, RoundingMode.stochastic(3), make_rng(12), axis=1)
        # floor(2/3 * 8) / 8 = 5/8
        assert abs((t.mantissas[:, 0, 1] == 6).mean() - 5 / 8) < 0.01

    def test_unbiased_on_noise_aligned_points(self):
        rng = np.random.default_rng(3)
        mode = RoundingMode.stochastic(3)
        trials = 20_000
        for _ in range(10):
            frac = rng.integers(0, 8) / 8
            x = np.float32(2.0**-3 * (int(rng.integers(1, 8)) + frac))
            vals = np.tile(np.array([1.0, x], dtype=np.float32), (trials, 1))
            got = bfp_round_trip(vals, 4, 2, mode, make_rng(int(rng.integers(1 << 30))), axis=1)[:, 1]
            se = got.astype(np.float64).std(ddof=1) / np.sqrt(trials)
            assert abs(got.mean() - float(x)) <= 3 * se + 1e-12

    def test_exact_expectation_over_all_noise_values(self, monkeypatch):
        # averaging over every noise draw gives the exact mean of the rounder
        monkeypatch.setattr(numerics, "make_rng", lambda noise: noise)
        for m in (2, 4):
            for code in range((1 << m) - 1):
                for frac in range(8):
                    x = 2.0 ** -(m - 1) * (code + frac / 8)
                    outs = [
                        bfp_round_trip(np.array([[1.0, x]]), m, 2, RoundingMode.stochastic(3), FixedNoise(v), axis=1)[0, 1]
                        for v in range(8)
                    ]
                    assert Fraction(sum(Fraction(float(o)) for o in outs), 8) == Fraction(x)

    def test_seeded_determinism(self):
        x = np.random.default_rng(0).standard_normal((8, 40)).astype(np.float32)
        a = quantize_tensor(x, 2, 16, RoundingMode.stochastic(), make_rng(9))
        b = quantize_tensor(x, 2, 16, RoundingMode.stochastic(), make_rng(9))
        assert a.same_as(b)


class TestQuantizeTensor:
    def test_constant_row_is_exact(self):
        x = np.full((1, 16), 0.75, dtype=np.float32)
        t = quantize_tensor(x, 4, 16)
        assert t.n_groups == 1
        assert np.array_equal(t.dequantize(), x)

    def test_padding(self):
        x = np.arange(1, 21, dtype=np.float32).reshape(1, 20)
        t = quantize_tensor(x, 4, 16)
        assert t.n_groups == 2
        assert t.group(1).mantissas[4:] == (0,) * 12
        assert t.dequantize().shape == (1, 20)

    def test_group_count_other_axis(self):
        x = np.ones((20, 3, 5), dtype=np.float32)
        t = quantize_tensor(x, 2, 16, axis=0)
        assert t.n_groups == 2 * 15
        assert t.dequantize().shape == x.shape

    def test_relative_error_bound(self):
        x = np.random.default_rng(1).standard_normal((4, 32)).astype(np.float32)
        t = quantize_tensor(x, 4, 16, TRUNCATE)
        err = np.abs(t.dequantize() - x).reshape(4, 2, 16)
        top = 2.0 ** t.shared_exponents.astype(np.float64)
        assert np.all(err <= top[..., None] * 2.0 ** -(4 - 1))

    def test_arrays_are_read_only(self):
        t = quantize_tensor(np.ones((2, 16), dtype=np.float32), 4)
        with pytest.raises(ValueError):
            t.mantissas[0, 0, 0] = 1

    @settings(max_examples=50)
    @given(
        st.integers(1, 5), st.integers(1, 40), st.sampled_from([2, 4]),
        st.sampled_from([4, 8, 16]), st.integers(0, 1), st.integers(0, 2**31),
    )
    def test_groups_match_scalar_quantizer(self, rows, cols, m, g, axis, seed):
        x = np.random.default_rng(seed).standard_normal((rows, cols)).astype(np.float32)
        t = quantize_tensor(x, m, g, NEAREST, axis=axis)
        lines = x if axis == 1 else x.T
        k = 0
        for line in lines:
            for start in range(0, len(line), g):
                assert t.group(k) == quantize_group(line[start:start + g], m, NEAREST, g=g)
                k += 1
        assert k == t.n_groups

    def test_from_groups_round_trip(self):
        x = np.random.default_rng(2).standard_normal((3, 20)).astype(np.float32)
        t = quantize_tensor(x, 4, 8, axis=1)
        back = BfpTensor.from_groups(list(t.groups()), t.shape, t.axis, t.e_bits)
        assert back.same_as(t)

    def test_non_finite(self):
        with pytest.raises(NonFiniteInput):
            quantize_tensor(np.array([[1.0, np.inf]], dtype=np.float32), 4)


class TestHistogram:
    def test_constant(self):
        h = exponent_spread_histogram(np.full((3, 16), 2.5), 16)
        assert h[0] == 48 and h.sum() == 48

    def test_two_values(self):
        h = exponent_spread_histogram(np.array([[8.0, 1.0]]), 2)
        assert h[0] == 1 and h[3] == 1 and h.sum() == 2

    def test_counts_sum_to_elements(self):
        x = np.random.default_rng(0).standard_normal((7, 21))
        assert exponent_spread_histogram(x, 16).sum() == x.size

    def test_larger_groups_shift_mass_right(self):
        for seed in range(3):
            x = np.random.default_rng(seed).standard_cauchy((64, 256))
            means = []
            for g in (4, 16, 64):
                h = exponent_spread_histogram(x, g)
                means.append((np.arange(len(h)) * h).sum() / h.sum())
            assert means[0] < means[1] < means[2]

    def test_csv(self):
        text = histogram_csv(exponent_spread_histogram(np.array([[8.0, 1.0]]), 2))
        lines = text.splitlines()
        assert lines[0] == "diff,count"
        assert lines[1] == "0,1" and lines[4] == "3,1"
        assert lines[-1].startswith(">=64,")
