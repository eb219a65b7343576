from __future__ import annotations

from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fastbfp.errors import GroupSizeMismatch, OddMantissaWidth
from fastbfp.fmac import (
    FpAccumulator,
    accumulate,
    bfp_dot,
    chunk,
    chunked_dot,
    dot_groups,
    fold_groups,
    group_pair_partials,
    pass_count,
    reconstruct,
    trace_csv,
)
from fastbfp.numerics import ZERO_EXPONENT, BfpGroup, quantize_group, quantize_tensor
from oracles import dot_oracle


def random_group(rng: np.random.Generator, m: int, g: int, zero_prob: float = 0.05) -> BfpGroup:
    if rng.random() < zero_prob:
        return BfpGroup(ZERO_EXPONENT, m, (1,) * g, (0,) * g)
    mags = rng.integers(0, 1 << m, size=g)
    mags[rng.integers(g)] |= 1 << (m - 1)
    signs = rng.choice([-1, 1], size=g)
    return BfpGroup(int(rng.integers(-20, 21)), m, tuple(int(s) for s in signs), tuple(int(v) for v in mags))


def oracle_of(x: BfpGroup, y: BfpGroup) -> Fraction:
    return dot_oracle(
        x.shared_exponent, x.m, x.signs, x.mantissas,
        y.shared_exponent, y.m, y.signs, y.mantissas,
    ) if not (x.is_zero or y.is_zero) else Fraction(0)


class TestPassCount:
    @pytest.mark.parametrize("mx,my,n", [(2, 2, 1), (4, 2, 2), (2, 4, 2), (4, 4, 4), (8, 4, 8)])
    def test_values(self, mx, my, n):
        assert pass_count(mx, my) == n

    @pytest.mark.parametrize("m", [0, 1, 3, 5, -2])
    def test_odd_rejected(self, m):
        with pytest.raises(OddMantissaWidth):
            pass_count(m, 2)


class TestChunking:
    def test_planes_high_order_first(self):
        grp = BfpGroup(5, 4, (1, -1), (0b1101, 0b0110))
        planes = chunk(grp)
        assert [p.chunks for p in planes] == [(0b11, 0b01), (0b01, 0b10)]
        assert [p.effective_exponent for p in planes] == [5, 3]

    @given(st.integers(0, 2**31), st.sampled_from([2, 4, 6, 8]), st.integers(1, 32))
    def test_reconstruct_inverts(self, seed, m, g):
        grp = random_group(np.random.default_rng(seed), m, g, 0.0)
        assert reconstruct(chunk(grp)) == grp.mantissas

    def test_odd_width_cannot_chunk(self):
        with pytest.raises(OddMantissaWidth):
            chunk(BfpGroup(0, 3, (1,), (5,)))


class TestDot:
    def test_hand_example(self):
        x = quantize_group([1.5, 1.0], 2)
        y = quantize_group([1.0, 1.5], 2)
        assert float(bfp_dot(x, y)) == 3.0
        assert chunked_dot(x, y) == bfp_dot(x, y)

    def test_zero_group(self):
        x = quantize_group([0.0] * 4, 4)
        y = quantize_group([1.0, 2.0, 3.0, 4.0], 4)
        assert chunked_dot(x, y).is_zero

    def test_group_size_mismatch(self):
        with pytest.raises(GroupSizeMismatch):
            bfp_dot(quantize_group([1.0], 2), quantize_group([1.0, 1.0], 2))

    def test_trace(self):
        trace = []
        x = quantize_group([1.5, 0.75, -1.0], 4)
        y = quantize_group([1.0, 1.0, 1.0], 2)
        chunked_dot(x, y, trace)
        assert len(trace) == pass_count(4, 2)
        assert [(r.chunk_x, r.chunk_y) for r in trace] == [(0, 0), (1, 0)]
        csv = trace_csv(trace)
        assert csv.splitlines()[0] == "pass,chunk_x,chunk_y,partial,partial_exponent,buffer"
        assert len(csv.splitlines()) == 3

    @settings(max_examples=400)
    @given(
        st.integers(0, 2**31),
        st.sampled_from([2, 4, 6, 8]),
        st.sampled_from([2, 4, 6, 8]),
        st.sampled_from([1, 3, 8, 16, 32]),
    )
    def test_chunked_equals_direct_equals_oracle(self, seed, mx, my, g):
        rng = np.random.default_rng(seed)
        x, y = random_group(rng, mx, g), random_group(rng, my, g)
        c, d = chunked_dot(x, y), bfp_dot(x, y)
        assert c == d
        assert Fraction(float(c)) == oracle_of(x, y)

    def test_tiny_results_flush_to_zero(self):
        x = BfpGroup(-100, 2, (1,), (2,))
        y = BfpGroup(-40, 2, (1,), (2,))
        assert chunked_dot(x, y).is_zero


class TestAccumulation:
    def test_fp32_fold(self):
        acc = FpAccumulator()
        for v in (1.0, 2.0**-30, -1.0):
            acc = accumulate(acc, v)
        # the small term is lost in FP32
        assert acc.value == np.float32(0.0)

    def test_dot_groups_order(self):
        rng = np.random.default_rng(0)
        xs = [random_group(rng, 4, 16) for _ in range(5)]
        ys = [random_group(rng, 2, 16) for _ in range(5)]
        want = np.float32(0)
        for x, y in zip(xs, ys):
            want = np.float32(want + np.float32(float(bfp_dot(x, y))))
        assert dot_groups(xs, ys) == want
        assert dot_groups(xs, ys, chunked=False) == want

    @settings(max_examples=40)
    @given(st.integers(0, 2**31), st.sampled_from([2, 4]), st.sampled_from([2, 4]))
    def test_vector_kernel_matches_scalar(self, seed, mx, my):
        rng = np.random.default_rng(seed)
        p, q, k = 3, 4, 40
        a = quantize_tensor(rng.standard_normal((p, k)).astype(np.float32), mx, 16)
        b = quantize_tensor(rng.standard_normal((q, k)).astype(np.float32), my, 16)
        partials, passes = group_pair_partials(
            a.signed_mantissas(), a.shared_exponents, mx, b.signed_mantissas(), b.shared_exponents, my
        )
        assert passes == pass_count(mx, my)
        out = fold_groups(partials)
        for i in range(p):
            for j in range(q):
                xs = [a.group(i * a.groups_per_row + n) for n in range(a.groups_per_row)]
                ys = [b.group(j * b.groups_per_row + n) for n in range(b.groups_per_row)]
                assert out[i, j] == dot_groups(xs, ys)
