import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from feelsim.compression import (
    CompressionSpec,
    SparseUpdate,
    compress_round,
    decode_payload,
    dequantize,
    encode_payload,
    error_update,
    global_mask,
    local_mask,
    position_bits,
    quantize,
)
from feelsim.core import MaskVector, RngStream


def sparse(values, positions=None, d=None):
    values = np.asarray(values, dtype=float)
    positions = list(range(values.size)) if positions is None else positions
    return SparseUpdate(MaskVector(positions, d or max(positions, default=-1) + 1), values)


class TestSpec:
    def test_gamma(self):
        spec = CompressionSpec(200, 50, 16, 1000)
        assert spec.gamma == pytest.approx((1 - 50 / 2 ** 30) * 250 / 1000, rel=1e-15)

    def test_precondition(self):
        with pytest.raises(ValueError, match="2\\^\\(2q-2\\)"):
            CompressionSpec(0, 16, 3, 100)
        CompressionSpec(0, 15, 3, 100)

    def test_too_many_positions(self):
        with pytest.raises(ValueError):
            CompressionSpec(8, 3, 16, 10)

    def test_payload_bits(self):
        assert CompressionSpec(2, 3, 16, 1000).local_payload_bits == (10 + 16) * 3
        assert position_bits(1024) == 10
        assert position_bits(1025) == 11
        assert position_bits(1) == 0


class TestMasks:
    spec4 = CompressionSpec(2, 1, 16, 4)

    def test_global_mask(self):
        assert global_mask([9, 0, -8, 1], self.spec4).positions.tolist() == [0, 2]

    def test_global_mask_zero_vector_pads(self):
        assert global_mask(np.zeros(4), self.spec4).positions.tolist() == [0, 1]

    def test_global_mask_shared(self):
        g = np.random.default_rng(1).standard_normal(4)
        assert global_mask(g.copy(), self.spec4) == global_mask(g.copy(), self.spec4)

    def test_local_mask(self):
        m_g = MaskVector([0, 2], 4)
        assert local_mask([9, 4, -8, 1], m_g, self.spec4).positions.tolist() == [1]

    def test_local_mask_padding(self):
        spec = CompressionSpec(1, 2, 16, 4)
        assert local_mask(np.zeros(4), MaskVector([0], 4), spec).positions.tolist() == [1, 2]

    @given(st.integers(2, 40).flatmap(lambda d: st.tuples(
        st.just(d), st.integers(0, d), st.integers(0, 2 ** 31 - 1))))
    def test_disjoint(self, args):
        d, Kg, seed = args
        Kl = (d - Kg) // 2
        if Kg + Kl == 0:
            return
        spec = CompressionSpec(Kg, Kl, 8, d)
        gen = np.random.default_rng(seed)
        x, prev = gen.standard_normal(d), gen.standard_normal(d)
        m_g = global_mask(prev, spec)
        m_l = local_mask(x, m_g, spec)
        assert m_l.count == Kl
        assert not set(m_g.positions.tolist()) & set(m_l.positions.tolist())


class TestQuantizer:
    def test_all_zero(self):
        qu = quantize(sparse([0.0, 0.0]), 4, np.random.default_rng(0))
        assert qu.scale == 0.0
        assert qu.levels.tolist() == [0, 0]
        np.testing.assert_array_equal(dequantize(qu).values, [0.0, 0.0])

    def test_exact_level(self):
        qu = quantize(sparse([4.0]), 2, np.random.default_rng(0))
        assert qu.scale == 4.0 and qu.levels.tolist() == [2]
        assert dequantize(qu).values.tolist() == [4.0]

    def test_exact_levels_round_trip(self):
        v = np.array([1.0, -1.0, 1.0, -1.0])  # norm 2, so every entry sits on level s/2
        qu = quantize(sparse(v), 5, np.random.default_rng(2))
        assert qu.mask == sparse(v).mask
        assert np.array_equal(dequantize(qu).values, v)

    def test_levels_within_range(self):
        gen = np.random.default_rng(3)
        for q in (2, 3, 8):
            qu = quantize(sparse(gen.standard_normal(50)), q, gen)
            assert qu.levels.min() >= 0 and qu.levels.max() <= 2 ** (q - 1)

    def test_unbiased_monte_carlo(self):
        v = np.array([1.0, 0.3, -0.7])
        u = sparse(v)
        gen = np.random.default_rng(12345)
        draws = np.array([dequantize(quantize(u, 3, gen)).values for _ in range(100_000)])
        se = draws.std(axis=0, ddof=1) / math.sqrt(len(draws))
        assert np.all(np.abs(draws.mean(axis=0) - v) <= 3 * se)

    @pytest.mark.parametrize("q,K", [(2, 3), (3, 10), (4, 40)])
    def test_variance_bound(self, q, K):
        gen = np.random.default_rng(q * 100 + K)
        v = gen.standard_normal(K)
        u = sparse(v)
        s = 2 ** (q - 1)
        err = np.array([np.sum((dequantize(quantize(u, q, gen)).values - v) ** 2) for _ in range(20_000)])
        se = err.std(ddof=1) / math.sqrt(err.size)
        assert err.mean() <= min(K / s ** 2, math.sqrt(K) / s) * np.dot(v, v) + 3 * se

    def test_stream_determinism(self):
        u = sparse(np.random.default_rng(0).standard_normal(30))
        a = quantize(u, 4, RngStream(5, ("quant", 1, 2)))
        b = quantize(u, 4, RngStream(5, ("quant", 1, 2)))
        assert np.array_equal(a.levels, b.levels)


class TestCompressRound:
    def test_worked_example(self):
        spec = CompressionSpec(2, 1, 16, 4)
        gp, lp = compress_round([9, 4, -8, 1], [9, 0, -8, 1], spec, np.random.default_rng(0))
        assert gp.mask.positions.tolist() == [0, 2]
        assert gp.values.tolist() == [9.0, -8.0]
        assert lp.mask.positions.tolist() == [1]
        assert dequantize(lp).values[0] == pytest.approx(4.0)

    def test_full_global_is_identity(self):
        x = np.random.default_rng(4).standard_normal(12)
        gp, lp = compress_round(x, np.zeros(12), CompressionSpec(12, 0, 16, 12), np.random.default_rng(0))
        assert np.array_equal(gp.densify(), x)
        assert lp.mask.count == 0

    def test_global_part_not_quantized(self):
        gen = np.random.default_rng(5)
        x = gen.standard_normal(30)
        gp, _ = compress_round(x, gen.standard_normal(30), CompressionSpec(10, 5, 3, 30), gen)
        assert np.array_equal(gp.values, x[gp.mask.positions])

    def test_residual_below_bound_small_q(self):
        # q = 3 makes the quantization term visible: gamma = (1 - 5/16) * 15/50
        spec = CompressionSpec(10, 5, 3, 50)
        gen = np.random.default_rng(6)
        ratios = []
        for _ in range(10_000):
            x = gen.standard_normal(50)
            gp, lp = compress_round(x, x, spec, gen)
            r = x - gp.densify() - lp.densify()
            ratios.append(r @ r / (x @ x))
        ratios = np.array(ratios)
        assert ratios.mean() <= 1 - spec.gamma + 3 * ratios.std(ddof=1) / 100


class TestErrorUpdate:
    def test_lossless_split_gives_zero_error(self):
        x = np.random.default_rng(7).standard_normal(16)
        spec = CompressionSpec(10, 6, 52, 16)
        gp, lp = compress_round(x, x, spec, np.random.default_rng(0))
        np.testing.assert_allclose(error_update(x, gp, lp, True), 0.0, atol=1e-14)

    def test_unscheduled_keeps_previous(self):
        prev = np.array([0.5, -1.0, 2.0])
        out = error_update(np.ones(3), None, None, False, prev)
        assert np.array_equal(out, prev)

    def test_positionwise(self):
        gen = np.random.default_rng(8)
        x = gen.standard_normal(40)
        spec = CompressionSpec(8, 6, 3, 40)
        gp, lp = compress_round(x, gen.standard_normal(40), spec, gen)
        e = error_update(x, gp, lp, True)
        deq = dequantize(lp)
        assert np.all(e[gp.mask.positions] == 0.0)
        np.testing.assert_array_equal(e[lp.mask.positions], x[lp.mask.positions] - deq.values)
        rest = np.setdiff1d(np.arange(40), np.concatenate([gp.mask.positions, lp.mask.positions]))
        np.testing.assert_array_equal(e[rest], x[rest])


class TestPayload:
    @pytest.mark.parametrize("d,K,q", [(1000, 50, 16), (1002, 50, 16), (1024, 7, 3), (5, 2, 2), (2, 1, 4)])
    def test_size_and_round_trip(self, d, K, q):
        gen = np.random.default_rng(d + K + q)
        pos = np.sort(gen.choice(d, K, replace=False))
        v = gen.standard_normal(K)
        if q == 2:
            v = np.abs(v)  # q = 2 cannot carry two top-level entries of opposite sign
        qu = quantize(SparseUpdate(MaskVector(pos, d), v), q, gen)
        data, nbits, scale = encode_payload(qu)
        assert nbits == (position_bits(d) + q) * K
        assert len(data) == math.ceil(nbits / 8)
        back = decode_payload(data, nbits, scale, K, d, q)
        assert back.mask == qu.mask
        assert np.array_equal(dequantize(back).values, dequantize(qu).values)

    @pytest.mark.parametrize("sign", [1.0, -1.0])
    def test_top_level_entry(self, sign):
        qu = quantize(sparse([sign * 3.0, 0.0, 0.0], [1, 4, 6], 8), 4, np.random.default_rng(0))
        assert qu.levels[0] == 8
        data, nbits, scale = encode_payload(qu)
        assert nbits == (3 + 4) * 3
        back = decode_payload(data, nbits, scale, 3, 8, 4)
        np.testing.assert_array_equal(dequantize(back).values, [sign * 3.0, 0.0, 0.0])

    def test_empty(self):
        qu = quantize(sparse([], [], 10), 16, np.random.default_rng(0))
        data, nbits, _ = encode_payload(qu)
        assert nbits == 0 and data == b""
