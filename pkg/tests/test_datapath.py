import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import width_violations
from vsquant.datapath import (
    Collector,
    DatapathConfig,
    ExponentMismatchError,
    OperandRangeError,
    PartialSum,
    WidthOverflowError,
    accumulate,
    accumulate_batch,
    fits_signed,
    ppu_finalize,
    ppu_requantize,
    round_scale_product,
    vector_mac,
    vector_mac_batch,
    worst_case,
)
from vsquant.quant import ScaleMode, dequantized_values


def test_vector_mac_example():
    cfg = DatapathConfig(v=4)
    ps = vector_mac([1, -2, 3, 0], [2, 0, 1, 5], 3, 2, cfg)
    assert ps == PartialSum(30, 0)


def test_vector_mac_zero_activations():
    cfg = DatapathConfig(v=4)
    assert vector_mac([7, -7, 7, -7], [0, 0, 0, 0], 15, 15, cfg).value == 0


def test_worst_case_fits_declared_width():
    cfg = DatapathConfig(n_w=4, n_a=4, m_w=4, m_a=4, v=16)
    ps = vector_mac([7] * 16, [7] * 16, 15, 15, cfg)
    assert ps.value == 16 * 49 * 225 == 176400
    assert cfg.partial_sum_width == 20
    assert fits_signed(ps.value, 20)
    assert (1 << 19) - 1 == 524287
    assert worst_case(cfg)["partial_sum"] == 176400


@pytest.mark.parametrize("p,b,full,expected", [
    (44, 8, 8, (44, 0)),
    (44, 4, 8, (3, 4)),
    (0, 4, 8, (0, 4)),
    (40, 4, 8, (3, 4)),   # 2.5 ties away from zero
    (255, 4, 8, (16, 4)),  # carry kept
])
def test_round_scale_product(p, b, full, expected):
    assert round_scale_product(p, b, full) == expected


def test_round_scale_product_rejects_wide_b():
    with pytest.raises(ValueError):
        round_scale_product(1, 9, 8)


def test_accumulate_example():
    cfg = DatapathConfig()
    col = Collector.for_config(cfg)
    assert col.value == 0
    for v in (30, -12, 5):
        col = accumulate(col, PartialSum(v))
    assert col.value == 23 and col.count == 3
    assert accumulate_batch([30, -12, 5], cfg) == 23


def test_accumulate_exponent_mismatch():
    col = accumulate(Collector.for_config(DatapathConfig()), PartialSum(1, 2))
    with pytest.raises(ExponentMismatchError):
        accumulate(col, PartialSum(1, 0))


def test_accumulate_stress_at_guard_limit():
    cfg = DatapathConfig(n_w=4, n_a=4, m_w=4, m_a=4, v=16, accum_guard_bits=12)
    extreme = worst_case(cfg)["partial_sum"]
    parts = np.full(cfg.max_accumulations, extreme, dtype=np.int64)
    total = accumulate_batch(parts, cfg)
    assert total == extreme * 4096 and fits_signed(int(total), cfg.collector_width)
    assert accumulate_batch(-parts, cfg) == -total
    with pytest.raises(OperandRangeError):
        accumulate_batch(np.ones(cfg.max_accumulations + 1, dtype=np.int64), cfg)


def test_collector_overflow_detected():
    cfg = DatapathConfig(v=4, accum_guard_bits=1)
    big = (1 << (cfg.partial_sum_width - 1)) - 1
    col = accumulate(Collector(cfg.partial_sum_width, big), PartialSum(0))
    with pytest.raises(WidthOverflowError):
        accumulate(col, PartialSum(big))


def test_ppu_finalize_example():
    gamma_w = (4 / 7) / 15
    y = ppu_finalize(23, gamma_w, 0.5)
    assert y == pytest.approx(0.438095, abs=5e-7)
    assert y == 23 * gamma_w * 0.5


def test_ppu_finalize_bias_relu():
    assert ppu_finalize(0, 0.1, 0.2, bias=0.75) == 0.75
    assert ppu_finalize(0, 0.1, 0.2) == 0.0
    assert ppu_finalize(-10, 0.5, 0.5, relu=True) == 0.0
    assert ppu_finalize(3, 1.0, 1.0, exponent_comp=4) == 48.0
    np.testing.assert_array_equal(ppu_finalize(np.array([-4, 4]), 0.5, 1.0, relu=True), [0.0, 2.0])


def test_ppu_requantize_example():
    qt = ppu_requantize(np.array([0.0, 3.5, -7.0, 1.75]), 4, None, 4, ScaleMode.SINGLE_LEVEL)
    assert qt.scales.per_vector_fp[0, 0] == 1.0
    assert qt.codes().tolist() == [0, 4, -7, 2]


def test_ppu_requantize_zero_vector():
    qt = ppu_requantize(np.zeros(4), 4, 4, 4)
    assert qt.codes().tolist() == [0, 0, 0, 0]
    assert dequantized_values(qt).tolist() == [0.0] * 4


@pytest.mark.parametrize("mode", list(ScaleMode))
def test_ppu_requantize_fixed_point(mode):
    y = np.random.default_rng(0).normal(size=(32, 3, 3)).astype(np.float32)
    once = ppu_requantize(y, 4, 4, 16, mode)
    again = ppu_requantize(dequantized_values(once).astype(np.float32), 4, 4, 16, mode)
    np.testing.assert_array_equal(again.int_data, once.int_data)


def test_operand_range_checked():
    cfg = DatapathConfig(v=4)
    with pytest.raises(OperandRangeError):
        vector_mac([-8, 0, 0, 0], [0, 0, 0, 0], 1, 1, cfg)
    with pytest.raises(OperandRangeError):
        vector_mac([0, 0, 0, 0], [0, 0, 0, 0], 16, 1, cfg)
    with pytest.raises(OperandRangeError):
        vector_mac([0, 0, 0], [0, 0, 0], 1, 1, cfg)


@pytest.mark.parametrize("n", [3, 4])
@pytest.mark.parametrize("m", [0, 1, 2, 3, 4])
def test_width_soundness_exhaustive(n, m):
    cfg = DatapathConfig(n_w=n, n_a=n, m_w=m, m_a=m, v=4)
    assert width_violations(cfg)[0] == 0


def test_width_soundness_with_rounding():
    for b in range(1, 9):
        assert width_violations(DatapathConfig(n_w=4, n_a=4, m_w=4, m_a=4, v=4, scale_product_bits=b))[0] == 0


@pytest.mark.parametrize("v", [16, 64])
@pytest.mark.parametrize("n,m", [(3, 3), (4, 4), (6, 6), (8, 8), (8, 10)])
def test_width_soundness_analytic(v, n, m):
    cfg = DatapathConfig(n_w=n, n_a=n, m_w=m, m_a=m, v=v)
    wc = worst_case(cfg)
    assert fits_signed(wc["product"], cfg.product_width)
    assert fits_signed(-wc["product"], cfg.product_width)
    assert fits_signed(wc["dot"], cfg.dot_width)
    assert fits_signed(wc["partial_sum"], cfg.partial_sum_width)
    assert fits_signed(wc["collector"], cfg.collector_width)
    top = cfg.w_range[1]
    ps = vector_mac([top] * v, [-top] * v, 2**m - 1, 2**m - 1, cfg)
    assert ps.value == -wc["partial_sum"]


def test_width_is_tight_for_dot():
    # the excluded code -2**(N-1) leaves one spare bit; two fewer would overflow
    cfg = DatapathConfig(v=16)
    assert not fits_signed(worst_case(cfg)["dot"], cfg.dot_width - 2)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 2, 4, 8, 16]), st.integers(1, 6), st.integers(1, 6))
def test_scalar_and_batch_agree(seed, v, m_w, m_a):
    cfg = DatapathConfig(n_w=4, n_a=4, m_w=m_w, m_a=m_a, v=v, scale_product_bits=max(1, m_w + m_a - 3))
    rng = np.random.default_rng(seed)
    w = rng.integers(-7, 8, size=(5, v))
    a = rng.integers(-7, 8, size=(5, v))
    sw = rng.integers(0, 2**m_w, size=5)
    sa = rng.integers(0, 2**m_a, size=5)
    out, shift = vector_mac_batch(w, a, sw, sa, cfg)
    for j in range(5):
        ps = vector_mac(w[j].tolist(), a[j].tolist(), int(sw[j]), int(sa[j]), cfg)
        assert ps.value == out[j] and ps.exponent_comp == shift


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(-176400, 176400), min_size=1, max_size=200), st.randoms())
def test_accumulation_order_invariant(parts, rnd):
    cfg = DatapathConfig()
    shuffled = list(parts)
    rnd.shuffle(shuffled)
    col = Collector.for_config(cfg)
    for p in shuffled:
        col = accumulate(col, PartialSum(p))
    assert col.value == accumulate_batch(parts, cfg) == sum(parts)


def test_full_b_rounding_is_identity():
    rng = np.random.default_rng(3)
    full = DatapathConfig(m_w=6, m_a=6, v=8)
    explicit = DatapathConfig(m_w=6, m_a=6, v=8, scale_product_bits=12)
    w = rng.integers(-7, 8, size=(100, 8))
    a = rng.integers(-7, 8, size=(100, 8))
    sw = rng.integers(0, 64, size=100)
    sa = rng.integers(0, 64, size=100)
    np.testing.assert_array_equal(vector_mac_batch(w, a, sw, sa, full)[0],
                                  vector_mac_batch(w, a, sw, sa, explicit)[0])


def test_rounded_product_close_to_full():
    full = 63 * 63
    for b in range(1, 13):
        value, comp = round_scale_product(full, b, 12)
        assert abs(value * 2**comp - full) <= 2 ** comp / 2


def test_config_widths_and_json():
    cfg = DatapathConfig.from_json('{"W":4,"A":4,"ws":4,"as":4,"scale_product_bits":6}')
    assert (cfg.product_width, cfg.dot_width, cfg.partial_sum_width, cfg.collector_width) == (8, 12, 18, 30)
    assert cfg.shift == 2
    back = DatapathConfig.from_json(cfg.to_json())
    assert back == cfg
    coarse = DatapathConfig.from_json({"W": 8, "A": 8, "ws": "-", "as": "-"})
    assert coarse.m_w == 0 and coarse.b == 0
    assert json.loads(coarse.to_json())["ws"] == "-"
    with pytest.raises(ValueError):
        DatapathConfig.from_json('{"W":4,"A":4,"bogus":1}')
    with pytest.raises(ValueError):
        DatapathConfig(m_w=4, m_a=4, scale_product_bits=9)
    with pytest.raises(ValueError):
        DatapathConfig(v=12)
