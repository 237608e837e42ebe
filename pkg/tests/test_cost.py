from fractions import Fraction

import pytest

from vsquant.cost import cost_report, datapath_widths, effective_bitwidth, memory_overhead
from vsquant.datapath import DatapathConfig


def test_reference_point():
    assert memory_overhead(4, 4, 16) == Fraction(1, 16)
    assert float(memory_overhead(4, 4, 16)) == 0.0625
    assert effective_bitwidth(4, 4, 16) == Fraction(17, 4)
    assert float(effective_bitwidth(4, 4, 16)) == 4.25


def test_widths_example():
    w = datapath_widths(DatapathConfig(n_w=4, n_a=4, m_w=4, m_a=4, v=16))
    assert (w["dot_width_bits"], w["partial_sum_width_bits"]) == (12, 20)
    assert w["extra_multiply_dims"] == (12, 8)


def test_per_channel_baseline():
    w = datapath_widths(DatapathConfig(n_w=8, n_a=8, m_w=0, m_a=0, v=1))
    assert w["dot_width_bits"] == 16 and w["extra_multiply_dims"] is None


def test_rounding_shrinks_partial_sum():
    full = datapath_widths(DatapathConfig(v=16))
    rounded = datapath_widths(DatapathConfig(v=16, scale_product_bits=4))
    assert full["partial_sum_width_bits"] - rounded["partial_sum_width_bits"] == 4


@pytest.mark.parametrize("n", [3, 4, 6, 8])
@pytest.mark.parametrize("m", [0, 3, 4, 6, 8, 10])
@pytest.mark.parametrize("v", [1, 2, 4, 8, 16, 32, 64])
def test_overhead_identity(n, m, v):
    assert effective_bitwidth(n, m, v) == n * (1 + memory_overhead(n, m, v))


@pytest.mark.parametrize("v", [1, 4, 16, 64])
@pytest.mark.parametrize("b", [None, 3, 6])
def test_widths_match_datapath(v, b):
    cfg = DatapathConfig(n_w=4, n_a=6, m_w=4, m_a=3, v=v, scale_product_bits=b)
    w = datapath_widths(cfg)
    assert w["dot_width_bits"] == cfg.dot_width
    assert w["partial_sum_width_bits"] == cfg.partial_sum_width
    assert w["collector_width_bits"] == cfg.collector_width


def test_report_averages_operands():
    r = cost_report(DatapathConfig(n_w=4, n_a=8, m_w=4, m_a=0, v=16))
    assert r.weight_overhead == 0.0625 and r.activation_overhead == 0.0
    assert r.memory_overhead_fraction == 0.03125
    assert r.effective_bitwidth == (4.25 + 8) / 2
    assert r.to_row()["extra_multiply"] == "16x4"


def test_invalid_inputs():
    with pytest.raises(ValueError):
        memory_overhead(0, 4, 16)
    with pytest.raises(ValueError):
        effective_bitwidth(4, 4, 0)
