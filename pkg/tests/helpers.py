"""Shared test builders.

Dyadic tensors: Max-calibrated scales are exact powers of two times small
integers. Every vector holds a full-scale code in lane 0 and every coarse group holds
one vector with the largest scale code, so quantization recovers exactly the
codes, s_q and gamma used to build the tensor. All products and sums of such
values are exact in double precision.
"""
import itertools

import numpy as np

from vsquant.calibration import PerLayer
from vsquant.datapath import WidthOverflowError, vector_mac_batch, worst_case
from vsquant.nn import Mode, configure
from vsquant.quant import ELEMENT_BITS, SCALE_BITS, QuantConfig
from vsquant.tensor import VectorLayout

INTEGER_MODES = (Mode.PER_LAYER, Mode.PER_CHANNEL, Mode.PVAO, Mode.PVWO, Mode.PER_VECTOR_TWO_LEVEL)


def dyadic_tensor(rng, shape, n, m, v, per_channel, exponents=(-6, 3)):
    layout = VectorLayout(shape, v, per_channel)
    groups, nvec, _ = layout.blocks_shape
    qmax = 2 ** (n - 1) - 1
    codes = rng.integers(-qmax, qmax + 1, size=layout.blocks_shape)
    codes[:, :, 0] = qmax * rng.choice([-1, 1], size=(groups, nvec))
    codes = codes * layout.lane_mask()
    if m:
        s_q = rng.integers(1, 2**m, size=(groups, nvec))
        s_q[:, 0] = 2**m - 1
    else:
        s_q = np.ones((groups, nvec), dtype=np.int64)
    gamma = 2.0 ** rng.integers(*exponents, size=groups)
    blocks = codes * s_q[..., None] * gamma[:, None, None]
    return layout.from_blocks(blocks).astype(np.float32)


def random_case(rng):
    """A random integer-datapath layer: (cfg, x, w, stride, padding, bias, relu)."""
    mode = INTEGER_MODES[rng.integers(len(INTEGER_MODES))]
    v = int(2 ** rng.integers(0, 5))
    n_w, n_a = (int(rng.choice(ELEMENT_BITS)) for _ in range(2))
    m_w, m_a = (int(rng.choice(SCALE_BITS[:4])) for _ in range(2))
    base = QuantConfig(n_w=n_w, n_a=n_a, m_w=m_w, m_a=m_a, v=v,
                       granularity_w=PerLayer(), granularity_a=PerLayer())
    cfg = configure(mode, base)
    c, k = int(rng.integers(1, 24)), int(rng.integers(1, 6))
    r = s = int(rng.integers(1, 4))
    h, w = int(rng.integers(r, 7)), int(rng.integers(s, 7))
    stride, padding = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    x = dyadic_tensor(rng, (c, h, w), n_a, cfg.effective_scale_bits("a"), v, False)
    weights = dyadic_tensor(rng, (k, c, r, s), n_w, cfg.effective_scale_bits("w"), v,
                            not isinstance(cfg.granularity_w, PerLayer))
    bias = rng.integers(-8, 9, size=k) * 0.25 if rng.random() < 0.5 else None
    return cfg, x, weights, stride, padding, bias, bool(rng.random() < 0.5)


def extremes(lo, hi):
    return sorted({lo, lo + 1, 0, hi - 1, hi})


def width_violations(cfg):
    """Run every extreme-operand combination through the MAC.

    Returns ``(overflow count, largest |partial sum| seen)``.
    """
    w_vals = extremes(*cfg.w_range)
    a_vals = extremes(*cfg.a_range)
    sw = sorted({0, 1, 2**cfg.m_w - 1 if cfg.m_w else 1})
    sa = sorted({0, 1, 2**cfg.m_a - 1 if cfg.m_a else 1})
    w_lanes = np.array(list(itertools.product(w_vals, repeat=cfg.v)), dtype=np.int64)
    a_lanes = np.array(list(itertools.product(a_vals, repeat=cfg.v)), dtype=np.int64)
    bad, peak = 0, 0
    for s_w in sw:
        for s_a in sa:
            try:
                out, _ = vector_mac_batch(w_lanes[:, None, :], a_lanes[None, :, :], s_w, s_a, cfg)
            except WidthOverflowError:
                bad += 1
                continue
            peak = max(peak, int(np.abs(out).max()))
    assert peak <= worst_case(cfg)["partial_sum"]
    return bad, peak
