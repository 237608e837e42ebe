"""Closed-form storage and datapath-width costs of per-vector scaling."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Optional

from .datapath import DatapathConfig


def memory_overhead(n: int, m: int, v: int) -> Fraction:
    """Extra storage of one M-bit scale per V N-bit elements: M/(V*N)."""
    if n <= 0 or v <= 0 or m < 0:
        raise ValueError("bitwidths and vector size must be positive")
    return Fraction(m, v * n)


def effective_bitwidth(n: int, m: int, v: int) -> Fraction:
    """Bits per element including the amortised per-vector scale: N + M/V."""
    if n <= 0 or v <= 0 or m < 0:
        raise ValueError("bitwidths and vector size must be positive")
    return n + Fraction(m, v)


@dataclass(frozen=True)
class CostReport:
    memory_overhead_fraction: float      # averaged over weights and activations
    effective_bitwidth: float            # averaged over weights and activations
    dot_width_bits: int
    partial_sum_width_bits: int
    collector_width_bits: int
    extra_multiply_dims: Optional[tuple[int, int]]
    weight_overhead: float
    weight_effective_bits: float
    activation_overhead: float
    activation_effective_bits: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def to_row(self) -> dict:
        d = asdict(self)
        dims = d.pop("extra_multiply_dims")
        d["extra_multiply"] = "-" if dims is None else f"{dims[0]}x{dims[1]}"
        return d


COST_COLUMNS = ("memory_overhead_fraction", "effective_bitwidth", "dot_width_bits",
                "partial_sum_width_bits", "collector_width_bits", "extra_multiply",
                "weight_overhead", "weight_effective_bits", "activation_overhead",
                "activation_effective_bits")


def datapath_widths(cfg: DatapathConfig) -> dict:
    """Wire widths from the closed forms: dot = N_w+N_a+log2 V, partial = dot + B."""
    if cfg.v & (cfg.v - 1):
        raise ValueError("vector size must be a power of two")
    dot = cfg.n_w + cfg.n_a + int(math.log2(cfg.v))
    b = cfg.m_w + cfg.m_a if cfg.scale_product_bits is None else cfg.scale_product_bits
    return {
        "dot_width_bits": dot,
        "partial_sum_width_bits": dot + b,
        "collector_width_bits": dot + b + cfg.accum_guard_bits,
        "extra_multiply_dims": (dot, b) if b > 0 else None,
    }


def cost_report(cfg: DatapathConfig) -> CostReport:
    w_ov = memory_overhead(cfg.n_w, cfg.m_w, cfg.v)
    a_ov = memory_overhead(cfg.n_a, cfg.m_a, cfg.v)
    w_eff = effective_bitwidth(cfg.n_w, cfg.m_w, cfg.v)
    a_eff = effective_bitwidth(cfg.n_a, cfg.m_a, cfg.v)
    return CostReport(
        memory_overhead_fraction=float((w_ov + a_ov) / 2),
        effective_bitwidth=float((w_eff + a_eff) / 2),
        weight_overhead=float(w_ov),
        weight_effective_bits=float(w_eff),
        activation_overhead=float(a_ov),
        activation_effective_bits=float(a_eff),
        **datapath_widths(cfg),
    )
