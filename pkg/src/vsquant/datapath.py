"""Bit-exact model of the per-vector-scaled processing element.

One vector MAC computes an exact V-wide integer dot product, multiplies it
by the (optionally rounded) product of the two integer per-vector scales and
hands a wide partial sum to the accumulation collector. The post-processing
unit (PPU) applies the real coarse scales, bias and ReLU, and re-quantizes
outputs for the next layer.

Every intermediate is checked against the width it would have in hardware.
The scalar functions use Python integers; the ``*_batch`` variants apply the
same arithmetic to int64 arrays.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .calibration import PerLayer
from .quant import (
    HALF_AWAY,
    QuantizedTensor,
    ScaleMode,
    code_max,
    code_min,
    quantize_coarse,
    quantize_per_vector_single,
    quantize_two_level,
)


class DatapathError(Exception):
    pass


class OperandRangeError(DatapathError, ValueError):
    """An input operand lies outside its declared integer range."""


class ExponentMismatchError(DatapathError, ValueError):
    pass


class WidthOverflowError(DatapathError, ArithmeticError):
    """An intermediate exceeded its declared width; indicates a modelling bug."""


def fits_signed(value: int, width: int) -> bool:
    return -(1 << (width - 1)) <= value <= (1 << (width - 1)) - 1


def _check_width(name: str, value, width: int) -> None:
    if np.ndim(value):
        if value.size == 0:
            return
        lo, hi = int(np.min(value)), int(np.max(value))
    else:
        lo = hi = int(value)
    if not (fits_signed(lo, width) and fits_signed(hi, width)):
        raise WidthOverflowError(f"{name} exceeds {width}-bit signed range: [{lo}, {hi}]")


def scale_code_max(m: int) -> int:
    """Largest per-vector scale code; an operand without per-vector scale uses 1."""
    return 2**m - 1 if m > 0 else 1


@dataclass(frozen=True)
class DatapathConfig:
    n_w: int = 4
    n_a: int = 4
    m_w: int = 4          # 0: no per-vector weight scale
    m_a: int = 4          # 0: no per-vector activation scale
    v: int = 16
    scale_product_bits: Optional[int] = None   # None: full M_w + M_a bits
    accum_guard_bits: int = 12
    signed_a: bool = True
    full_range_a: bool = False

    def __post_init__(self) -> None:
        if self.v < 1 or self.v & (self.v - 1):
            raise ValueError(f"vector size must be a power of two, got {self.v}")
        if self.m_w < 0 or self.m_a < 0:
            raise ValueError("scale bitwidths must be >= 0")
        b = self.b
        if not 0 <= b <= self.scale_product_full_bits:
            raise ValueError(
                f"scale product bits {b} outside [0, {self.scale_product_full_bits}]"
            )
        if b == 0 and self.shift > 0:
            raise ValueError("cannot round the scale product to zero bits")

    @property
    def scale_product_full_bits(self) -> int:
        return self.m_w + self.m_a

    @property
    def b(self) -> int:
        full = self.scale_product_full_bits
        return full if self.scale_product_bits is None else self.scale_product_bits

    @property
    def shift(self) -> int:
        return self.scale_product_full_bits - self.b

    @property
    def log2_v(self) -> int:
        return self.v.bit_length() - 1

    @property
    def product_width(self) -> int:
        return self.n_w + self.n_a

    @property
    def dot_width(self) -> int:
        return self.n_w + self.n_a + self.log2_v

    @property
    def partial_sum_width(self) -> int:
        return self.dot_width + self.b

    @property
    def collector_width(self) -> int:
        return self.partial_sum_width + self.accum_guard_bits

    @property
    def max_accumulations(self) -> int:
        return 1 << self.accum_guard_bits

    # operand ranges
    @property
    def w_range(self) -> tuple[int, int]:
        return code_min(self.n_w, True), code_max(self.n_w, True)

    @property
    def a_range(self) -> tuple[int, int]:
        return code_min(self.n_a, self.signed_a), code_max(
            self.n_a, self.signed_a, self.full_range_a
        )

    @classmethod
    def from_json(cls, text_or_doc) -> "DatapathConfig":
        """Accept the ``{"W":4,"A":4,"ws":4,"as":4}`` form; ``"-"`` means no per-vector scale."""
        doc = json.loads(text_or_doc) if isinstance(text_or_doc, str) else dict(text_or_doc)
        known = {"W", "A", "ws", "as", "V", "scale_product_bits", "accum_guard_bits",
                 "signed_a", "full_range_a"}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown datapath config keys: {sorted(unknown)}")

        def m(x) -> int:
            return 0 if x in ("-", None) else int(x)

        return cls(
            n_w=int(doc["W"]), n_a=int(doc["A"]), m_w=m(doc.get("ws")), m_a=m(doc.get("as")),
            v=int(doc.get("V", 16)), scale_product_bits=doc.get("scale_product_bits"),
            accum_guard_bits=int(doc.get("accum_guard_bits", 12)),
            signed_a=bool(doc.get("signed_a", True)),
            full_range_a=bool(doc.get("full_range_a", False)),
        )

    def to_json(self) -> str:
        return json.dumps({
            "W": self.n_w, "A": self.n_a,
            "ws": self.m_w if self.m_w else "-", "as": self.m_a if self.m_a else "-",
            "V": self.v, "scale_product_bits": self.scale_product_bits,
            "accum_guard_bits": self.accum_guard_bits,
        })


@dataclass(frozen=True)
class PartialSum:
    value: int
    exponent_comp: int = 0


def round_scale_product(p: int, b: int, full_bits: int) -> tuple[int, int]:
    """Round an unsigned ``full_bits``-wide scale product to ``b`` bits.

    Returns ``(value, exponent_comp)`` with ``p ~= value * 2**exponent_comp``.
    Ties round away from zero. A carry out of the top (value == 2**b) is
    kept; the partial-sum width still holds.
    """
    if not 0 <= b <= full_bits:
        raise ValueError(f"need 0 <= B <= {full_bits}, got {b}")
    shift = full_bits - b
    if shift == 0:
        return int(p), 0
    return (int(p) + (1 << (shift - 1))) >> shift, shift


def _check_operands(w_q, a_q, s_qw, s_qa, cfg: DatapathConfig) -> None:
    checks = (
        ("weight", w_q, cfg.w_range),
        ("activation", a_q, cfg.a_range),
        ("weight scale", s_qw, (0, scale_code_max(cfg.m_w))),
        ("activation scale", s_qa, (0, scale_code_max(cfg.m_a))),
    )
    for name, x, (lo, hi) in checks:
        arr = np.asarray(x)
        if arr.size and (arr.min() < lo or arr.max() > hi):
            raise OperandRangeError(f"{name} operand outside [{lo}, {hi}]")


def vector_mac(w_q: Sequence[int], a_q: Sequence[int], s_qw: int, s_qa: int,
               cfg: DatapathConfig) -> PartialSum:
    """One VS-Quant vector MAC on Python integers."""
    if len(w_q) != cfg.v or len(a_q) != cfg.v:
        raise OperandRangeError(f"vectors must have {cfg.v} lanes")
    _check_operands(w_q, a_q, s_qw, s_qa, cfg)
    dot = 0
    for w, a in zip(w_q, a_q):
        prod = int(w) * int(a)
        _check_width("product", prod, cfg.product_width)
        dot += prod
    _check_width("dot product", dot, cfg.dot_width)
    p, comp = round_scale_product(int(s_qw) * int(s_qa), cfg.b, cfg.scale_product_full_bits)
    out = dot * p
    _check_width("partial sum", out, cfg.partial_sum_width)
    return PartialSum(out, comp)


def vector_mac_batch(w_q: np.ndarray, a_q: np.ndarray, s_qw: np.ndarray,
                     s_qa: np.ndarray, cfg: DatapathConfig) -> tuple[np.ndarray, int]:
    """Array form of :func:`vector_mac` over the last (lane) axis; operands broadcast."""
    w_q = np.asarray(w_q, dtype=np.int64)
    a_q = np.asarray(a_q, dtype=np.int64)
    if w_q.shape[-1] != cfg.v or a_q.shape[-1] != cfg.v:
        raise OperandRangeError(f"vectors must have {cfg.v} lanes")
    _check_operands(w_q, a_q, s_qw, s_qa, cfg)
    prod = w_q * a_q
    _check_width("product", prod, cfg.product_width)
    dot = prod.sum(axis=-1)
    _check_width("dot product", dot, cfg.dot_width)
    p = np.asarray(s_qw, dtype=np.int64) * np.asarray(s_qa, dtype=np.int64)
    shift = cfg.shift
    if shift:
        p = (p + (1 << (shift - 1))) >> shift
    out = dot * p
    _check_width("partial sum", out, cfg.partial_sum_width)
    return out, shift


@dataclass(frozen=True)
class Collector:
    """Accumulation collector state: an exact wide integer."""

    width: int
    value: int = 0
    exponent_comp: Optional[int] = None
    count: int = 0

    @classmethod
    def for_config(cls, cfg: DatapathConfig) -> "Collector":
        return cls(cfg.collector_width)


def accumulate(collector: Collector, ps: PartialSum) -> Collector:
    if collector.exponent_comp is not None and ps.exponent_comp != collector.exponent_comp:
        raise ExponentMismatchError(
            f"partial sum exponent {ps.exponent_comp} != collector {collector.exponent_comp}"
        )
    value = collector.value + ps.value
    _check_width("collector", value, collector.width)
    return Collector(collector.width, value, ps.exponent_comp, collector.count + 1)


def accumulate_batch(partials: np.ndarray, cfg: DatapathConfig, axis=-1) -> np.ndarray:
    """Sum partial sums along ``axis`` exactly; every running prefix is width-checked."""
    partials = np.asarray(partials, dtype=np.int64)
    n = partials.shape[axis] if partials.ndim else 1
    if n > cfg.max_accumulations:
        raise OperandRangeError(
            f"{n} accumulations exceed the {cfg.max_accumulations} the guard bits cover"
        )
    prefix = np.cumsum(partials, axis=axis)
    _check_width("collector", prefix, cfg.collector_width)
    return prefix.take(-1, axis=axis) if partials.ndim else prefix


def ppu_finalize(acc, gamma_w, gamma_a, exponent_comp: int = 0, bias=None,
                 relu: bool = False):
    """``acc * 2**exponent_comp * gamma_w * gamma_a`` then bias and ReLU."""
    if np.ndim(acc) == 0:
        y = math.ldexp(float(int(acc)), int(exponent_comp)) * float(gamma_w) * float(gamma_a)
        if bias is not None:
            y += float(bias)
        return max(y, 0.0) if relu else y
    y = np.ldexp(np.asarray(acc, dtype=np.int64).astype(np.float64), int(exponent_comp))
    y = y * np.asarray(gamma_w, dtype=np.float64) * np.asarray(gamma_a, dtype=np.float64)
    if bias is not None:
        y = y + bias
    return np.maximum(y, 0.0) if relu else y


def ppu_requantize(outputs, n_a: int, m_a: Optional[int], v: int,
                   mode: ScaleMode = ScaleMode.TWO_LEVEL, *, signed: bool = True,
                   rounding: str = HALF_AWAY, full_range: bool = False) -> QuantizedTensor:
    """Dynamic Max calibration of a layer's outputs for the next layer.

    Vector max, scale ratio and integer conversion per vector; in two-level
    mode the scales are then split over one per-layer ``gamma``. The
    reciprocal is exact division.
    """
    kw = dict(signed=signed, rounding=rounding, full_range=full_range)
    if mode is ScaleMode.SINGLE_LEVEL:
        return quantize_per_vector_single(outputs, n_a, v, **kw)
    if mode is ScaleMode.TWO_LEVEL:
        if not m_a:
            raise ValueError("two-level requantization needs activation scale bits")
        return quantize_two_level(outputs, n_a, m_a, v, coarse=PerLayer(), **kw)
    return quantize_coarse(outputs, n_a, v, PerLayer(), **kw)


def worst_case(cfg: DatapathConfig) -> dict[str, int]:
    """Largest magnitudes each stage can reach over admissible operands."""
    w = max(abs(x) for x in cfg.w_range)
    a = max(abs(x) for x in cfg.a_range)
    p_full = scale_code_max(cfg.m_w) * scale_code_max(cfg.m_a)
    p, _ = round_scale_product(p_full, cfg.b, cfg.scale_product_full_bits)
    dot = cfg.v * w * a
    return {
        "product": w * a,
        "dot": dot,
        "scale_product": p,
        "partial_sum": dot * p,
        "collector": cfg.max_accumulations * dot * p,
    }
