"""Symmetric scale-only integer quantization with per-vector scale factors.

Three scale layouts share one blocked representation ``(groups, vectors, V)``:

* single-level: a real scale ``s`` per vector;
* two-level: an unsigned ``M``-bit integer ``s_q`` per vector times a real
  coarse scale ``gamma`` per group (output channel for weights, whole tensor
  for activations);
* coarse: per-layer or per-channel scaling expressed as ``s_q = 1`` with
  ``gamma`` carrying the scale, so the integer datapath handles it unchanged.

Scales are computed in float64; reconstructed tensors are float32.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .calibration import (
    AlphaSet,
    CalibMethod,
    Granularity,
    Max,
    PerChannel,
    PerLayer,
    PerVector,
    calibrate,
)
from .tensor import Tensor, VectorLayout, as_tensor

HALF_AWAY = "half_away"
HALF_EVEN = "half_even"

ELEMENT_BITS = (3, 4, 6, 8)
SCALE_BITS = (3, 4, 6, 8, 10)
VECTOR_SIZES = (1, 2, 4, 8, 16, 32, 64)


class ScaleMode(enum.Enum):
    SINGLE_LEVEL = "single"
    TWO_LEVEL = "two_level"
    COARSE = "coarse"


def code_max(bits: int, signed: bool = True, full_range: bool = False) -> int:
    """Largest integer code. Unsigned codes stop at 2**(N-1)-1 unless ``full_range``."""
    if bits < 2:
        raise ValueError(f"need at least 2 bits, got {bits}")
    if not signed and full_range:
        return 2**bits - 1
    return 2 ** (bits - 1) - 1


def code_min(bits: int, signed: bool = True) -> int:
    # -2**(N-1) is never produced
    return -(2 ** (bits - 1) - 1) if signed else 0


def round_half_away(x):
    mag = np.abs(x)
    fl = np.floor(mag)
    return np.copysign(fl + (mag - fl >= 0.5), x)


def round_int(x, rounding: str = HALF_AWAY):
    if rounding == HALF_AWAY:
        return round_half_away(x)
    if rounding == HALF_EVEN:
        return np.rint(x)
    raise ValueError(f"unknown rounding rule {rounding!r}")


def compute_scale(alpha: float, bits: int, signed: bool = True,
                  full_range: bool = False) -> float:
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    if alpha == 0:
        return 0.0
    return alpha / code_max(bits, signed, full_range)


def quantize_value(x: float, s: float, bits: int, signed: bool = True,
                   rounding: str = HALF_AWAY, full_range: bool = False) -> int:
    if not s > 0:
        raise ValueError(f"scale must be positive, got {s}")
    q = float(round_int(np.float64(x) / s, rounding))
    return int(min(max(q, code_min(bits, signed)), code_max(bits, signed, full_range)))


def quantize_array(x, s, bits: int, signed: bool = True,
                   rounding: str = HALF_AWAY, full_range: bool = False) -> np.ndarray:
    """Element-wise clip(round(x/s)); lanes with ``s == 0`` map to code 0."""
    x = np.asarray(x, dtype=np.float64)
    s = np.broadcast_to(np.asarray(s, dtype=np.float64), x.shape)
    safe = np.where(s > 0, s, 1.0)
    q = round_int(x / safe, rounding)
    q = np.clip(q, code_min(bits, signed), code_max(bits, signed, full_range))
    return np.where(s > 0, q, 0).astype(np.int64)


def dequantize(x_q, s):
    return np.asarray(x_q, dtype=np.float64) * s if np.ndim(x_q) else float(x_q) * s


# -- containers -------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ScaleSet:
    mode: ScaleMode
    per_vector_fp: Optional[np.ndarray] = None   # s(k,i)
    per_vector_int: Optional[np.ndarray] = None  # s_q(k,i)
    coarse_fp: Optional[np.ndarray] = None       # gamma(k)

    def effective(self) -> np.ndarray:
        """Real per-vector scale actually applied, shape (groups, vectors)."""
        if self.mode is ScaleMode.SINGLE_LEVEL:
            return self.per_vector_fp
        return self.per_vector_int * self.coarse_fp[:, None]


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    int_data: np.ndarray         # (groups, vectors, V) integer codes, pads are 0
    scales: ScaleSet
    shape: tuple[int, ...]
    v: int
    bits: int
    signed: bool = True
    scale_bits: Optional[int] = None   # M for two-level, None otherwise
    per_channel: bool = True
    full_range: bool = False

    @property
    def layout(self) -> VectorLayout:
        return VectorLayout(self.shape, self.v, self.per_channel)

    @property
    def mode(self) -> ScaleMode:
        return self.scales.mode

    @property
    def pad_count(self) -> int:
        return self.layout.pad_count

    def codes(self) -> np.ndarray:
        """Integer codes in the original tensor shape."""
        return self.layout.from_blocks(self.int_data)


def dequantized_blocks(qt: QuantizedTensor) -> np.ndarray:
    sc = qt.scales
    if sc.mode is ScaleMode.SINGLE_LEVEL:
        return qt.int_data * sc.per_vector_fp[..., None]
    # (x_q * s_q) is an exact integer product; gamma is applied once
    return (qt.int_data * sc.per_vector_int[..., None]) * sc.coarse_fp[:, None, None]


def dequantized_values(qt: QuantizedTensor) -> np.ndarray:
    """Simulated-quantized values in float64, original shape, pads dropped."""
    return qt.layout.from_blocks(dequantized_blocks(qt))


def reconstruct(qt: QuantizedTensor) -> Tensor:
    return Tensor(qt.shape, dequantized_values(qt).astype(np.float32))


# -- quantizers -------------------------------------------------------------


def _vector_alphas(arr: np.ndarray, v: int, alphas: AlphaSet | None) -> np.ndarray:
    if alphas is None:
        return calibrate(arr, PerVector(v), Max()).alphas
    if not isinstance(alphas.granularity, PerVector) or alphas.granularity.v != v:
        raise ValueError(
            f"alphas are {alphas.granularity}, quantizer needs PerVector({v})"
        )
    if tuple(alphas.shape) != arr.shape:
        raise ValueError(f"alphas calibrated for {alphas.shape}, tensor is {arr.shape}")
    return np.asarray(alphas.alphas, dtype=np.float64)


def quantize_per_vector_single(
    t, bits: int, v: int, alphas: AlphaSet | None = None, *,
    signed: bool = True, rounding: str = HALF_AWAY, full_range: bool = False,
) -> QuantizedTensor:
    """One real scale per V-element vector; Max calibration when ``alphas`` is None."""
    arr = np.asarray(as_tensor(t).data, dtype=np.float64)
    layout = VectorLayout(arr.shape, v)
    blocks = layout.to_blocks(arr)
    s = _vector_alphas(arr, v, alphas) / code_max(bits, signed, full_range)
    x_q = quantize_array(blocks, s[..., None], bits, signed, rounding, full_range)
    return QuantizedTensor(
        x_q, ScaleSet(ScaleMode.SINGLE_LEVEL, per_vector_fp=s), arr.shape, v, bits,
        signed, None, layout.per_channel, full_range,
    )


def split_scales(s: np.ndarray, scale_bits: int, rounding: str = HALF_AWAY):
    """Factor per-vector scales ``s`` (groups, vectors) into ``s_q * gamma``."""
    top = 2**scale_bits - 1
    s_max = s.max(axis=1)
    gamma = s_max / top
    safe = np.where(gamma > 0, gamma, 1.0)
    s_q = np.clip(round_int(s / safe[:, None], rounding), 0, top)
    s_q = np.where(gamma[:, None] > 0, s_q, 0).astype(np.int64)
    return s_q, gamma


def quantize_two_level(
    t, bits: int, scale_bits: int, v: int, alphas: AlphaSet | None = None, *,
    coarse: Granularity = PerChannel(), signed: bool = True,
    rounding: str = HALF_AWAY, full_range: bool = False,
) -> QuantizedTensor:
    """Integer per-vector scales under a real per-channel (or per-layer) scale.

    Element codes are those of single-level quantization; only the scale is
    re-quantized. A vector whose ``s_q`` rounds to 0 reconstructs to zeros and
    its codes are cleared, so quantizing the reconstruction gives the same codes.
    """
    if scale_bits < 1:
        raise ValueError(f"scale bits must be >= 1, got {scale_bits}")
    if isinstance(coarse, PerVector):
        raise ValueError("coarse scale granularity must be per-layer or per-channel")
    single = quantize_per_vector_single(
        t, bits, v, alphas, signed=signed, rounding=rounding, full_range=full_range
    )
    s = single.scales.per_vector_fp
    per_channel = isinstance(coarse, PerChannel) and single.layout.has_coarse_axis
    if not per_channel:
        s = s.reshape(1, -1)
    s_q, gamma = split_scales(s, scale_bits, rounding)
    layout = VectorLayout(single.shape, v, per_channel)
    x_q = single.int_data.reshape(layout.blocks_shape)
    x_q = np.where(s_q[..., None] > 0, x_q, 0)
    return QuantizedTensor(
        x_q,
        ScaleSet(ScaleMode.TWO_LEVEL, per_vector_fp=s, per_vector_int=s_q, coarse_fp=gamma),
        single.shape, v, bits, signed, scale_bits, per_channel, full_range,
    )


def quantize_coarse(
    t, bits: int, v: int, granularity: Granularity = PerChannel(),
    alphas: AlphaSet | None = None, *, signed: bool = True,
    rounding: str = HALF_AWAY, full_range: bool = False,
) -> QuantizedTensor:
    """Per-layer or per-channel quantization in blocked form (``s_q == 1``)."""
    arr = np.asarray(as_tensor(t).data, dtype=np.float64)
    if isinstance(granularity, PerVector):
        raise ValueError("use quantize_per_vector_single/two_level for per-vector scales")
    per_channel = isinstance(granularity, PerChannel)
    if per_channel and arr.ndim not in (2, 4):
        raise ValueError("per-channel scaling needs a weight tensor")
    if alphas is None:
        alphas = calibrate(arr, granularity, Max())
    elif type(alphas.granularity) is not type(granularity):
        raise ValueError(f"alphas are {alphas.granularity}, expected {granularity}")
    layout = VectorLayout(arr.shape, v, per_channel)
    gamma = np.asarray(alphas.alphas, dtype=np.float64).reshape(-1) / code_max(
        bits, signed, full_range
    )
    blocks = layout.to_blocks(arr)
    x_q = quantize_array(blocks, gamma[:, None, None], bits, signed, rounding, full_range)
    s_q = np.ones(blocks.shape[:2], dtype=np.int64)
    return QuantizedTensor(
        x_q, ScaleSet(ScaleMode.COARSE, per_vector_int=s_q, coarse_fp=gamma),
        arr.shape, v, bits, signed, None, per_channel, full_range,
    )


# -- configuration ----------------------------------------------------------


def _is_pow2(v: int) -> bool:
    return v >= 1 and v & (v - 1) == 0


@dataclass(frozen=True)
class QuantConfig:
    """Bitwidths and scaling choices for one layer's weights and activations.

    ``m_w``/``m_a`` set to None with per-vector granularity means single-level
    (real) per-vector scales.
    """

    n_w: int = 4
    n_a: int = 4
    m_w: Optional[int] = 4
    m_a: Optional[int] = 4
    v: int = 16
    granularity_w: Granularity = field(default_factory=lambda: PerVector(16))
    granularity_a: Granularity = field(default_factory=lambda: PerVector(16))
    signed_w: bool = True
    signed_a: bool = True
    rounding: str = HALF_AWAY
    calib_w: CalibMethod = Max()
    calib_a: CalibMethod = Max()
    unsigned_full_range: bool = False
    zero_point: int = 0
    strict: bool = True

    def __post_init__(self) -> None:
        if self.zero_point != 0:
            raise ValueError("only symmetric (zero_point = 0) quantization is supported")
        if self.rounding not in (HALF_AWAY, HALF_EVEN):
            raise ValueError(f"unknown rounding rule {self.rounding!r}")
        if not _is_pow2(self.v) or self.v > 64:
            raise ValueError(f"vector size must be a power of two in [1, 64], got {self.v}")
        for g in (self.granularity_w, self.granularity_a):
            if isinstance(g, PerVector) and g.v != self.v:
                raise ValueError(f"granularity {g} disagrees with V={self.v}")
        if isinstance(self.granularity_a, PerChannel):
            raise ValueError("activation coarse scale is per-layer only")
        if not self.strict:
            return
        for n in (self.n_w, self.n_a):
            if n not in ELEMENT_BITS:
                raise ValueError(f"element bitwidth {n} not in {ELEMENT_BITS}")
        for m in (self.m_w, self.m_a):
            if m is not None and m not in SCALE_BITS:
                raise ValueError(f"scale bitwidth {m} not in {SCALE_BITS}")

    @classmethod
    def from_shorthand(cls, text: str, v: int = 16, **kw) -> "QuantConfig":
        """Parse ``W/A/ws/as``; ``-`` is coarse-only, ``fp`` a real per-vector scale."""
        parts = text.strip().split("/")
        if len(parts) != 4:
            raise ValueError(f"expected W/A/ws/as, got {text!r}")
        n_w, n_a = int(parts[0]), int(parts[1])

        def scale(tok: str, coarse: Granularity):
            tok = tok.strip().lower()
            if tok == "-":
                return None, coarse
            if tok in ("fp", "fp32"):
                return None, PerVector(v)
            return int(tok), PerVector(v)

        m_w, g_w = scale(parts[2], PerChannel())
        m_a, g_a = scale(parts[3], PerLayer())
        return cls(n_w=n_w, n_a=n_a, m_w=m_w, m_a=m_a, v=v,
                   granularity_w=g_w, granularity_a=g_a, **kw)

    def shorthand(self) -> str:
        def tok(g, m):
            if not isinstance(g, PerVector):
                return "-"
            return "fp" if m is None else str(m)
        return f"{self.n_w}/{self.n_a}/{tok(self.granularity_w, self.m_w)}/" \
               f"{tok(self.granularity_a, self.m_a)}"

    def with_vector_size(self, v: int) -> "QuantConfig":
        gw = PerVector(v) if isinstance(self.granularity_w, PerVector) else self.granularity_w
        ga = PerVector(v) if isinstance(self.granularity_a, PerVector) else self.granularity_a
        return replace(self, v=v, granularity_w=gw, granularity_a=ga)

    def effective_scale_bits(self, operand: str) -> Optional[int]:
        """M as the datapath sees it: 0 for coarse, None for real per-vector scales."""
        g, m = (self.granularity_w, self.m_w) if operand == "w" else (self.granularity_a, self.m_a)
        if not isinstance(g, PerVector):
            return 0
        return m


def quantize(t, cfg: QuantConfig, operand: str = "w",
             alphas: AlphaSet | None = None) -> QuantizedTensor:
    """Quantize ``t`` as the weight (``"w"``) or activation (``"a"``) operand of ``cfg``."""
    if operand == "w":
        bits, m, g, signed, method = cfg.n_w, cfg.m_w, cfg.granularity_w, cfg.signed_w, cfg.calib_w
    elif operand == "a":
        bits, m, g, signed, method = cfg.n_a, cfg.m_a, cfg.granularity_a, cfg.signed_a, cfg.calib_a
    else:
        raise ValueError(f"operand must be 'w' or 'a', got {operand!r}")
    t = as_tensor(t)
    if alphas is None and not isinstance(method, Max):
        alphas = calibrate(t, g, method, bits)
    kw = dict(signed=signed, rounding=cfg.rounding, full_range=cfg.unsigned_full_range)
    if not isinstance(g, PerVector):
        return quantize_coarse(t, bits, cfg.v, g, alphas, **kw)
    if m is None:
        return quantize_per_vector_single(t, bits, cfg.v, alphas, **kw)
    coarse = PerChannel() if operand == "w" else PerLayer()
    return quantize_two_level(t, bits, m, cfg.v, alphas, coarse=coarse, **kw)


# -- VSQ1 serialization -----------------------------------------------------

VSQ_MAGIC = b"VSQ1"


def encode_quantized(qt: QuantizedTensor) -> bytes:
    """Header line ``VSQ1 <json-length>``, JSON header, then payload.

    Payload: int8 codes in blocked order, then per-vector scales: ``s_q`` as
    uint8 (uint16 when M > 8) for two-level/coarse, float32 ``s`` for
    single-level. Real scales are exported at float32.
    """
    sc = qt.scales
    gamma = None
    if sc.coarse_fp is not None:
        gamma = [float(np.float32(g)) for g in sc.coarse_fp]
    wide = qt.scale_bits is not None and qt.scale_bits > 8
    header = {
        "shape": list(qt.shape),
        "blocks": list(qt.int_data.shape),
        "V": qt.v,
        "N": qt.bits,
        "M": qt.scale_bits,
        "signed": qt.signed,
        "full_range": qt.full_range,
        "per_channel": qt.per_channel,
        "mode": sc.mode.value,
        "gamma": gamma,
        "scale_dtype": "f32" if sc.mode is ScaleMode.SINGLE_LEVEL else ("u16" if wide else "u8"),
    }
    head = json.dumps(header, separators=(",", ":")).encode("ascii")
    if qt.bits > 8:
        raise ValueError("VSQ1 stores one byte per element; N must be <= 8")
    body = [qt.int_data.astype("<i1").tobytes()]
    if sc.mode is ScaleMode.SINGLE_LEVEL:
        body.append(sc.per_vector_fp.astype("<f4").tobytes())
    else:
        body.append(sc.per_vector_int.astype("<u2" if wide else "<u1").tobytes())
    return VSQ_MAGIC + b" " + str(len(head)).encode() + b"\n" + head + b"".join(body)


def decode_quantized(raw: bytes) -> QuantizedTensor:
    nl = raw.find(b"\n")
    first = raw[:nl].split()
    if nl < 0 or len(first) != 2 or first[0] != VSQ_MAGIC:
        raise ValueError("not a VSQ1 file")
    hlen = int(first[1])
    header = json.loads(raw[nl + 1 : nl + 1 + hlen])
    body = raw[nl + 1 + hlen :]
    blocks = tuple(header["blocks"])
    n = math.prod(blocks)
    codes = np.frombuffer(body[:n], dtype="<i1").astype(np.int64).reshape(blocks)
    rest = body[n:]
    mode = ScaleMode(header["mode"])
    nvec = blocks[0] * blocks[1]
    if mode is ScaleMode.SINGLE_LEVEL:
        s = np.frombuffer(rest, dtype="<f4", count=nvec).astype(np.float64)
        scales = ScaleSet(mode, per_vector_fp=s.reshape(blocks[:2]))
    else:
        dt = "<u2" if header["scale_dtype"] == "u16" else "<u1"
        s_q = np.frombuffer(rest, dtype=dt, count=nvec).astype(np.int64)
        gamma = np.asarray(header["gamma"], dtype=np.float64)
        scales = ScaleSet(mode, per_vector_int=s_q.reshape(blocks[:2]), coarse_fp=gamma)
    return QuantizedTensor(
        codes, scales, tuple(header["shape"]), header["V"], header["N"],
        header["signed"], header["M"], header["per_channel"], header["full_range"],
    )


def save_quantized(qt: QuantizedTensor, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_quantized(qt))


def load_quantized(path) -> QuantizedTensor:
    with open(path, "rb") as fh:
        return decode_quantized(fh.read())


def error_bound_blocks(qt: QuantizedTensor) -> np.ndarray:
    """Per-lane bound on |x - reconstruction| for unclipped (Max) calibration.

    Single-level and coarse: half a step. Two-level adds the scale
    re-quantization error ``|x_q| * |s - s_q*gamma|``; a vector collapsed to
    ``s_q == 0`` is off by at most its clipping threshold ``code_max * s``.
    """
    sc = qt.scales
    if sc.mode is ScaleMode.SINGLE_LEVEL:
        half = 0.5 * sc.per_vector_fp[..., None]
        return np.broadcast_to(half, qt.int_data.shape).copy()
    if sc.mode is ScaleMode.COARSE:
        half = 0.5 * sc.coarse_fp[:, None, None]
        return np.broadcast_to(half, qt.int_data.shape).copy()
    s = sc.per_vector_fp
    drift = np.abs(s - sc.effective())
    bound = 0.5 * s[..., None] + np.abs(qt.int_data) * drift[..., None]
    top = code_max(qt.bits, qt.signed, qt.full_range) * s
    collapsed = (sc.per_vector_int == 0)[..., None]
    return np.where(collapsed, np.broadcast_to(top[..., None], bound.shape), bound)


def error_bound_values(qt: QuantizedTensor) -> np.ndarray:
    """:func:`error_bound_blocks` in the original tensor shape."""
    return qt.layout.from_blocks(error_bound_blocks(qt))
