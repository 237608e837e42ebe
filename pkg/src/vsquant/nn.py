"""Convolution and linear layers: float reference, integer datapath, and a
small sequential network runner that compares scaling granularities.

Activations are batch-1 ``(C, H, W)`` maps (or ``(C,)`` vectors for linear
layers); weights are ``(K, C, R, S)`` or ``(K, C)``.
"""
from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .calibration import AlphaSet, PerChannel, PerLayer, PerVector
from .datapath import (
    DatapathConfig,
    accumulate_batch,
    ppu_finalize,
    ppu_requantize,
    vector_mac_batch,
)
from .quant import (
    QuantConfig,
    QuantizedTensor,
    ScaleMode,
    dequantized_values,
    quantize,
)
from .report import ErrorReport, ErrorRow
from .tensor import Tensor, as_tensor, load_tensor, save_tensor


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str                      # "conv2d" | "linear"
    weights: np.ndarray
    bias: Optional[np.ndarray] = None
    stride: int = 1
    padding: int = 0
    relu: bool = False
    name: str = ""
    quant: Optional[QuantConfig] = None   # per-layer override

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float32)
        object.__setattr__(self, "weights", w)
        if self.kind == "conv2d":
            if w.ndim != 4:
                raise ShapeError(f"conv2d weights must be (K,C,R,S), got {w.shape}")
        elif self.kind == "linear":
            if w.ndim != 2:
                raise ShapeError(f"linear weights must be (out,in), got {w.shape}")
        else:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.stride < 1 or self.padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")
        if self.bias is not None:
            b = np.asarray(self.bias, dtype=np.float32).reshape(-1)
            if b.size != w.shape[0]:
                raise ShapeError(f"bias has {b.size} entries for {w.shape[0]} outputs")
            object.__setattr__(self, "bias", b)

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        if self.kind == "linear":
            n = int(np.prod(in_shape))
            if n != self.weights.shape[1]:
                raise ShapeError(f"linear layer expects {self.weights.shape[1]} inputs, got {n}")
            return (self.weights.shape[0],)
        if len(in_shape) != 3 or in_shape[0] != self.weights.shape[1]:
            raise ShapeError(f"conv2d expects ({self.weights.shape[1]},H,W), got {in_shape}")
        _, _, r, s = self.weights.shape
        ho = (in_shape[1] + 2 * self.padding - r) // self.stride + 1
        wo = (in_shape[2] + 2 * self.padding - s) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError("kernel larger than padded input")
        return (self.weights.shape[0], ho, wo)


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    config: QuantConfig = field(default_factory=QuantConfig)

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)

    @classmethod
    def load(cls, path: str | os.PathLike, config: QuantConfig | None = None) -> "NetworkSpec":
        """Read a JSON network description; weight/bias paths are relative to it."""
        base = os.path.dirname(os.path.abspath(path))
        with open(path) as fh:
            doc = json.load(fh)
        unknown = set(doc) - {"input_shape", "layers", "input"}
        if unknown:
            raise ValueError(f"unknown network keys: {sorted(unknown)}")
        layers = []
        for i, ld in enumerate(doc["layers"]):
            extra = set(ld) - {"kind", "weights", "bias", "stride", "padding", "activation", "name"}
            if extra:
                raise ValueError(f"unknown keys in layer {i}: {sorted(extra)}")
            w = load_tensor(os.path.join(base, ld["weights"])).numpy()
            b = load_tensor(os.path.join(base, ld["bias"])).numpy() if ld.get("bias") else None
            act = ld.get("activation")
            if act not in (None, "relu", "none"):
                raise ValueError(f"unsupported activation {act!r}")
            layers.append(LayerSpec(ld["kind"], w, b, int(ld.get("stride", 1)),
                                    int(ld.get("padding", 0)), act == "relu",
                                    ld.get("name", f"layer{i}")))
        return cls(tuple(layers), tuple(doc["input_shape"]), config or QuantConfig())

    def save(self, path: str | os.PathLike) -> None:
        base = os.path.dirname(os.path.abspath(path))
        stem = os.path.splitext(os.path.basename(path))[0]
        layers = []
        for i, layer in enumerate(self.layers):
            wname = f"{stem}_w{i}.vst"
            save_tensor(Tensor.from_array(layer.weights), os.path.join(base, wname))
            ld = {"kind": layer.kind, "weights": wname, "name": layer.name or f"layer{i}"}
            if layer.bias is not None:
                bname = f"{stem}_b{i}.vst"
                save_tensor(Tensor.from_array(layer.bias), os.path.join(base, bname))
                ld["bias"] = bname
            if layer.kind == "conv2d":
                ld["stride"], ld["padding"] = layer.stride, layer.padding
            ld["activation"] = "relu" if layer.relu else "none"
            layers.append(ld)
        with open(path, "w") as fh:
            json.dump({"input_shape": list(self.input_shape), "layers": layers}, fh, indent=2)


# -- reference --------------------------------------------------------------


def _pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)])


def conv2d_reference(x, w, stride: int = 1, padding: int = 0, bias=None,
                     relu: bool = False) -> np.ndarray:
    """Direct float64 convolution; accumulates kernel taps in (r, s) order."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if x.ndim != 3 or w.ndim != 4 or x.shape[0] != w.shape[1]:
        raise ShapeError(f"incompatible conv shapes: input {x.shape}, weights {w.shape}")
    k, c, r, s = w.shape
    xp = _pad_hw(x, padding)
    ho = (xp.shape[1] - r) // stride + 1
    wo = (xp.shape[2] - s) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("kernel larger than padded input")
    y = np.zeros((k, ho, wo), dtype=np.float64)
    for dr in range(r):
        for ds in range(s):
            win = xp[:, dr : dr + stride * (ho - 1) + 1 : stride,
                     ds : ds + stride * (wo - 1) + 1 : stride]
            y += np.einsum("kc,chw->khw", w[:, :, dr, ds], win)
    if bias is not None:
        y += np.asarray(bias, dtype=np.float64)[:, None, None]
    return np.maximum(y, 0.0) if relu else y


def linear_reference(x, w, bias=None, relu: bool = False) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[1] != x.size:
        raise ShapeError(f"incompatible linear shapes: input {x.size}, weights {w.shape}")
    y = conv2d_reference(x.reshape(-1, 1, 1), w[:, :, None, None], bias=bias, relu=relu)
    return y.reshape(-1)


# -- quantized --------------------------------------------------------------


def _check_pair(qa: QuantizedTensor, qw: QuantizedTensor, dcfg: DatapathConfig) -> None:
    if qa.v != qw.v or qa.v != dcfg.v:
        raise ValueError(f"vector size mismatch: input {qa.v}, weights {qw.v}, datapath {dcfg.v}")
    if qw.bits != dcfg.n_w or qa.bits != dcfg.n_a:
        raise ValueError(
            f"bitwidth mismatch: weights {qw.bits}/{dcfg.n_w}, activations {qa.bits}/{dcfg.n_a}"
        )
    for name, qt, m in (("weight", qw, dcfg.m_w), ("activation", qa, dcfg.m_a)):
        if qt.mode is ScaleMode.SINGLE_LEVEL:
            raise ValueError(f"{name} scales are real; the integer datapath needs s_q codes")
        expected = qt.scale_bits if qt.mode is ScaleMode.TWO_LEVEL else 0
        if expected != m:
            raise ValueError(f"{name} scale bits {expected} != datapath {m}")
    if qa.layout.has_coarse_axis:
        raise ValueError("activation tensor must be (C,H,W) or (C,)")
    if qa.signed != dcfg.signed_a:
        raise ValueError("activation signedness disagrees with datapath config")


def conv2d_quantized(qa: QuantizedTensor, qw: QuantizedTensor, dcfg: DatapathConfig,
                     stride: int = 1, padding: int = 0, bias=None,
                     relu: bool = False) -> np.ndarray:
    """Convolution evaluated on the integer datapath.

    Each output sums ``R*S*ceil(C/V)`` vector-MAC partial sums in the
    collector, then the PPU applies ``gamma_w[k] * gamma_a`` once. Spatial
    padding feeds zero lanes with a zero activation scale.
    """
    _check_pair(qa, qw, dcfg)
    if len(qa.shape) != 3 or len(qw.shape) != 4 or qa.shape[0] != qw.shape[1]:
        raise ShapeError(f"incompatible conv shapes: input {qa.shape}, weights {qw.shape}")
    c, h, wdt = qa.shape
    k, _, r, s = qw.shape
    v = dcfg.v
    nvc = qa.layout.vectors_per_position

    a_q = qa.int_data.reshape(h, wdt, nvc, v)
    s_qa = qa.scales.per_vector_int.reshape(h, wdt, nvc)
    gamma_a = float(qa.scales.coarse_fp[0])
    w_q = qw.int_data.reshape(k, r, s, nvc, v)
    s_qw = qw.scales.per_vector_int.reshape(k, r, s, nvc)
    gamma_w = qw.scales.coarse_fp
    if gamma_w.size != k:   # per-layer weight scale
        gamma_w = np.full(k, gamma_w[0])

    if padding:
        pad = ((padding, padding), (padding, padding), (0, 0))
        a_q = np.pad(a_q, pad + ((0, 0),))
        s_qa = np.pad(s_qa, pad)
    ho = (a_q.shape[0] - r) // stride + 1
    wo = (a_q.shape[1] - s) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("kernel larger than padded input")

    partials = []
    comp = 0
    for dr in range(r):
        for ds in range(s):
            rows = slice(dr, dr + stride * (ho - 1) + 1, stride)
            cols = slice(ds, ds + stride * (wo - 1) + 1, stride)
            out, comp = vector_mac_batch(
                w_q[:, None, None, dr, ds], a_q[None, rows, cols],
                s_qw[:, None, None, dr, ds], s_qa[None, rows, cols], dcfg,
            )
            partials.append(out)   # (K, Ho, Wo, nvc)
    acc = accumulate_batch(np.concatenate(partials, axis=-1), dcfg, axis=-1)
    b = None if bias is None else np.asarray(bias, dtype=np.float64)[:, None, None]
    return ppu_finalize(acc, gamma_w[:, None, None], gamma_a, comp, b, relu)


def _as_conv(qa: QuantizedTensor, qw: QuantizedTensor):
    if len(qw.shape) != 2:
        raise ShapeError(f"linear weights must be (out,in), got {qw.shape}")
    if len(qa.shape) != 1 or qa.shape[0] != qw.shape[1]:
        raise ShapeError(f"linear expects ({qw.shape[1]},) input, got {qa.shape}")
    return replace(qa, shape=(qa.shape[0], 1, 1)), replace(qw, shape=(*qw.shape, 1, 1))


def linear_quantized(qa: QuantizedTensor, qw: QuantizedTensor, dcfg: DatapathConfig,
                     bias=None, relu: bool = False) -> np.ndarray:
    qa3, qw4 = _as_conv(qa, qw)
    return conv2d_quantized(qa3, qw4, dcfg, bias=bias, relu=relu).reshape(-1)


def conv2d_simulated(qa: QuantizedTensor, qw: QuantizedTensor, stride: int = 1,
                     padding: int = 0, bias=None, relu: bool = False) -> np.ndarray:
    """Simulated quantization: the float reference on reconstructed operands."""
    return conv2d_reference(dequantized_values(qa), dequantized_values(qw),
                            stride, padding, bias, relu)


def linear_simulated(qa: QuantizedTensor, qw: QuantizedTensor, bias=None,
                     relu: bool = False) -> np.ndarray:
    return linear_reference(dequantized_values(qa), dequantized_values(qw), bias, relu)


def propagated_error_bound(a, w, err_a, err_w, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Worst-case |output error| from per-element operand error bounds.

    Per product ``|a|*err_w + |w|*err_a + err_a*err_w``, summed over the
    receptive field.
    """
    a, w = np.abs(np.asarray(a, dtype=np.float64)), np.abs(np.asarray(w, dtype=np.float64))
    ea, ew = np.asarray(err_a, dtype=np.float64), np.asarray(err_w, dtype=np.float64)
    if w.ndim == 2:
        a, ea = a.reshape(-1, 1, 1), ea.reshape(-1, 1, 1)
        w, ew = w[:, :, None, None], ew[:, :, None, None]
        return propagated_error_bound(a, w, ea, ew).reshape(-1)
    return (conv2d_reference(a, ew, stride, padding)
            + conv2d_reference(ea, w, stride, padding)
            + conv2d_reference(ea, ew, stride, padding))


# -- network runner ---------------------------------------------------------


class Mode(enum.Enum):
    REFERENCE = "reference"
    PER_LAYER = "per_layer"
    PER_CHANNEL = "poc"
    PVAO = "pvao"
    PVWO = "pvwo"
    PER_VECTOR_SINGLE = "per_vector_single"
    PER_VECTOR_TWO_LEVEL = "pvaw"

    @classmethod
    def parse(cls, text: str) -> "Mode":
        aliases = {"per_channel": cls.PER_CHANNEL, "per_vector_two_level": cls.PER_VECTOR_TWO_LEVEL,
                   "layer": cls.PER_LAYER, "channel": cls.PER_CHANNEL}
        key = text.lower().replace("-", "_")
        if key in aliases:
            return aliases[key]
        return cls(key)


def configure(mode: Mode, base: QuantConfig) -> QuantConfig:
    """Apply a granularity mode's scaling choices to ``base`` bitwidths."""
    pv = PerVector(base.v)
    m_w = base.m_w if base.m_w is not None else 4
    m_a = base.m_a if base.m_a is not None else 4
    table = {
        Mode.PER_LAYER: (PerLayer(), PerLayer(), None, None),
        Mode.PER_CHANNEL: (PerChannel(), PerLayer(), None, None),
        Mode.PVAO: (PerChannel(), pv, None, m_a),
        Mode.PVWO: (pv, PerLayer(), m_w, None),
        Mode.PER_VECTOR_SINGLE: (pv, pv, None, None),
        Mode.PER_VECTOR_TWO_LEVEL: (pv, pv, m_w, m_a),
    }
    if mode not in table:
        raise ValueError(f"mode {mode} has no quantization config")
    g_w, g_a, m_w, m_a = table[mode]
    return replace(base, granularity_w=g_w, granularity_a=g_a, m_w=m_w, m_a=m_a)


def mode_of(cfg: QuantConfig) -> str:
    """Report label for a config, e.g. ``pvaw`` or ``4/4/-/-``-style shorthand."""
    for mode in Mode:
        if mode is Mode.REFERENCE:
            continue
        if configure(mode, cfg) == cfg:
            return mode.value
    return cfg.shorthand()


def _scale_mode(cfg: QuantConfig, operand: str) -> ScaleMode:
    g, m = (cfg.granularity_w, cfg.m_w) if operand == "w" else (cfg.granularity_a, cfg.m_a)
    if not isinstance(g, PerVector):
        return ScaleMode.COARSE
    return ScaleMode.SINGLE_LEVEL if m is None else ScaleMode.TWO_LEVEL


def datapath_config_for(cfg: QuantConfig, scale_product_bits: int | None = None,
                        accum_guard_bits: int = 12) -> DatapathConfig:
    return DatapathConfig(
        n_w=cfg.n_w, n_a=cfg.n_a,
        m_w=cfg.effective_scale_bits("w") or 0, m_a=cfg.effective_scale_bits("a") or 0,
        v=cfg.v, scale_product_bits=scale_product_bits, accum_guard_bits=accum_guard_bits,
        signed_a=cfg.signed_a, full_range_a=cfg.unsigned_full_range,
    )


def quantize_activation(x, cfg: QuantConfig, alphas: AlphaSet | None = None) -> QuantizedTensor:
    """Static (given ``alphas``) or dynamic PPU calibration of a layer input."""
    if alphas is not None:
        return quantize(x, cfg, "a", alphas)
    return ppu_requantize(x, cfg.n_a, cfg.m_a, cfg.v, _scale_mode(cfg, "a"),
                          signed=cfg.signed_a, rounding=cfg.rounding,
                          full_range=cfg.unsigned_full_range)


def run_layer(layer: LayerSpec, x: np.ndarray, cfg: QuantConfig | None,
              scale_product_bits: int | None = None,
              act_alphas: AlphaSet | None = None) -> np.ndarray:
    """One layer in float (``cfg is None``) or quantized form."""
    if layer.kind == "linear":
        x = np.asarray(x).reshape(-1)
    if cfg is None:
        if layer.kind == "linear":
            return linear_reference(x, layer.weights, layer.bias, layer.relu)
        return conv2d_reference(x, layer.weights, layer.stride, layer.padding,
                                layer.bias, layer.relu)
    qa = quantize_activation(x.astype(np.float32), cfg, act_alphas)
    qw = quantize(layer.weights, cfg, "w")
    integer = ScaleMode.SINGLE_LEVEL not in (qa.mode, qw.mode)
    if layer.kind == "linear":
        if integer:
            dcfg = datapath_config_for(cfg, scale_product_bits)
            return linear_quantized(qa, qw, dcfg, layer.bias, layer.relu)
        return linear_simulated(qa, qw, layer.bias, layer.relu)
    if integer:
        dcfg = datapath_config_for(cfg, scale_product_bits)
        return conv2d_quantized(qa, qw, dcfg, layer.stride, layer.padding,
                                layer.bias, layer.relu)
    return conv2d_simulated(qa, qw, layer.stride, layer.padding, layer.bias, layer.relu)


def _scale_label(cfg: QuantConfig, operand: str) -> str:
    mode = _scale_mode(cfg, operand)
    if mode is ScaleMode.COARSE:
        return "-"
    if mode is ScaleMode.SINGLE_LEVEL:
        return "fp"
    return str(cfg.m_w if operand == "w" else cfg.m_a)


def run_network(net: NetworkSpec, x, mode: Mode | None = Mode.PER_VECTOR_TWO_LEVEL,
                cfg: QuantConfig | None = None, *, scale_product_bits: int | None = None,
                act_alphas: dict[int, AlphaSet] | None = None):
    """Run ``net`` on input ``x``; returns ``(output, ErrorReport)``.

    ``mode=None`` uses ``cfg`` (or the network config) exactly as given.
    Errors are measured per layer against the float reference pipeline.
    """
    x = np.asarray(as_tensor(x).data if not isinstance(x, np.ndarray) else x,
                   dtype=np.float64)
    if x.shape != net.input_shape:
        raise ShapeError(f"network expects input {net.input_shape}, got {x.shape}")
    base = cfg or net.config
    label = mode.value if mode is not None else mode_of(base)
    report = ErrorReport()
    ref = x
    out = x
    for i, layer in enumerate(net.layers):
        ref = run_layer(layer, ref, None)
        if mode is Mode.REFERENCE:
            out = run_layer(layer, out, None)
            lcfg = layer.quant or base
        else:
            lcfg = layer.quant or base
            if mode is not None:
                lcfg = configure(mode, lcfg)
            alphas = (act_alphas or {}).get(i)
            out = run_layer(layer, out, lcfg, scale_product_bits, alphas)
        name = layer.name or f"layer{i}"
        if mode is Mode.REFERENCE:
            m_w = m_a = "-"
        else:
            m_w, m_a = _scale_label(lcfg, "w"), _scale_label(lcfg, "a")
        report.add(ErrorRow.compare(name, label, ref, out, v=lcfg.v, n_w=lcfg.n_w,
                                    n_a=lcfg.n_a, m_w=m_w, m_a=m_a))
    return out, report
