"""Clipping-range (alpha) selection per scaling group.

Per-vector groups are small: with V=16 a vector has only 16 samples, so
percentile and entropy calibration are statistically weak there. All
combinations are allowed anyway.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterator, Union

import numpy as np

from .tensor import Tensor, VectorLayout

DEFAULT_BINS = 2048
MSE_GRID = 128
KL_EPS = 1e-12


# -- granularity ------------------------------------------------------------


@dataclass(frozen=True)
class PerLayer:
    name = "layer"


@dataclass(frozen=True)
class PerChannel:
    name = "channel"


@dataclass(frozen=True)
class PerVector:
    v: int
    name = "vector"

    def __post_init__(self) -> None:
        if self.v < 1:
            raise ValueError(f"vector size must be >= 1, got {self.v}")


Granularity = Union[PerLayer, PerChannel, PerVector]


def parse_granularity(name: str, v: int | None = None) -> Granularity:
    name = name.lower().replace("-", "_")
    if name in ("layer", "per_layer"):
        return PerLayer()
    if name in ("channel", "per_channel"):
        return PerChannel()
    if name in ("vector", "per_vector"):
        if v is None:
            raise ValueError("per-vector granularity needs a vector size")
        return PerVector(v)
    raise ValueError(f"unknown granularity {name!r}")


# -- methods ----------------------------------------------------------------


@dataclass(frozen=True)
class Max:
    name = "max"


@dataclass(frozen=True)
class Percentile:
    q: float
    name = "percentile"

    def __post_init__(self) -> None:
        if not 0.0 < self.q <= 1.0:
            raise ValueError(f"percentile fraction must be in (0, 1], got {self.q}")


@dataclass(frozen=True)
class Entropy:
    bins: int = DEFAULT_BINS
    name = "entropy"


@dataclass(frozen=True)
class Mse:
    grid: int = MSE_GRID
    name = "mse"


CalibMethod = Union[Max, Percentile, Entropy, Mse]


def parse_method(name: str, q: float | None = None) -> CalibMethod:
    name = name.lower()
    if name == "max":
        return Max()
    if name == "percentile":
        if q is None:
            raise ValueError("percentile calibration needs a fraction q")
        return Percentile(q)
    if name == "entropy":
        return Entropy()
    if name == "mse":
        return Mse()
    raise ValueError(f"unknown calibration method {name!r}")


# -- histogram --------------------------------------------------------------


@dataclass(frozen=True)
class Histogram:
    counts: np.ndarray
    abs_max: float

    @property
    def bins(self) -> int:
        return self.counts.size

    @property
    def edges(self) -> np.ndarray:
        return bin_edges(self.abs_max, self.bins)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def bin_edges(top: float, bins: int) -> np.ndarray:
    return top * (np.arange(bins + 1, dtype=np.float64) / bins)


def build_histogram(values, bins: int = DEFAULT_BINS) -> Histogram:
    """Histogram of |x| over [0, abs-max].

    A value sitting exactly on an interior edge lands in the higher bin; the
    top edge is inclusive.
    """
    if bins < 16:
        raise ValueError(f"need at least 16 bins, got {bins}")
    mags = np.abs(np.asarray(values, dtype=np.float64)).reshape(-1)
    if mags.size == 0:
        raise ValueError("cannot histogram an empty group")
    top = float(mags.max())
    counts = np.zeros(bins, dtype=np.int64)
    if top == 0.0:
        counts[0] = mags.size
        return Histogram(counts, 0.0)
    edges = bin_edges(top, bins)
    idx = np.floor(mags / top * bins).astype(np.int64)
    idx = np.clip(idx, 0, bins - 1)
    # repair float drift so the rule is exactly "x >= edge[j] -> bin >= j"
    idx = np.where(mags < edges[idx], idx - 1, idx)
    up = np.minimum(idx + 1, bins - 1)
    idx = np.where((idx + 1 <= bins - 1) & (mags >= edges[up]), up, idx)
    np.add.at(counts, np.clip(idx, 0, bins - 1), 1)
    return Histogram(counts, top)


# -- per-group selectors ----------------------------------------------------


def _levels(bits: int) -> int:
    return 2 ** (bits - 1) - 1


def _round_half_away(x: np.ndarray) -> np.ndarray:
    mag = np.abs(x)
    fl = np.floor(mag)
    return np.copysign(fl + (mag - fl >= 0.5), x)


def kl_divergence_at(counts: np.ndarray, i: int, levels: int) -> float:
    """KL(reference || quantized) when clipping after the first ``i`` bins."""
    ref = counts[:i].astype(np.float64)
    ref[i - 1] += counts[i:].sum()
    kept = counts[:i].astype(np.float64)
    bounds = (np.arange(levels + 1) * i) // levels
    quant = np.empty(i, dtype=np.float64)
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        if hi > lo:
            quant[lo:hi] = kept[lo:hi].sum() / (hi - lo)
    p = ref / ref.sum()
    qsum = quant.sum()
    q = quant / qsum if qsum > 0 else np.zeros_like(quant)
    q = np.where(q > 0, q, KL_EPS)
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / q[nz])))


def calibrate_entropy(hist: Histogram, bits: int) -> float:
    """Threshold minimising KL divergence between clipped and quantized mass.

    Candidates are the upper edges of bins ``levels .. bins`` where
    ``levels = 2**(bits-1) - 1``.
    """
    if hist.total == 0:
        raise ValueError("empty histogram")
    if hist.abs_max == 0.0:
        return 0.0
    levels = _levels(bits)
    if np.count_nonzero(hist.counts) <= 1 or levels >= hist.bins:
        return hist.abs_max
    edges = hist.edges
    best_i, best_kl = hist.bins, math.inf
    for i in range(levels, hist.bins + 1):
        kl = kl_divergence_at(hist.counts, i, levels)
        if kl < best_kl:
            best_i, best_kl = i, kl
    return float(edges[best_i])


def mse_candidates(top: float, grid: int = MSE_GRID) -> np.ndarray:
    return np.linspace(top / grid, top, grid)


def quantization_mse(mags: np.ndarray, alphas: np.ndarray, bits: int,
                     weights: np.ndarray | None = None) -> np.ndarray:
    """Mean squared clip/round error of |x| for each candidate alpha."""
    levels = _levels(bits)
    s = np.asarray(alphas, dtype=np.float64)[:, None] / levels
    codes = np.clip(_round_half_away(mags[None, :] / s), 0, levels)
    err = (codes * s - mags[None, :]) ** 2
    if weights is None:
        return err.mean(axis=1)
    return (err * weights[None, :]).sum(axis=1) / weights.sum()


def calibrate_mse(data: Union[Histogram, np.ndarray, Tensor], bits: int,
                  grid: int = MSE_GRID) -> float:
    """Grid alpha with the smallest reconstruction MSE.

    Raw values are used directly; a histogram is evaluated at bin centres.
    """
    if isinstance(data, Histogram):
        if data.abs_max == 0.0:
            return 0.0
        edges = data.edges
        mags = 0.5 * (edges[:-1] + edges[1:])
        weights = data.counts.astype(np.float64)
        top = data.abs_max
    else:
        mags = np.abs(np.asarray(data, dtype=np.float64)).reshape(-1)
        if mags.size == 0:
            raise ValueError("cannot calibrate an empty group")
        weights = None
        top = float(mags.max())
        if top == 0.0:
            return 0.0
    cands = mse_candidates(top, grid)
    return float(cands[int(np.argmin(quantization_mse(mags, cands, bits, weights)))])


def percentile_alpha(values, q: float) -> float:
    mags = np.abs(np.asarray(values, dtype=np.float64)).reshape(-1)
    if mags.size == 0:
        raise ValueError("cannot calibrate an empty group")
    if q >= 1.0:
        return float(mags.max())
    return float(np.quantile(mags, q, method="linear"))


def group_alpha(values, method: CalibMethod, bits: int = 8) -> float:
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.size == 0:
        raise ValueError("cannot calibrate an empty group")
    if isinstance(method, Max):
        return float(np.max(np.abs(values)))
    if isinstance(method, Percentile):
        return percentile_alpha(values, method.q)
    if isinstance(method, Entropy):
        return calibrate_entropy(build_histogram(values, method.bins), bits)
    if isinstance(method, Mse):
        return calibrate_mse(values, bits, method.grid)
    raise TypeError(f"unknown calibration method {method!r}")


# -- tensor-level -----------------------------------------------------------


@dataclass(frozen=True)
class AlphaSet:
    """One clipping threshold per scaling group.

    ``alphas`` has shape ``(1,)`` per-layer, ``(K,)`` per-channel and
    ``(groups, vectors)`` per-vector, matching :class:`VectorLayout` blocks.
    """

    granularity: Granularity
    method: CalibMethod
    alphas: np.ndarray
    shape: tuple[int, ...]

    def to_json(self) -> str:
        g = self.granularity
        m = self.method
        doc = {
            "granularity": g.name,
            "v": getattr(g, "v", None),
            "method": m.name,
            "q": getattr(m, "q", None),
            "shape": list(self.shape),
            "groups": list(self.alphas.shape),
            "alphas": [float(a) for a in self.alphas.reshape(-1)],
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "AlphaSet":
        doc = json.loads(text)
        g = parse_granularity(doc["granularity"], doc.get("v"))
        m = parse_method(doc["method"], doc.get("q"))
        alphas = np.asarray(doc["alphas"], dtype=np.float64).reshape(doc["groups"])
        return cls(g, m, alphas, tuple(doc["shape"]))


def iter_groups(array: np.ndarray, g: Granularity) -> Iterator[tuple[tuple, np.ndarray]]:
    """Yield ``(index, values)`` per scaling group, padded lanes excluded."""
    arr = np.asarray(array, dtype=np.float64)
    if isinstance(g, PerLayer):
        yield (0,), arr.reshape(-1)
    elif isinstance(g, PerChannel):
        if arr.ndim not in (2, 4):
            raise ValueError(
                "per-channel groups need a weight tensor (K,C) or (K,C,R,S); "
                f"got rank {arr.ndim}"
            )
        for k in range(arr.shape[0]):
            yield (k,), arr[k].reshape(-1)
    elif isinstance(g, PerVector):
        layout = VectorLayout(arr.shape, g.v)
        blocks = layout.to_blocks(arr)
        keep = blocks.shape[-1] - layout.vector_pad_counts()
        for k in range(blocks.shape[0]):
            for i in range(blocks.shape[1]):
                yield (k, i), blocks[k, i, : keep[k, i]]
    else:
        raise TypeError(f"unknown granularity {g!r}")


def alpha_shape(shape: tuple[int, ...], g: Granularity) -> tuple[int, ...]:
    if isinstance(g, PerLayer):
        return (1,)
    if isinstance(g, PerChannel):
        if len(shape) not in (2, 4):
            raise ValueError(f"per-channel groups need rank 2 or 4, got {len(shape)}")
        return (shape[0],)
    return VectorLayout(shape, g.v).blocks_shape[:2]


def calibrate(t: Tensor | np.ndarray, g: Granularity, m: CalibMethod = Max(),
              bits: int = 8) -> AlphaSet:
    """Select alpha for every scaling group of ``t``.

    ``bits`` only matters for entropy and MSE calibration.
    """
    arr = np.asarray(t, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("cannot calibrate an empty tensor")
    shape = arr.shape
    out = np.zeros(alpha_shape(shape, g), dtype=np.float64)
    if isinstance(m, Max):
        # vectorised fast path; zero pads never raise |x|
        if isinstance(g, PerVector):
            out[...] = np.abs(VectorLayout(shape, g.v).to_blocks(arr)).max(axis=-1)
        elif isinstance(g, PerChannel):
            alpha_shape(shape, g)
            out[...] = np.abs(arr.reshape(shape[0], -1)).max(axis=1)
        else:
            out[0] = np.abs(arr).max()
        return AlphaSet(g, m, out, shape)
    for idx, values in iter_groups(arr, g):
        out[idx] = group_alpha(values, m, bits)
    return AlphaSet(g, m, out, shape)
