"""Dense float32 tensors, the VST1 file format, and vector views along C.

Layouts are fixed by rank:

    1-D  (C,)          activation vector (linear layer input)
    2-D  (K, C)        linear weights
    3-D  (C, H, W)     activation map
    4-D  (K, C, R, S)  convolution weights

Vectors of ``V`` elements are always cut along the input-channel axis ``C``.
Weight tensors (2-D/4-D) have a coarse axis ``K``; activation tensors do not,
so all of their vectors share coarse group 0.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

MAGIC = "VST1"
DTYPE_TAG = "f32"


class TensorError(ValueError):
    """Base class for malformed tensor input."""


class HeaderError(TensorError):
    pass


class LengthMismatchError(TensorError):
    pass


class NonFiniteError(TensorError):
    pass


@dataclass(frozen=True, eq=False)
class Tensor:
    """Immutable row-major float32 tensor of rank 1 to 4."""

    shape: tuple[int, ...]
    data: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        shape = tuple(int(d) for d in self.shape)
        if not 1 <= len(shape) <= 4:
            raise TensorError(f"rank must be 1..4, got {len(shape)}")
        if any(d < 1 for d in shape):
            raise TensorError(f"dimensions must be positive, got {shape}")
        data = np.asarray(self.data, dtype=np.float32).reshape(-1)
        if data.size != math.prod(shape):
            raise LengthMismatchError(
                f"shape {shape} needs {math.prod(shape)} values, got {data.size}"
            )
        if not np.all(np.isfinite(data)):
            raise NonFiniteError("tensor contains NaN or Inf")
        data = data.reshape(shape).copy()
        data.flags.writeable = False
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array(cls, array) -> "Tensor":
        arr = np.asarray(array)
        return cls(arr.shape, arr)

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        """Read-only float32 array in the tensor's shape."""
        return self.data

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(
            self.data.view(np.uint32), other.data.view(np.uint32)
        )

    def __len__(self) -> int:
        return self.shape[0]


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor.from_array(x)


# -- VST1 I/O ---------------------------------------------------------------


def encode_tensor(t: Tensor) -> bytes:
    header = " ".join([MAGIC, DTYPE_TAG, str(t.ndim), *map(str, t.shape)]) + "\n"
    return header.encode("ascii") + t.data.astype("<f4").tobytes()


def decode_tensor(raw: bytes) -> Tensor:
    nl = raw.find(b"\n")
    if nl < 0:
        raise HeaderError("missing header terminator")
    try:
        fields = raw[:nl].decode("ascii").split()
    except UnicodeDecodeError as exc:
        raise HeaderError("header is not ASCII") from exc
    if len(fields) < 3 or fields[0] != MAGIC:
        raise HeaderError(f"bad magic in header {fields[:1]!r}")
    if fields[1] != DTYPE_TAG:
        raise HeaderError(f"unsupported dtype {fields[1]!r}")
    try:
        ndims = int(fields[2])
        shape = tuple(int(d) for d in fields[3:])
    except ValueError as exc:
        raise HeaderError("non-integer dimension in header") from exc
    if len(shape) != ndims:
        raise HeaderError(f"header declares {ndims} dims but lists {len(shape)}")
    payload = raw[nl + 1 :]
    expected = 4 * math.prod(shape)
    if len(payload) != expected:
        raise LengthMismatchError(
            f"payload has {len(payload)} bytes, shape {shape} needs {expected}"
        )
    data = np.frombuffer(payload, dtype="<f4")
    return Tensor(shape, data)


def load_tensor(path: str | os.PathLike) -> Tensor:
    with open(path, "rb") as fh:
        return decode_tensor(fh.read())


def save_tensor(t: Tensor, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_tensor(t))


# -- vector layout ----------------------------------------------------------


@dataclass(frozen=True)
class VectorLayout:
    """How a tensor of a given shape is cut into V-element channel vectors.

    Blocked form is an array ``(groups, vectors_per_group, V)``. With
    ``per_channel`` the groups are the K output channels of a weight tensor;
    otherwise there is a single group. Inside a group, vectors are ordered
    row-major over (spatial position, channel-vector index).
    """

    shape: tuple[int, ...]
    v: int
    per_channel: bool = True

    def __post_init__(self) -> None:
        if self.v < 1:
            raise ValueError(f"vector size must be >= 1, got {self.v}")
        if not 1 <= len(self.shape) <= 4:
            raise ValueError(f"rank must be 1..4, got {len(self.shape)}")
        if not self.has_coarse_axis:
            object.__setattr__(self, "per_channel", False)

    @property
    def has_coarse_axis(self) -> bool:
        return len(self.shape) in (2, 4)

    @property
    def channel_axis(self) -> int:
        return 1 if self.has_coarse_axis else 0

    @property
    def channels(self) -> int:
        return self.shape[self.channel_axis]

    @property
    def vectors_per_position(self) -> int:
        return -(-self.channels // self.v)

    @property
    def pad_count(self) -> int:
        return self.vectors_per_position * self.v - self.channels

    def _moved_shape(self) -> tuple[int, ...]:
        # channel axis last, coarse axis (if any) first
        s = list(self.shape)
        c = s.pop(self.channel_axis)
        return (*s, c)

    @property
    def positions(self) -> int:
        """Spatial positions per coarse channel (R*S or H*W, else 1)."""
        moved = self._moved_shape()
        inner = moved[1:-1] if self.has_coarse_axis else moved[:-1]
        return math.prod(inner)

    @property
    def coarse_channels(self) -> int:
        return self.shape[0] if self.has_coarse_axis else 1

    @property
    def groups(self) -> int:
        return self.coarse_channels if self.per_channel else 1

    @property
    def blocks_shape(self) -> tuple[int, int, int]:
        total = self.coarse_channels * self.positions * self.vectors_per_position
        return (self.groups, total // self.groups, self.v)

    def to_blocks(self, array: np.ndarray) -> np.ndarray:
        """Zero-padded copy of ``array`` in blocked form."""
        arr = np.asarray(array)
        if arr.shape != self.shape:
            raise ValueError(f"expected shape {self.shape}, got {arr.shape}")
        moved = np.moveaxis(arr, self.channel_axis, -1)
        pad = [(0, 0)] * (moved.ndim - 1) + [(0, self.pad_count)]
        padded = np.pad(moved, pad) if self.pad_count else moved
        return padded.reshape(self.blocks_shape)

    def from_blocks(self, blocks: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`to_blocks`; padded lanes are dropped."""
        moved = self._moved_shape()
        padded_shape = (*moved[:-1], self.vectors_per_position * self.v)
        arr = np.asarray(blocks).reshape(padded_shape)[..., : self.channels]
        return np.moveaxis(arr, -1, self.channel_axis)

    def lane_mask(self) -> np.ndarray:
        """Boolean blocked mask, True on real (non-padded) lanes."""
        return self.to_blocks(np.ones(self.shape, dtype=bool))

    def vector_pad_counts(self) -> np.ndarray:
        """Pad count for every vector in blocked order."""
        return self.v - self.lane_mask().sum(axis=-1)


@dataclass(frozen=True)
class VectorView:
    """Read-only window onto one V-element channel vector of a tensor."""

    source: Tensor
    v: int
    coarse_index: int
    vector_index: int
    pad_count: int
    _values: np.ndarray = field(repr=False, compare=False)

    def values(self) -> np.ndarray:
        """All V lanes, padded lanes reading as 0.0."""
        return self._values

    def elements(self) -> np.ndarray:
        """Only the real (non-padded) lanes."""
        return self._values[: self.v - self.pad_count]


def channel_axis(t: Tensor) -> int:
    return VectorLayout(t.shape, 1).channel_axis


def vectorize(
    t: Tensor, v: int, axis: int | None = None, per_channel: bool = True
) -> list[VectorView]:
    """Split ``t`` into ceil(C/V) zero-padded vectors per (group, position)."""
    if v < 1:
        raise ValueError(f"vector size must be >= 1, got {v}")
    layout = VectorLayout(t.shape, v, per_channel)
    if axis is not None and axis != layout.channel_axis:
        raise ValueError(
            f"vectors run along channel axis {layout.channel_axis}, not {axis}"
        )
    blocks = layout.to_blocks(t.data)
    blocks.flags.writeable = False
    pads = layout.vector_pad_counts()
    return [
        VectorView(t, v, k, i, int(pads[k, i]), blocks[k, i])
        for k in range(blocks.shape[0])
        for i in range(blocks.shape[1])
    ]


def iter_vectors(t: Tensor, v: int) -> Iterator[np.ndarray]:
    for view in vectorize(t, v):
        yield view.values()


def abs_max(view: VectorView | Sequence[float] | np.ndarray) -> float:
    values = view.values() if isinstance(view, VectorView) else np.asarray(view)
    if values.size == 0:
        return 0.0
    return float(np.max(np.abs(values)))
