"""Seeded desk-scale networks and tensors used by tests, sweeps and the CLI.

Weights are uniform in [-1, 1] times a log-normal gain per (output, input)
channel pair, so magnitudes vary along C the way trained layers do. Changing
any constant here changes the frozen golden values in the test suite.
"""
from __future__ import annotations

import os
import sys

import numpy as np

from .nn import LayerSpec, NetworkSpec
from .quant import QuantConfig
from .tensor import Tensor, save_tensor

FIXTURE_SEED = 20210104
GAIN_SIGMA = 1.0


def rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def channel_gains(g: np.random.Generator, *shape: int) -> np.ndarray:
    return np.exp(g.normal(0.0, GAIN_SIGMA, size=shape))


def random_conv_weights(g: np.random.Generator, k: int, c: int, r: int, s: int) -> np.ndarray:
    w = g.uniform(-1.0, 1.0, size=(k, c, r, s)) * channel_gains(g, k, c)[:, :, None, None]
    return (w / np.sqrt(c * r * s)).astype(np.float32)


def random_linear_weights(g: np.random.Generator, k: int, c: int) -> np.ndarray:
    w = g.uniform(-1.0, 1.0, size=(k, c)) * channel_gains(g, 1, c)
    return (w / np.sqrt(c)).astype(np.float32)


def random_activation(g: np.random.Generator, c: int, h: int, w: int) -> np.ndarray:
    x = g.normal(0.0, 1.0, size=(c, h, w)) * channel_gains(g, c)[:, None, None]
    return x.astype(np.float32)


def fixture_network(seed: int = FIXTURE_SEED, config: QuantConfig | None = None) -> NetworkSpec:
    """Three layers: conv 3x3 (8->16), conv 3x3 stride 2 (16->32), linear (512->10)."""
    g = rng(seed)
    layers = (
        LayerSpec("conv2d", random_conv_weights(g, 16, 8, 3, 3),
                  (0.1 * g.normal(size=16)).astype(np.float32), 1, 1, True, "conv1"),
        LayerSpec("conv2d", random_conv_weights(g, 32, 16, 3, 3),
                  (0.1 * g.normal(size=32)).astype(np.float32), 2, 1, True, "conv2"),
        LayerSpec("linear", random_linear_weights(g, 10, 32 * 4 * 4),
                  (0.1 * g.normal(size=10)).astype(np.float32), name="fc"),
    )
    return NetworkSpec(layers, (8, 8, 8), config or QuantConfig())


def fixture_input(seed: int = FIXTURE_SEED) -> np.ndarray:
    return random_activation(rng(seed + 1), 8, 8, 8)


def write_fixture(out_dir: str, seed: int = FIXTURE_SEED) -> str:
    """Write ``net.json``, its weight files and ``input.vst``; returns the network file path."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "net.json")
    fixture_network(seed).save(path)
    save_tensor(Tensor.from_array(fixture_input(seed)), os.path.join(out_dir, "input.vst"))
    return path


if __name__ == "__main__":
    print(write_fixture(sys.argv[1] if len(sys.argv) > 1 else "fixture"))
