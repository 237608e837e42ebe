import json

import numpy as np
import pytest

import oracles
from vsquant.calibration import (
    AlphaSet,
    Entropy,
    Max,
    Mse,
    PerChannel,
    PerLayer,
    PerVector,
    Percentile,
    build_histogram,
    calibrate,
    calibrate_entropy,
    calibrate_mse,
    group_alpha,
    kl_divergence_at,
    parse_granularity,
    parse_method,
    percentile_alpha,
)
from vsquant.tensor import Tensor

METHODS = [Max(), Percentile(0.99), Entropy(bins=256), Mse()]


def test_max_per_layer():
    a = calibrate(Tensor.from_array([0.5, -1.0, 2.0, 4.0]), PerLayer())
    assert a.alphas.tolist() == [4.0]


def test_percentile_example():
    values = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]
    assert percentile_alpha(values, 0.25) == pytest.approx(2.25)
    assert percentile_alpha(values, 0.25) == pytest.approx(oracles.percentile_linear(values, 0.25))


@pytest.mark.parametrize("q", [0.1, 0.5, 0.9, 0.999])
def test_percentile_matches_oracle(q):
    values = np.random.default_rng(3).normal(size=301).tolist()
    assert percentile_alpha(values, q) == pytest.approx(oracles.percentile_linear(values, q), rel=1e-12)


def test_percentile_one_is_max():
    x = np.random.default_rng(4).normal(size=(4, 6, 3, 3))
    for g in (PerLayer(), PerChannel(), PerVector(4)):
        np.testing.assert_array_equal(calibrate(x, g, Percentile(1.0)).alphas,
                                      calibrate(x, g, Max()).alphas)


def test_percentile_rejects_bad_q():
    with pytest.raises(ValueError):
        Percentile(0.0)
    with pytest.raises(ValueError):
        Percentile(1.5)


def test_histogram_boundaries():
    counts = np.zeros(16, dtype=int)
    h = build_histogram([0.0, 1.0, 2.0, 3.0], bins=16)
    # edges are multiples of 3/16; 1.0 and 2.0 fall strictly inside bins 5 and 10
    counts[[0, 5, 10, 15]] = 1
    np.testing.assert_array_equal(h.counts, counts)


def test_histogram_edge_goes_up():
    h = build_histogram(np.arange(17, dtype=float), bins=16)
    # value j sits on edge j, so it lands in bin j; the top value stays in the last bin
    expected = np.ones(16, dtype=int)
    expected[-1] = 2
    np.testing.assert_array_equal(h.counts, expected)
    assert h.total == 17


def test_histogram_needs_16_bins():
    with pytest.raises(ValueError):
        build_histogram([1.0], bins=8)


def test_histogram_all_zero():
    h = build_histogram(np.zeros(10), bins=16)
    assert h.counts[0] == 10 and h.abs_max == 0.0
    assert calibrate_entropy(h, 8) == 0.0


@pytest.mark.parametrize("seed,bits", [(0, 4), (1, 3), (2, 6)])
def test_entropy_matches_exhaustive_oracle(seed, bits):
    rng = np.random.default_rng(seed)
    x = np.concatenate([rng.laplace(size=3000), [25.0]])
    h = build_histogram(x, bins=128)
    levels = 2 ** (bits - 1) - 1
    kls = oracles.kl_all_candidates(h.counts.tolist(), levels)
    for offset in (0, 7, 40, len(kls) - 1):
        assert kl_divergence_at(h.counts, levels + offset, levels) == pytest.approx(kls[offset], abs=1e-9)
    best = min(range(len(kls)), key=lambda j: (kls[j], j))
    assert calibrate_entropy(h, bits) == pytest.approx(h.edges[levels + best])


def test_entropy_clips_outlier():
    rng = np.random.default_rng(5)
    x = np.concatenate([rng.normal(size=20000), [50.0]])
    alpha = group_alpha(x, Entropy(), bits=4)
    assert alpha < 50.0


def test_entropy_single_value_returns_max():
    assert group_alpha(np.full(100, 3.0), Entropy(), bits=8) == 3.0


@pytest.mark.parametrize("bits", [3, 4, 8])
def test_mse_matches_oracle(bits):
    values = np.random.default_rng(bits).standard_t(3, size=400).tolist()
    cands = oracles.mse_all_candidates(values, bits)
    best_alpha, _ = min(cands, key=lambda c: c[1])
    assert calibrate_mse(np.array(values), bits) == pytest.approx(best_alpha, rel=1e-12)


def test_mse_on_histogram_close_to_raw():
    x = np.random.default_rng(9).normal(size=5000)
    raw = calibrate_mse(x, 4)
    hist = calibrate_mse(build_histogram(x), 4)
    assert abs(raw - hist) <= 2 * np.abs(x).max() / 128


@pytest.mark.parametrize("method", METHODS, ids=lambda m: m.name)
def test_alpha_within_range(method):
    x = np.random.default_rng(11).normal(size=(8, 16, 3, 3))
    a = calibrate(x, PerChannel(), method, bits=4)
    top = np.abs(x.reshape(8, -1)).max(axis=1)
    assert np.all(a.alphas > 0)
    assert np.all(a.alphas <= top * (1 + 1e-12))


@pytest.mark.parametrize("method", METHODS, ids=lambda m: m.name)
def test_scale_equivariance(method):
    x = np.random.default_rng(12).normal(size=(4, 32))
    a = calibrate(x, PerChannel(), method, bits=4).alphas
    b = calibrate(4.0 * x, PerChannel(), method, bits=4).alphas
    np.testing.assert_allclose(b, 4.0 * a, rtol=1e-9)


def test_nested_max_monotone():
    x = np.random.default_rng(13).normal(size=(4, 64, 3, 3))
    layer = calibrate(x, PerLayer()).alphas[0]
    chan = calibrate(x, PerChannel()).alphas
    assert np.all(chan <= layer)
    for v in (1, 2, 4, 8, 16, 32):
        fine = calibrate(x, PerVector(v)).alphas
        coarse = calibrate(x, PerVector(2 * v)).alphas
        assert np.all(coarse.max(axis=1) <= chan)
        pairs = fine.reshape(4, 9, -1, 2).max(axis=-1).reshape(coarse.shape)
        np.testing.assert_array_equal(pairs, coarse)


def test_max_fast_path_agrees_with_group_loop():
    x = np.random.default_rng(14).normal(size=(3, 10, 2, 2))
    fast = calibrate(x, PerVector(4), Max()).alphas
    slow = calibrate(x, PerVector(4), Percentile(1.0)).alphas
    np.testing.assert_array_equal(fast, slow)


def test_per_channel_needs_weight_tensor():
    with pytest.raises(ValueError):
        calibrate(np.ones((4, 2, 2)), PerChannel())


def test_alpha_shapes():
    x = np.ones((5, 10, 3, 3))
    assert calibrate(x, PerLayer()).alphas.shape == (1,)
    assert calibrate(x, PerChannel()).alphas.shape == (5,)
    assert calibrate(x, PerVector(4)).alphas.shape == (5, 9 * 3)
    assert calibrate(np.ones((10, 2, 2)), PerVector(4)).alphas.shape == (1, 4 * 3)


def test_alphaset_json_round_trip():
    x = np.random.default_rng(15).normal(size=(2, 6))
    a = calibrate(x, PerVector(4), Percentile(0.9))
    b = AlphaSet.from_json(a.to_json())
    assert b.granularity == a.granularity and b.method == a.method and b.shape == a.shape
    np.testing.assert_array_equal(a.alphas, b.alphas)
    assert json.loads(a.to_json())["granularity"] == "vector"


def test_parsers():
    assert parse_granularity("per_vector", 8) == PerVector(8)
    assert parse_granularity("per_layer") == PerLayer()
    assert parse_method("percentile", 0.5) == Percentile(0.5)
    assert parse_method("mse") == Mse()
    with pytest.raises(ValueError):
        parse_method("bogus")
    with pytest.raises(ValueError):
        parse_method("percentile")
