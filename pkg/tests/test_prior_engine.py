import json
from pathlib import Path
from unittest.mock import patch

import numpy as np
import numpy.typing as npt
import pytest
from conftest import make_blobs
from scipy.spatial.distance import pdist

from deep_prior_nas.arch_space import PoolLayer, parse, same_padding
from deep_prior_nas.errors import CheckpointError, InvalidArchitectureError
from deep_prior_nas.prior_engine import (
    DeepPrior,
    EmbeddingCache,
    conv2d,
    embed_dataset,
    forward,
    he_normal,
    init_weights,
    load_prior,
    pool2d,
    save_prior,
    separation_ratio,
)


def _reference_conv(
    x: npt.NDArray[np.float64], weight: npt.NDArray[np.float64], stride: int
) -> npt.NDArray[np.float64]:
    """Direct nested-loop cross-correlation with same-style zero padding."""
    batch, in_channels, height, width = x.shape
    out_channels, _, k, _ = weight.shape
    top, _ = same_padding(height, k, stride)
    left, _ = same_padding(width, k, stride)
    out_h, out_w = -(-height // stride), -(-width // stride)
    out = np.zeros((batch, out_channels, out_h, out_w))
    for b in range(batch):
        for o in range(out_channels):
            for r in range(out_h):
                for c in range(out_w):
                    total = 0.0
                    for i in range(in_channels):
                        for di in range(k):
                            for dj in range(k):
                                row = r * stride + di - top
                                col = c * stride + dj - left
                                if 0 <= row < height and 0 <= col < width:
                                    total += x[b, i, row, col] * weight[o, i, di, dj]
                    out[b, o, r, c] = total
    return out


def test_conv2d_matches_nested_loops() -> None:
    """Test the vectorised conv against a direct loop over random small cases."""
    rng = np.random.default_rng(0)
    for _ in range(200):
        k = int(rng.choice([1, 3, 5]))
        stride = int(rng.choice([1, 2]))
        height, width = (int(v) for v in rng.integers(k, 9, size=2))
        x = rng.standard_normal((2, int(rng.integers(1, 4)), height, width)).astype(np.float32)
        weight = rng.standard_normal((int(rng.integers(1, 4)), x.shape[1], k, k)).astype(
            np.float32
        )

        actual = conv2d(x, weight, stride)
        expected = _reference_conv(x.astype(np.float64), weight.astype(np.float64), stride)

        np.testing.assert_allclose(actual, expected, rtol=1e-5, atol=1e-5)


def test_pool2d_max_and_average() -> None:
    """Test unpadded pooling windows and their reductions."""
    x = np.arange(25, dtype=np.float32).reshape(1, 1, 5, 5)

    pooled = pool2d(x, 2, 2)
    averaged = pool2d(x, 3, 2, average=True)

    assert pooled.shape == (1, 1, 2, 2)
    assert pooled[0, 0].tolist() == [[6, 8], [16, 18]]
    assert averaged[0, 0].tolist() == [[6, 8], [16, 18]]


def _reference_pool(
    x: npt.NDArray[np.float64], pool_field: int, stride: int, average: bool
) -> npt.NDArray[np.float64]:
    batch, channels, height, width = x.shape
    out_h, out_w = (height - pool_field) // stride + 1, (width - pool_field) // stride + 1
    out = np.zeros((batch, channels, out_h, out_w))
    for b in range(batch):
        for ch in range(channels):
            for r in range(out_h):
                for c in range(out_w):
                    top, left = r * stride, c * stride
                    window = x[b, ch, top : top + pool_field, left : left + pool_field]
                    out[b, ch, r, c] = window.mean() if average else window.max()
    return out


def _reference_forward(
    prior: DeepPrior, batch: npt.NDArray[np.float64]
) -> npt.NDArray[np.float64]:
    """Layer-by-layer forward pass built from the loop oracles."""
    targets = {link.target: link for link in prior.trace.skips}
    sources: dict[int, npt.NDArray[np.float64]] = {}
    x = batch
    for i, layer in enumerate(prior.spec.layers):
        if isinstance(layer, PoolLayer):
            x = _reference_pool(x, layer.field, layer.stride, layer.average)
            continue
        if layer.skip_source:
            sources[i] = x
        y = _reference_conv(x, prior.conv_weights[i].astype(np.float64), layer.stride)
        if i in targets:
            link = targets[i]
            sampled = sources[link.source][:, :, :: link.stride, :: link.stride]
            weight = prior.skip_weights[link.source][:, :, 0, 0].astype(np.float64)
            projected = np.einsum("oi,bihw->bohw", weight, sampled)
            y = y + projected[:, :, : y.shape[2], : y.shape[3]]
        x = np.maximum(y, 0.0)
    return x.reshape(len(x), -1)


@pytest.mark.parametrize("average", [False, True])
def test_pool2d_matches_nested_loops(average: bool) -> None:
    """Test pooling against a direct loop over random windows and strides."""
    rng = np.random.default_rng(1)
    for _ in range(100):
        pool_field = int(rng.choice([2, 3, 4]))
        stride = int(rng.choice([2, 3, 4]))
        height, width = (int(v) for v in rng.integers(pool_field, 12, size=2))
        x = rng.standard_normal((2, 3, height, width)).astype(np.float32)

        actual = pool2d(x, pool_field, stride, average)
        expected = _reference_pool(x.astype(np.float64), pool_field, stride, average)

        np.testing.assert_allclose(actual, expected, rtol=1e-5, atol=1e-5)


@pytest.mark.parametrize(
    "text",
    [
        "in 2x9x9 | conv c4 k3 s1 skip | pool f2 s2 | conv c6 k3 s1 | conv c3 k1 s1",
        "in 1x7x7 | conv c3 k3 s2 skip | conv c4 k5 s1 | pool f3 s2",
        "in 3x8x8 | conv c4 k1 s1 skip | conv c4 k3 s2 skip | pool f2 s2 | conv c2 k3 s1",
    ],
)
def test_forward_matches_reference(text: str) -> None:
    """Test the full forward pass, skips and crops included, against the loop oracles."""
    spec = parse(text)
    rng = np.random.default_rng(7)
    for seed in range(5):
        prior = init_weights(spec, seed=seed)
        batch = rng.random((3, *spec.input_shape)).astype(np.float32)

        actual = forward(prior, batch)
        expected = _reference_forward(prior, batch.astype(np.float64))

        np.testing.assert_allclose(actual, expected, rtol=1e-5, atol=1e-5)


def test_identity_1x1_conv() -> None:
    x = np.random.default_rng(0).standard_normal((2, 3, 5, 5)).astype(np.float32)
    identity = np.eye(3, dtype=np.float32).reshape(3, 3, 1, 1)

    np.testing.assert_array_equal(conv2d(x, identity, 1), x)


def test_forward_zero_input_gives_zero_features() -> None:
    prior = init_weights(parse("in 1x8x8 | conv c8 k3 s1 skip | pool f2 s2 | conv c4 k3 s1"), 0)

    features = forward(prior, np.zeros((2, 1, 8, 8), dtype=np.float32))

    assert not features.any()


@pytest.mark.parametrize("scale", [0.5, 3.0])
def test_forward_positive_homogeneity(scale: float) -> None:
    """Test that bias-free ReLU and max-pool layers commute with positive scaling."""
    prior = init_weights(parse("in 1x8x8 | conv c8 k3 s1 skip | pool f2 s2 | conv c4 k3 s1"), 3)
    batch = np.random.default_rng(2).random((4, 1, 8, 8)).astype(np.float32)

    np.testing.assert_allclose(
        forward(prior, scale * batch), scale * forward(prior, batch), rtol=1e-5, atol=1e-6
    )


@pytest.mark.parametrize("fan_in", [9, 25, 576])
def test_he_normal_statistics(fan_in: int) -> None:
    """Test that He initialization has zero mean and variance 2 / fan_in."""
    samples = he_normal(np.random.default_rng(fan_in), (200_000,), fan_in)

    assert samples.dtype == np.float32
    assert abs(float(samples.mean())) < 0.01 * np.sqrt(2 / fan_in)
    assert float(samples.var()) == pytest.approx(2 / fan_in, rel=0.02)


def test_init_weights_shapes_and_determinism() -> None:
    """Test that weights depend only on the spec and seed."""
    spec = parse("conv c16 k5 s1 skip | pool f2 s2 | conv c32 k3 s1")

    prior = init_weights(spec, seed=3)
    again = init_weights(spec, seed=3)
    other = init_weights(spec, seed=4)

    assert prior.conv_weights[0].shape == (16, 1, 5, 5)
    assert prior.conv_weights[2].shape == (32, 16, 3, 3)
    assert prior.skip_weights[0].shape == (32, 1, 1, 1)
    assert prior.fingerprint == again.fingerprint
    assert prior.fingerprint != other.fingerprint
    for i in prior.conv_weights:
        np.testing.assert_array_equal(prior.conv_weights[i], again.conv_weights[i])
    assert not np.array_equal(prior.conv_weights[0], other.conv_weights[0])


def test_init_weights_rejects_invalid_spec() -> None:
    with pytest.raises(InvalidArchitectureError, match="skip-at-tail"):
        init_weights(parse("conv c16 k3 s1 skip"), seed=0)


def test_forward_shapes_with_skip_crop() -> None:
    """Test that a skip across an unpadded pool is cropped onto the main path."""
    # 9 -> conv s1 -> 9 -> pool f2 s2 -> 4, skip samples 9 with stride 2 -> 5
    spec = parse("in 2x9x9 | conv c4 k3 s1 skip | pool f2 s2 | conv c6 k3 s1 | conv c3 k1 s1")
    prior = init_weights(spec, seed=0)
    batch = np.random.default_rng(1).random((5, 2, 9, 9)).astype(np.float32)

    features = forward(prior, batch)

    assert features.shape == (5, 3 * 4 * 4)
    assert features.dtype == np.float32
    assert np.all(features >= 0)


def test_forward_rejects_wrong_input_shape() -> None:
    prior = init_weights(parse("conv c4 k3 s1"), seed=0)

    with pytest.raises(ValueError, match="does not match prior input"):
        forward(prior, np.zeros((1, 3, 28, 28), dtype=np.float32))


def test_embed_dataset_batch_size_independent() -> None:
    """Test that embeddings do not depend on batch size or worker count."""
    ds = make_blobs(7, [0, 1, 2])
    prior = init_weights(parse("in 1x8x8 | conv c8 k3 s1 | pool f2 s2 | conv c4 k3 s2"), seed=9)

    one = embed_dataset(prior, ds, batch_size=1)
    big = embed_dataset(prior, ds, batch_size=64)
    threaded = embed_dataset(prior, ds, batch_size=4, workers=3)

    assert one.features.shape == (21, 4 * 2 * 2)
    np.testing.assert_allclose(one.features, big.features, rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(one.features, threaded.features, rtol=1e-5, atol=1e-6)
    np.testing.assert_array_equal(one.labels, ds.labels)
    assert one.prior_fingerprint == prior.fingerprint


def test_embed_dataset_empty() -> None:
    ds = make_blobs(1, [0]).subset([])
    prior = init_weights(parse("in 1x8x8 | conv c4 k3 s1"), seed=0)

    with pytest.raises(ValueError, match="empty dataset"):
        embed_dataset(prior, ds)


def test_embedding_cache_round_trip(tmp_path: Path) -> None:
    """Test that embeddings spilled to the on-disk cache are served back unchanged."""
    ds = make_blobs(5, [0, 1])
    prior = init_weights(parse("in 1x8x8 | conv c4 k3 s1"), seed=0)
    cache = EmbeddingCache(tmp_path / "cache")

    # A zero budget forces the memory-mapped path
    first = embed_dataset(prior, ds, cache=cache, memory_budget_mb=0)
    second = embed_dataset(prior, ds, cache=cache)

    assert isinstance(second.features, np.memmap)
    np.testing.assert_array_equal(np.asarray(first.features), np.asarray(second.features))
    np.testing.assert_array_equal(first.labels, second.labels)
    assert len(list((tmp_path / "cache").glob("*.json"))) == 1


def test_embedding_cache_ignores_mismatched_header(tmp_path: Path) -> None:
    ds = make_blobs(5, [0, 1])
    prior = init_weights(parse("in 1x8x8 | conv c4 k3 s1"), seed=0)
    cache = EmbeddingCache(tmp_path)
    embed_dataset(prior, ds, cache=cache)
    header = next(tmp_path.glob("*.json"))
    header.write_text(json.dumps({"fingerprint": "other", "n": 10, "dim": 256}))

    key = header.name.removesuffix(".json")

    assert cache.load(key, prior.fingerprint) is None


def test_embedding_cache_key_covers_pixels(tmp_path: Path) -> None:
    """Test that regenerated images with identical labels miss the cache."""
    prior = init_weights(parse("in 1x8x8 | conv c4 k3 s1"), seed=0)
    cache = EmbeddingCache(tmp_path)

    first = embed_dataset(prior, make_blobs(5, [0, 1], seed=0), cache=cache)
    second = embed_dataset(prior, make_blobs(5, [0, 1], seed=5), cache=cache)

    assert len(list(tmp_path.glob("*.json"))) == 2
    assert not np.array_equal(np.asarray(first.features), np.asarray(second.features))


def test_separation_ratio() -> None:
    """Test that clustered classes separate better than shuffled labels."""
    ds = make_blobs(30, [0, 1, 2])
    features = ds.flattened()
    shuffled = np.random.default_rng(0).permutation(ds.labels)

    assert separation_ratio(features, ds.labels) > 2.0
    assert separation_ratio(features, shuffled) == pytest.approx(1.0, abs=0.25)
    assert np.isnan(separation_ratio(features, np.zeros(len(ds), dtype=np.int64)))


def test_separation_ratio_limits_rows_for_wide_features() -> None:
    """Test that wide embeddings are compared on fewer rows, read as float32."""
    ds = make_blobs(30, [0, 1, 2])
    wide = np.tile(ds.flattened(), (1, 4))

    with patch("deep_prior_nas.prior_engine.pdist", wraps=pdist) as mock_pdist:
        ratio = separation_ratio(wide, ds.labels, max_values=wide.shape[1] * 40)

    sample = mock_pdist.call_args.args[0]
    assert sample.shape == (40, 256)
    assert sample.dtype == np.float32
    assert ratio > 2.0


def test_save_and_load_prior(tmp_path: Path) -> None:
    """Test that a saved prior regenerates identical weights from its spec and seed."""
    prior = init_weights(parse("conv c8 k3 s2 | pool f2 s2"), seed=11, search_classes=(0, 1))
    path = tmp_path / "prior.json"

    save_prior(prior, path)
    loaded = load_prior(path)

    assert loaded.fingerprint == prior.fingerprint
    assert loaded.search_classes == (0, 1)
    np.testing.assert_array_equal(loaded.conv_weights[0], prior.conv_weights[0])


@pytest.mark.parametrize(
    "content,message",
    [
        ("not json", "Cannot load prior checkpoint"),
        ('{"seed": 1}', "Cannot load prior checkpoint"),
        ('{"spec": "conv c8 k3 q2", "seed": 1}', "Cannot load prior checkpoint"),
        ('{"spec": "conv c8 k3 s2", "seed": 1, "fingerprint": "x"}', "fingerprint check"),
    ],
)
def test_load_prior_errors(tmp_path: Path, content: str, message: str) -> None:
    """Test that unreadable or tampered prior checkpoints raise CheckpointError."""
    path = tmp_path / "prior.json"
    path.write_text(content)

    with pytest.raises(CheckpointError, match=message):
        load_prior(path)
