import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import numpy.typing as npt
from scipy.spatial.distance import pdist, squareform

from deep_prior_nas.arch_space import (
    FLAT_CAP,
    ArchitectureSpec,
    ConvLayer,
    ShapeTrace,
    SkipLink,
    conv_output,
    parse,
    same_padding,
    serialize,
    validate,
)
from deep_prior_nas.datasets import FloatArray, ImageDataset, IntArray
from deep_prior_nas.errors import ArchitectureError, CheckpointError

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class DeepPrior:
    """An architecture spec with materialized, bias-free random weights."""

    spec: ArchitectureSpec
    trace: ShapeTrace
    seed: int
    # Keyed by layer index; skip projections by the index of their source conv.
    conv_weights: dict[int, FloatArray]
    skip_weights: dict[int, FloatArray] = field(default_factory=dict)
    search_classes: tuple[int, ...] | None = None
    flat_cap: int = FLAT_CAP

    @property
    def fingerprint(self) -> str:
        digest = hashlib.sha256(f"{serialize(self.spec)}#{self.seed}".encode())
        return digest.hexdigest()[:16]

    @property
    def flat_dim(self) -> int:
        return self.trace.flat_dim


@dataclass(frozen=True, eq=False)
class EmbeddedDataset:
    features: FloatArray
    labels: IntArray
    prior_fingerprint: str

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def with_classes(self, classes: list[int]) -> "EmbeddedDataset":
        idx = np.flatnonzero(np.isin(self.labels, classes))
        return EmbeddedDataset(self.features[idx], self.labels[idx], self.prior_fingerprint)


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> FloatArray:
    """Gaussian draw with variance 2 / fan_in."""
    std = np.float32(math.sqrt(2.0 / fan_in))
    return rng.standard_normal(shape, dtype=np.float32) * std


def init_weights(
    spec: ArchitectureSpec,
    seed: int,
    flat_cap: int = FLAT_CAP,
    search_classes: tuple[int, ...] | None = None,
) -> DeepPrior:
    trace = validate(spec, flat_cap)
    links = {link.source: link for link in trace.skips}
    rng = np.random.default_rng(seed)

    conv_weights: dict[int, FloatArray] = {}
    skip_weights: dict[int, FloatArray] = {}
    for i, layer in enumerate(spec.layers):
        if not isinstance(layer, ConvLayer):
            continue
        in_channels = trace.input_of(i)[0]
        k = layer.kernel
        conv_weights[i] = he_normal(
            rng, (layer.out_channels, in_channels, k, k), in_channels * k * k
        )
        if i in links:
            link = links[i]
            skip_weights[i] = he_normal(
                rng, (link.out_channels, link.in_channels, 1, 1), link.in_channels
            )

    return DeepPrior(
        spec, trace, seed, conv_weights, skip_weights, search_classes, flat_cap
    )


def conv2d(x: FloatArray, weight: FloatArray, stride: int) -> FloatArray:
    """Bias-free cross-correlation with same-style zero padding.

    Accumulates one (out, in) matrix product per kernel offset in row-major
    offset order, so the summation order is fixed.
    """
    batch, _, height, width = x.shape
    out_channels, _, k, _ = weight.shape
    out_h, out_w = conv_output(height, stride), conv_output(width, stride)
    xp = np.pad(
        x,
        ((0, 0), (0, 0), same_padding(height, k, stride), same_padding(width, k, stride)),
    )
    acc = np.zeros((out_channels, batch, out_h, out_w), dtype=np.float32)
    for i in range(k):
        for j in range(k):
            patch = xp[
                :,
                :,
                i : i + stride * (out_h - 1) + 1 : stride,
                j : j + stride * (out_w - 1) + 1 : stride,
            ]
            acc += np.tensordot(weight[:, :, i, j], patch, axes=([1], [1]))
    return np.ascontiguousarray(acc.transpose(1, 0, 2, 3))


def pool2d(x: FloatArray, pool_field: int, stride: int, average: bool = False) -> FloatArray:
    windows = np.lib.stride_tricks.sliding_window_view(
        x, (pool_field, pool_field), axis=(2, 3)
    )[:, :, ::stride, ::stride]
    reduced = windows.mean(axis=(-2, -1)) if average else windows.max(axis=(-2, -1))
    return reduced.astype(np.float32, copy=False)


def _project(
    x: FloatArray, weight: FloatArray, link: SkipLink, shape: tuple[int, ...]
) -> FloatArray:
    sampled = x[:, :, :: link.stride, :: link.stride]
    projected = np.tensordot(weight[:, :, 0, 0], sampled, axes=([1], [1]))
    # Unpadded pools inside the span can leave the main path smaller; crop top-left.
    return projected.transpose(1, 0, 2, 3)[:, :, : shape[2], : shape[3]]


def forward(prior: DeepPrior, batch: npt.NDArray[np.floating]) -> FloatArray:
    """Embed a (B, C, H, W) batch into (B, D) features."""
    if tuple(batch.shape[1:]) != prior.spec.input_shape:
        raise ValueError(
            f"Batch shape {batch.shape[1:]} does not match prior input "
            f"{prior.spec.input_shape}"
        )
    x = batch.astype(np.float32, copy=False)
    targets = {link.target: link for link in prior.trace.skips}
    skip_inputs: dict[int, FloatArray] = {}

    for i, layer in enumerate(prior.spec.layers):
        if isinstance(layer, ConvLayer):
            if layer.skip_source:
                skip_inputs[i] = x
            y = conv2d(x, prior.conv_weights[i], layer.stride)
            if i in targets:
                link = targets[i]
                y += _project(
                    skip_inputs.pop(link.source), prior.skip_weights[link.source], link, y.shape
                )
            x = np.maximum(y, np.float32(0.0))
        else:
            x = pool2d(x, layer.field, layer.stride, layer.average)
        logger.debug(f"Layer {i} ({layer}) -> {x.shape[1:]}")

    return x.reshape(len(x), -1)


def _dataset_key(prior: DeepPrior, ds: ImageDataset) -> str:
    digest = hashlib.sha256(f"{ds.name}:{ds.split_tag}:{len(ds)}".encode())
    digest.update(ds.labels.tobytes())
    digest.update(np.ascontiguousarray(ds.images).tobytes())
    return f"{prior.fingerprint}-{digest.hexdigest()[:12]}"


class EmbeddingCache:
    """On-disk embeddings: JSON header, raw row-major float32 features, labels."""

    def __init__(self, directory: Path):
        self.directory = directory
        self.directory.mkdir(parents=True, exist_ok=True)

    def _paths(self, key: str) -> tuple[Path, Path, Path]:
        return (
            self.directory / f"{key}.json",
            self.directory / f"{key}.features.f32",
            self.directory / f"{key}.labels.npy",
        )

    def load(self, key: str, prior_fingerprint: str) -> EmbeddedDataset | None:
        header_path, features_path, labels_path = self._paths(key)
        if not header_path.exists():
            return None
        try:
            header = json.loads(header_path.read_text())
            if header["fingerprint"] != key:
                logger.warning(f"Embedding cache fingerprint mismatch for {key}, ignoring")
                return None
            features = np.memmap(
                features_path, dtype=np.float32, mode="r", shape=(header["n"], header["dim"])
            )
            labels = np.load(labels_path)
        except (OSError, ValueError, KeyError) as e:
            logger.warning(f"Unreadable embedding cache entry {key}: {e}")
            return None
        logger.info(f"Embedding cache hit for {key}")
        return EmbeddedDataset(features, labels, prior_fingerprint)

    def allocate(self, key: str, n: int, dim: int) -> FloatArray:
        _, features_path, _ = self._paths(key)
        return np.memmap(features_path, dtype=np.float32, mode="w+", shape=(n, dim))

    def store(self, key: str, embedded: EmbeddedDataset) -> None:
        header_path, features_path, labels_path = self._paths(key)
        if isinstance(embedded.features, np.memmap):
            embedded.features.flush()
        else:
            embedded.features.astype(np.float32).tofile(features_path)
        np.save(labels_path, embedded.labels)
        header = {"fingerprint": key, "n": len(embedded), "dim": embedded.dim}
        header_path.write_text(json.dumps(header))


def embed_dataset(
    prior: DeepPrior,
    ds: ImageDataset,
    batch_size: int = 256,
    cache: EmbeddingCache | None = None,
    memory_budget_mb: int | None = None,
    workers: int = 1,
) -> EmbeddedDataset:
    """One forward pass of the prior over the whole dataset, order preserving."""
    if len(ds) == 0:
        raise ValueError("Cannot embed an empty dataset")
    n, dim = len(ds), prior.flat_dim
    assert dim <= prior.flat_cap, "validated specs never exceed FLAT_CAP"

    key = _dataset_key(prior, ds)
    if cache is not None:
        cached = cache.load(key, prior.fingerprint)
        if cached is not None:
            return cached

    oversized = memory_budget_mb is not None and n * dim * 4 > memory_budget_mb * 2**20
    if cache is not None and oversized:
        features = cache.allocate(key, n, dim)
    else:
        features = np.empty((n, dim), dtype=np.float32)

    def embed_rows(start: int) -> None:
        stop = min(start + batch_size, n)
        features[start:stop] = forward(prior, ds.images[start:stop])

    starts = range(0, n, batch_size)
    if workers > 1:
        # Each batch writes a disjoint row block.
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(embed_rows, starts))
    else:
        for start in starts:
            embed_rows(start)

    embedded = EmbeddedDataset(features, ds.labels.copy(), prior.fingerprint)
    if cache is not None:
        cache.store(key, embedded)
    logger.debug(f"Embedded {n} samples of {ds.name}/{ds.split_tag} into {dim} features")
    return embedded


def separation_ratio(
    features: FloatArray,
    labels: IntArray,
    max_samples: int = 2000,
    seed: int = 0,
    max_values: int = 2**25,
) -> float:
    """Mean between-class over mean within-class Euclidean distance on a sample.

    At most ``max_values`` feature values are read, so wide embeddings are
    compared on fewer rows.
    """
    rng = np.random.default_rng(seed)
    dim = max(features.shape[1], 1)
    rows = min(max_samples, max(2, max_values // dim))
    idx = np.sort(rng.permutation(len(labels))[:rows])
    distances = squareform(pdist(np.asarray(features[idx], dtype=np.float32)))
    same = labels[idx][:, None] == labels[idx][None, :]
    off_diagonal = ~np.eye(len(idx), dtype=bool)
    within = distances[same & off_diagonal]
    between = distances[~same]
    if not len(within) or not len(between):
        return float("nan")
    return float(between.mean() / within.mean())


def save_prior(prior: DeepPrior, path: Path) -> None:
    data = {
        "spec": serialize(prior.spec),
        "seed": prior.seed,
        "search_classes": list(prior.search_classes) if prior.search_classes else None,
        "fingerprint": prior.fingerprint,
    }
    path.write_text(json.dumps(data, indent=2))


def load_prior(path: Path, flat_cap: int = FLAT_CAP) -> DeepPrior:
    """Regenerate a saved prior from its spec and seed."""
    try:
        data = json.loads(path.read_text())
        spec = parse(data["spec"])
        classes = data.get("search_classes")
        prior = init_weights(
            spec, int(data["seed"]), flat_cap, tuple(classes) if classes else None
        )
    except (OSError, ValueError, KeyError, ArchitectureError) as e:
        raise CheckpointError(f"Cannot load prior checkpoint {path}: {e}") from e
    if prior.fingerprint != data.get("fingerprint"):
        raise CheckpointError(f"Prior checkpoint {path} fails its fingerprint check")
    return prior
