import gzip
import struct
from pathlib import Path

import numpy as np
import numpy.typing as npt
import pytest
from prometheus_client import CollectorRegistry

from deep_prior_nas.arch_space import ArchitectureGrammar
from deep_prior_nas.config import (
    AgentConfig,
    AppConfig,
    MetricsConfig,
    SearchConfig,
    TrainConfig,
)
from deep_prior_nas.datasets import ImageDataset, LoadedDataset
from deep_prior_nas.metrics import SearchMetrics

BLOB_SHAPE = (1, 8, 8)


def make_blobs(
    per_class: int,
    classes: list[int],
    split_tag: str = "train",
    seed: int = 0,
    shape: tuple[int, int, int] = BLOB_SHAPE,
    noise: float = 0.05,
) -> ImageDataset:
    """Images scattered tightly around one fixed random pattern per class."""
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for cls in classes:
        pattern = np.random.default_rng(1000 + cls).random(shape)
        samples = pattern + noise * rng.standard_normal((per_class, *shape))
        images.append(np.clip(samples, 0.0, 1.0))
        labels.append(np.full(per_class, cls))
    return ImageDataset(
        images=np.concatenate(images).astype(np.float32),
        labels=np.concatenate(labels).astype(np.int64),
        split_tag=split_tag,
        name="blobs",
    )


def write_idx_images(path: Path, pixels: npt.NDArray[np.uint8], compress: bool = False) -> None:
    n, rows, cols = pixels.shape
    data = struct.pack(">IIII", 0x00000803, n, rows, cols) + pixels.tobytes()
    path.write_bytes(gzip.compress(data) if compress else data)


def write_idx_labels(path: Path, labels: npt.NDArray[np.uint8], compress: bool = False) -> None:
    data = struct.pack(">II", 0x00000801, len(labels)) + labels.astype(np.uint8).tobytes()
    path.write_bytes(gzip.compress(data) if compress else data)


@pytest.fixture
def blob_data() -> LoadedDataset:
    """Ten separable classes of 8x8 single-channel images."""
    classes = list(range(10))
    return LoadedDataset(
        name="blobs",
        train=make_blobs(20, classes, "train", seed=1),
        test=make_blobs(10, classes, "test", seed=2),
    )


@pytest.fixture
def small_config() -> AppConfig:
    """Configuration sized for CPU-fast unit tests."""
    return AppConfig(
        classifier=TrainConfig(epochs=5, learning_rate=0.05, batch_size=32),
        agent=AgentConfig(replay_batch=4, max_convs=3, bucket_edges=[2, 4]),
        search=SearchConfig(total_architectures=6, explore_len=3, decay_every=1, decay_step=0.5),
    )


@pytest.fixture
def small_grammar() -> ArchitectureGrammar:
    """Search space with narrow convolutions for 8x8 inputs."""
    return ArchitectureGrammar(
        input_shape=BLOB_SHAPE,
        max_convs=3,
        bucket_edges=(2, 4),
        channels=(4, 8),
        kernels=(1, 3),
    )


@pytest.fixture
def custom_registry() -> CollectorRegistry:
    """Create a custom Prometheus registry for each test to avoid conflicts."""
    return CollectorRegistry()


@pytest.fixture
def metrics(custom_registry: CollectorRegistry) -> SearchMetrics:
    return SearchMetrics(MetricsConfig(namespace="dpnas_test"), registry=custom_registry)
