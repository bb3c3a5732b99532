import gzip
import logging
import struct
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import numpy.typing as npt

from deep_prior_nas.errors import DatasetLoadError

logger = logging.getLogger(__name__)

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 1 + 3 * 32 * 32
NUM_CLASSES = 10

FloatArray = npt.NDArray[np.float32]
IntArray = npt.NDArray[np.int64]


@dataclass(frozen=True)
class ImageDataset:
    """One split of an image dataset, pixels in [0, 1] as (N, C, H, W) float32."""

    images: FloatArray
    labels: IntArray
    split_tag: str
    name: str
    num_classes: int = NUM_CLASSES

    def __post_init__(self) -> None:
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if len(self.labels) and (
            self.labels.min() < 0 or self.labels.max() >= self.num_classes
        ):
            raise ValueError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple[int, int, int]:
        c, h, w = self.images.shape[1:]
        return (int(c), int(h), int(w))

    @property
    def classes(self) -> list[int]:
        return [int(c) for c in np.unique(self.labels)]

    def subset(self, indices: npt.ArrayLike, split_tag: str | None = None) -> "ImageDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return replace(
            self,
            images=self.images[idx],
            labels=self.labels[idx],
            split_tag=split_tag or self.split_tag,
        )

    def with_classes(self, classes: Iterable[int]) -> "ImageDataset":
        """Order-preserving view restricted to the given class ids."""
        mask = np.isin(self.labels, list(classes))
        return self.subset(np.flatnonzero(mask))

    def flattened(self) -> FloatArray:
        return self.images.reshape(len(self.images), -1)


@dataclass(frozen=True)
class LoadedDataset:
    name: str
    train: ImageDataset
    test: ImageDataset
    val: ImageDataset | None = None

    @property
    def num_classes(self) -> int:
        return self.train.num_classes

    def with_validation(self, fraction: float, seed: int) -> "LoadedDataset":
        train, val = split_validation(self.train, fraction, seed)
        return replace(self, train=train, val=val)


@dataclass(frozen=True)
class TaskStream:
    """Ordered disjoint class increments over one dataset."""

    tasks: tuple[frozenset[int], ...]
    train: ImageDataset
    test: ImageDataset
    val: ImageDataset | None = None

    def __len__(self) -> int:
        return len(self.tasks)

    def task_classes(self, task: int) -> list[int]:
        return sorted(self.tasks[task])

    def seen_classes(self, task: int) -> list[int]:
        """Classes of tasks 0..task inclusive, ascending."""
        return sorted(set().union(*self.tasks[: task + 1]))

    def task_data(self, task: int, split: str = "train") -> ImageDataset:
        source = {"train": self.train, "test": self.test, "val": self.val}[split]
        if source is None:
            raise ValueError(f"Task stream has no '{split}' split")
        return source.with_classes(self.tasks[task])


_DATASET_DIRS: dict[str, tuple[str, ...]] = {
    "mnist": ("mnist", "MNIST"),
    "fashion-mnist": ("fashion-mnist", "fashion_mnist", "FashionMNIST"),
    "cifar10": ("cifar-10-batches-bin", "cifar10", "cifar-10"),
}

TASK_PROTOCOLS: dict[str, list[list[int]]] = {
    "split-mnist": [[0, 1], [2, 3], [4, 5], [6, 7], [8, 9]],
    "cifar-a10d5": [[0, 1, 2, 3, 4], [5, 6, 7, 8, 9]],
    "cifar-a5d1": [[0, 1], [2], [3], [4]],
}


def _read_file(path: Path) -> bytes:
    try:
        if path.suffix == ".gz":
            with gzip.open(path, "rb") as f:
                return f.read()
        return path.read_bytes()
    except FileNotFoundError as e:
        raise DatasetLoadError(path, 0, "file not found") from e
    except (OSError, EOFError) as e:
        raise DatasetLoadError(path, 0, f"unreadable file: {e}") from e


def _find_file(directory: Path, stem: str) -> Path:
    for candidate in (directory / stem, directory / f"{stem}.gz"):
        if candidate.exists():
            return candidate
    raise DatasetLoadError(directory / stem, 0, "file not found")


def _dataset_dir(name: str, root: Path) -> Path:
    if name not in _DATASET_DIRS:
        raise ValueError(
            f"Unknown dataset '{name}', expected one of {sorted(_DATASET_DIRS)}"
        )
    for subdir in _DATASET_DIRS[name]:
        if (root / subdir).is_dir():
            return root / subdir
    raise DatasetLoadError(
        root,
        0,
        f"no directory for dataset '{name}' (tried {', '.join(_DATASET_DIRS[name])})",
    )


def _normalize(pixels: npt.NDArray[np.uint8]) -> FloatArray:
    return pixels.astype(np.float32) / np.float32(255.0)


def parse_idx_images(path: Path, data: bytes) -> FloatArray:
    # Big endian: magic, count, rows, cols, then row-major u8 pixels.
    if len(data) < 16:
        raise DatasetLoadError(path, len(data), "truncated IDX image header")
    magic, count, rows, cols = struct.unpack(">IIII", data[:16])
    if magic != IDX_IMAGE_MAGIC:
        raise DatasetLoadError(path, 0, f"bad IDX image magic 0x{magic:08x}")
    expected = 16 + count * rows * cols
    if len(data) < expected:
        raise DatasetLoadError(
            path, len(data), f"truncated file, expected {expected} bytes"
        )
    pixels = np.frombuffer(data, dtype=np.uint8, count=count * rows * cols, offset=16)
    return _normalize(pixels.reshape(count, 1, rows, cols))


def parse_idx_labels(path: Path, data: bytes, num_classes: int = NUM_CLASSES) -> IntArray:
    # Big endian: magic, count, then u8 labels.
    if len(data) < 8:
        raise DatasetLoadError(path, len(data), "truncated IDX label header")
    magic, count = struct.unpack(">II", data[:8])
    if magic != IDX_LABEL_MAGIC:
        raise DatasetLoadError(path, 0, f"bad IDX label magic 0x{magic:08x}")
    if len(data) < 8 + count:
        raise DatasetLoadError(
            path, len(data), f"truncated file, expected {8 + count} bytes"
        )
    labels = np.frombuffer(data, dtype=np.uint8, count=count, offset=8)
    bad = np.flatnonzero(labels >= num_classes)
    if len(bad):
        raise DatasetLoadError(
            path, 8 + int(bad[0]), f"label {labels[bad[0]]} out of range"
        )
    return labels.astype(np.int64)


def parse_cifar_batch(path: Path, data: bytes) -> tuple[FloatArray, IntArray]:
    """Parse a CIFAR-10 binary batch: 1 label byte + 3072 pixel bytes per record."""
    remainder = len(data) % CIFAR_RECORD_BYTES
    if remainder or not data:
        raise DatasetLoadError(
            path, len(data) - remainder, "truncated CIFAR-10 record"
        )
    records = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0]
    bad = np.flatnonzero(labels >= NUM_CLASSES)
    if len(bad):
        raise DatasetLoadError(
            path, int(bad[0]) * CIFAR_RECORD_BYTES, f"label {labels[bad[0]]} out of range"
        )
    images = _normalize(records[:, 1:].reshape(-1, 3, 32, 32))
    return images, labels.astype(np.int64)


def _load_idx_split(directory: Path, prefix: str, name: str, split: str) -> ImageDataset:
    image_path = _find_file(directory, f"{prefix}-images-idx3-ubyte")
    label_path = _find_file(directory, f"{prefix}-labels-idx1-ubyte")
    images = parse_idx_images(image_path, _read_file(image_path))
    labels = parse_idx_labels(label_path, _read_file(label_path))
    if len(images) != len(labels):
        raise DatasetLoadError(
            label_path, 4, f"{len(labels)} labels for {len(images)} images"
        )
    return ImageDataset(images=images, labels=labels, split_tag=split, name=name)


def _load_cifar_split(directory: Path, files: Sequence[str], split: str) -> ImageDataset:
    parts = []
    for file_name in files:
        path = directory / file_name
        parts.append(parse_cifar_batch(path, _read_file(path)))
    return ImageDataset(
        images=np.concatenate([p[0] for p in parts]),
        labels=np.concatenate([p[1] for p in parts]),
        split_tag=split,
        name="cifar10",
    )


def load_dataset(name: str, root: Path) -> LoadedDataset:
    """Load MNIST, FashionMNIST (IDX) or CIFAR-10 (binary batches) from disk."""
    directory = _dataset_dir(name, root)
    logger.info(f"Loading dataset {name} from {directory}")

    if name == "cifar10":
        train = _load_cifar_split(
            directory, [f"data_batch_{i}.bin" for i in range(1, 6)], "train"
        )
        test = _load_cifar_split(directory, ["test_batch.bin"], "test")
    else:
        train = _load_idx_split(directory, "train", name, "train")
        test = _load_idx_split(directory, "t10k", name, "test")

    missing = sorted(set(range(NUM_CLASSES)) - set(train.classes))
    if missing:
        raise DatasetLoadError(directory, 0, f"classes {missing} absent from train split")

    logger.info(
        f"Loaded {name}: {len(train)} train / {len(test)} test samples "
        f"of shape {train.sample_shape}"
    )
    return LoadedDataset(name=name, train=train, test=test)


def split_validation(
    ds: ImageDataset, fraction: float, seed: int
) -> tuple[ImageDataset, ImageDataset]:
    """Stratified per-class hold-out split, deterministic given the seed."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"Validation fraction must lie in (0, 1), got {fraction}")

    rng = np.random.default_rng(seed)
    val_parts = []
    for cls in ds.classes:
        idx = np.flatnonzero(ds.labels == cls)
        if len(idx) < 2:
            raise ValueError(f"Class {cls} has fewer than 2 samples, cannot split")
        n_val = min(max(round(fraction * len(idx)), 1), len(idx) - 1)
        val_parts.append(rng.permutation(idx)[:n_val])

    val_idx = np.sort(np.concatenate(val_parts))
    train_mask = np.ones(len(ds), dtype=bool)
    train_mask[val_idx] = False
    logger.debug(f"Split {len(ds)} samples into {train_mask.sum()} train / {len(val_idx)} val")
    return ds.subset(np.flatnonzero(train_mask), "train"), ds.subset(val_idx, "val")


def make_task_stream(ds: LoadedDataset, increments: Sequence[Iterable[int]]) -> TaskStream:
    tasks = tuple(frozenset(int(c) for c in inc) for inc in increments)
    known = set(range(ds.num_classes))
    seen: set[int] = set()
    for i, task in enumerate(tasks):
        if not task:
            raise ValueError(f"Increment {i} is empty")
        if task - known:
            raise ValueError(f"Increment {i} has unknown class ids {sorted(task - known)}")
        if task & seen:
            raise ValueError(f"Increment {i} overlaps earlier increments on {sorted(task & seen)}")
        seen |= task
    return TaskStream(tasks=tasks, train=ds.train, test=ds.test, val=ds.val)


def parse_increments(text: str) -> list[list[int]]:
    """Parse "0,1;2,3", range syntax "0-4;5-9", or a named protocol."""
    if text in TASK_PROTOCOLS:
        return [list(task) for task in TASK_PROTOCOLS[text]]

    increments = []
    for group in text.split(";"):
        classes: list[int] = []
        for item in filter(None, (part.strip() for part in group.split(","))):
            if "-" in item:
                low, high = item.split("-", 1)
                classes.extend(range(int(low), int(high) + 1))
            else:
                classes.append(int(item))
        increments.append(classes)
    return increments
