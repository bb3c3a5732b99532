from pathlib import Path

import numpy as np
import pytest
from conftest import make_blobs, write_idx_images, write_idx_labels

from deep_prior_nas.datasets import (
    CIFAR_RECORD_BYTES,
    LoadedDataset,
    load_dataset,
    make_task_stream,
    parse_cifar_batch,
    parse_idx_images,
    parse_idx_labels,
    parse_increments,
    split_validation,
)
from deep_prior_nas.errors import DatasetLoadError


def _write_mnist(root: Path, subdir: str = "mnist", compress: bool = False) -> None:
    directory = root / subdir
    directory.mkdir(parents=True)
    labels = np.arange(20, dtype=np.uint8) % 10
    pixels = np.arange(20 * 4 * 4, dtype=np.uint8).reshape(20, 4, 4)
    suffix = ".gz" if compress else ""
    for prefix in ("train", "t10k"):
        write_idx_images(directory / f"{prefix}-images-idx3-ubyte{suffix}", pixels, compress)
        write_idx_labels(directory / f"{prefix}-labels-idx1-ubyte{suffix}", labels, compress)


def _cifar_records(labels: list[int]) -> bytes:
    records = np.zeros((len(labels), CIFAR_RECORD_BYTES), dtype=np.uint8)
    records[:, 0] = labels
    records[:, 1:] = 255
    return records.tobytes()


@pytest.mark.parametrize("compress", [False, True])
def test_load_dataset_idx(tmp_path: Path, compress: bool) -> None:
    """Test loading an IDX dataset, plain and gzip-compressed."""
    _write_mnist(tmp_path, compress=compress)

    data = load_dataset("mnist", tmp_path)

    assert data.name == "mnist"
    assert len(data.train) == 20
    assert len(data.test) == 20
    assert data.train.sample_shape == (1, 4, 4)
    assert data.train.images.dtype == np.float32
    assert data.train.images[0, 0, 0, 0] == 0.0
    assert data.train.images[0, 0, 0, 1] == pytest.approx(1 / 255)
    assert data.train.labels.tolist() == [i % 10 for i in range(20)]
    assert data.train.split_tag == "train"
    assert data.test.split_tag == "test"


def test_load_dataset_alternate_directory_name(tmp_path: Path) -> None:
    """Test that FashionMNIST is found under its alternate directory names."""
    _write_mnist(tmp_path, subdir="FashionMNIST")

    data = load_dataset("fashion-mnist", tmp_path)

    assert data.name == "fashion-mnist"
    assert data.train.classes == list(range(10))


def test_load_dataset_cifar(tmp_path: Path) -> None:
    """Test loading CIFAR-10 binary batches."""
    directory = tmp_path / "cifar-10-batches-bin"
    directory.mkdir()
    for i in range(1, 6):
        (directory / f"data_batch_{i}.bin").write_bytes(_cifar_records(list(range(10))))
    (directory / "test_batch.bin").write_bytes(_cifar_records([3, 4]))

    data = load_dataset("cifar10", tmp_path)

    assert len(data.train) == 50
    assert data.train.sample_shape == (3, 32, 32)
    assert np.all(data.train.images == 1.0)
    assert data.test.labels.tolist() == [3, 4]


def test_load_dataset_unknown_name(tmp_path: Path) -> None:
    with pytest.raises(ValueError, match="Unknown dataset"):
        load_dataset("svhn", tmp_path)


def test_load_dataset_missing_directory(tmp_path: Path) -> None:
    """Test that a missing dataset directory is a dataset load error."""
    with pytest.raises(DatasetLoadError, match="no directory for dataset 'mnist'"):
        load_dataset("mnist", tmp_path)


def test_load_dataset_missing_file(tmp_path: Path) -> None:
    """Test that a missing split file is reported with its path."""
    _write_mnist(tmp_path)
    (tmp_path / "mnist" / "t10k-labels-idx1-ubyte").unlink()

    with pytest.raises(DatasetLoadError, match="t10k-labels-idx1-ubyte: file not found") as exc:
        load_dataset("mnist", tmp_path)

    assert exc.value.exit_code == 3


def test_load_dataset_corrupt_gzip(tmp_path: Path) -> None:
    """Test that a gzip file with a broken stream is a dataset load error."""
    _write_mnist(tmp_path, compress=True)
    (tmp_path / "mnist" / "train-images-idx3-ubyte.gz").write_bytes(b"not gzip at all")

    with pytest.raises(DatasetLoadError, match="unreadable file"):
        load_dataset("mnist", tmp_path)


def test_load_dataset_missing_cifar_batch(tmp_path: Path) -> None:
    directory = tmp_path / "cifar-10-batches-bin"
    directory.mkdir()
    (directory / "data_batch_1.bin").write_bytes(_cifar_records(list(range(10))))

    with pytest.raises(DatasetLoadError, match="data_batch_2.bin: file not found"):
        load_dataset("cifar10", tmp_path)


def test_load_dataset_missing_classes(tmp_path: Path) -> None:
    """Test that a train split lacking some classes is rejected."""
    directory = tmp_path / "mnist"
    directory.mkdir()
    pixels = np.zeros((4, 2, 2), dtype=np.uint8)
    labels = np.array([0, 1, 0, 1], dtype=np.uint8)
    for prefix in ("train", "t10k"):
        write_idx_images(directory / f"{prefix}-images-idx3-ubyte", pixels)
        write_idx_labels(directory / f"{prefix}-labels-idx1-ubyte", labels)

    with pytest.raises(DatasetLoadError, match="absent from train split"):
        load_dataset("mnist", tmp_path)


def test_parse_idx_images_bad_magic() -> None:
    """Test that a wrong magic number is reported at offset 0."""
    data = (0x00000801).to_bytes(4, "big") + bytes(12)

    with pytest.raises(DatasetLoadError) as exc_info:
        parse_idx_images(Path("images"), data)

    assert exc_info.value.offset == 0
    assert "bad IDX image magic" in str(exc_info.value)
    assert exc_info.value.exit_code == 3


def test_parse_idx_images_truncated() -> None:
    """Test that a truncated pixel block reports the offset where data ran out."""
    header = b"".join(n.to_bytes(4, "big") for n in (0x00000803, 2, 3, 3))
    data = header + bytes(10)

    with pytest.raises(DatasetLoadError, match="truncated file") as exc_info:
        parse_idx_images(Path("images"), data)

    assert exc_info.value.offset == 26


def test_parse_idx_labels_out_of_range() -> None:
    """Test that an out-of-range label is reported at its byte offset."""
    data = (0x00000801).to_bytes(4, "big") + (3).to_bytes(4, "big") + bytes([1, 12, 2])

    with pytest.raises(DatasetLoadError, match="label 12 out of range") as exc_info:
        parse_idx_labels(Path("labels"), data)

    assert exc_info.value.offset == 9


def test_parse_cifar_batch_truncated() -> None:
    """Test that a partial CIFAR record is reported at the end of the last whole record."""
    data = _cifar_records([1, 2]) + bytes(100)

    with pytest.raises(DatasetLoadError, match="truncated CIFAR-10 record") as exc_info:
        parse_cifar_batch(Path("batch"), data)

    assert exc_info.value.offset == 2 * CIFAR_RECORD_BYTES


def test_split_validation_is_stratified_and_deterministic() -> None:
    """Test that the hold-out split keeps every class and depends only on the seed."""
    ds = make_blobs(20, list(range(10)))

    train, val = split_validation(ds, 0.1, seed=5)
    train_again, val_again = split_validation(ds, 0.1, seed=5)

    assert len(train) == 180
    assert len(val) == 20
    assert val.classes == list(range(10))
    assert np.bincount(val.labels).tolist() == [2] * 10
    assert val.split_tag == "val"
    np.testing.assert_array_equal(val.images, val_again.images)
    np.testing.assert_array_equal(train.labels, train_again.labels)


@pytest.mark.parametrize("fraction", [0.0, 1.0, -0.5])
def test_split_validation_invalid_fraction(fraction: float) -> None:
    with pytest.raises(ValueError, match="Validation fraction"):
        split_validation(make_blobs(4, [0, 1]), fraction, seed=0)


def test_with_classes_preserves_order() -> None:
    """Test that class filtering keeps the original sample order."""
    ds = make_blobs(3, [0, 1, 2])
    mixed = ds.subset([0, 3, 6, 1, 4, 7])

    filtered = mixed.with_classes([2, 0])

    assert filtered.labels.tolist() == [0, 2, 0, 2]


@pytest.mark.parametrize(
    "text,expected",
    [
        ("0,1;2,3", [[0, 1], [2, 3]]),
        ("0-4;5-9", [[0, 1, 2, 3, 4], [5, 6, 7, 8, 9]]),
        ("cifar-a5d1", [[0, 1], [2], [3], [4]]),
        ("0, 1 ;2", [[0, 1], [2]]),
    ],
)
def test_parse_increments(text: str, expected: list[list[int]]) -> None:
    """Test increment parsing for lists, ranges and named protocols."""
    assert parse_increments(text) == expected


def test_make_task_stream(blob_data: LoadedDataset) -> None:
    """Test task classes, seen classes and per-task data of a stream."""
    stream = make_task_stream(blob_data, [[1, 0], [2, 3]])

    assert len(stream) == 2
    assert stream.task_classes(0) == [0, 1]
    assert stream.seen_classes(1) == [0, 1, 2, 3]
    assert stream.task_data(1).classes == [2, 3]
    assert stream.task_data(0, "test").split_tag == "test"
    with pytest.raises(ValueError, match="no 'val' split"):
        stream.task_data(0, "val")


@pytest.mark.parametrize(
    "increments,message",
    [
        ([[0, 1], []], "Increment 1 is empty"),
        ([[0, 1], [1, 2]], "overlaps earlier increments on \\[1\\]"),
        ([[0, 11]], "unknown class ids \\[11\\]"),
    ],
)
def test_make_task_stream_rejects_invalid(
    blob_data: LoadedDataset, increments: list[list[int]], message: str
) -> None:
    """Test that empty, overlapping and unknown increments are rejected."""
    with pytest.raises(ValueError, match=message):
        make_task_stream(blob_data, increments)
