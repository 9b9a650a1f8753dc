import gzip

import numpy as np
import pytest

from transfer_attack_tools.utils import data
from transfer_attack_tools.utils.errors import FormatError, UsageError


def _write_mnist(directory, count: int = 6, compress: bool = False):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(count, 28, 28), dtype=np.uint8)
    labels = (np.arange(count) % 10).astype(np.uint8)
    for split in ("train", "test"):
        image_name, label_name = data.MNIST_FILES[split]
        for name, raw in (
            (image_name, data.idx_bytes(images, data.MNIST_IMAGE_MAGIC)),
            (label_name, data.idx_bytes(labels, data.MNIST_LABEL_MAGIC)),
        ):
            if compress:
                with gzip.open(directory / f"{name}.gz", "wb") as gz_fp:
                    gz_fp.write(raw)
            else:
                (directory / name).write_bytes(raw)
    return images, labels


def test_parse_cifar10_batch_decodes_planes():
    # Arrange
    rng = np.random.default_rng(1)
    pixels = rng.integers(0, 256, size=(3, 3, 32, 32)).astype(np.float32) / 255
    labels = np.array([7, 0, 9])
    raw = data.cifar10_bytes(pixels, labels)

    # Act
    images, decoded_labels = data.parse_cifar10_batch(raw, "batch.bin", expected=None)

    # Assert
    assert len(raw) == 3 * data.CIFAR10_RECORD
    assert images.shape == (3, 3, 32, 32)
    assert images.dtype == np.float32
    np.testing.assert_array_equal(decoded_labels, labels)
    np.testing.assert_allclose(images, pixels, atol=1e-6)


def test_parse_cifar10_batch_red_plane_comes_first():
    # Arrange
    record = bytearray(data.CIFAR10_RECORD)
    record[0] = 4
    record[1] = 255

    # Act
    images, labels = data.parse_cifar10_batch(bytes(record), "batch.bin", expected=None)

    # Assert
    assert labels[0] == 4
    assert images[0, 0, 0, 0] == 1.0
    assert images[0, 1:].sum() == 0.0


def test_parse_cifar10_batch_truncated():
    # Arrange
    raw = bytes(data.CIFAR10_RECORD * 2 - 1)

    # Act & Assert
    with pytest.raises(FormatError):
        data.parse_cifar10_batch(raw, "batch.bin", expected=None)


def test_parse_cifar10_batch_wrong_record_count():
    # Arrange
    raw = bytes(data.CIFAR10_RECORD * 2)

    # Act & Assert
    with pytest.raises(FormatError):
        data.parse_cifar10_batch(raw, "batch.bin")


def test_load_cifar10_missing_directory(tmp_path):
    # Arrange
    # Act & Assert
    with pytest.raises(FileNotFoundError):
        data.load_cifar10(str(tmp_path / "absent"))


@pytest.mark.parametrize("compress", [False, True])
def test_load_mnist(tmp_path, compress):
    # Arrange
    images, labels = _write_mnist(tmp_path, compress=compress)

    # Act
    train_set, test_set = data.load_mnist(str(tmp_path))

    # Assert
    assert len(train_set) == len(test_set) == 6
    assert test_set.image_shape == (1, 28, 28)
    assert test_set.split == "test"
    np.testing.assert_array_equal(test_set.labels, labels)
    np.testing.assert_allclose(test_set.images[:, 0] * 255, images, atol=1e-3)


def test_load_mnist_bad_magic(tmp_path):
    # Arrange
    _write_mnist(tmp_path)
    image_name = data.MNIST_FILES["train"][0]
    raw = bytearray((tmp_path / image_name).read_bytes())
    raw[3] = 0x01
    (tmp_path / image_name).write_bytes(bytes(raw))

    # Act & Assert
    with pytest.raises(FormatError) as error:
        data.load_mnist(str(tmp_path))
    assert "magic" in str(error.value)


def test_load_mnist_truncated(tmp_path):
    # Arrange
    _write_mnist(tmp_path)
    label_name = data.MNIST_FILES["test"][1]
    raw = (tmp_path / label_name).read_bytes()
    (tmp_path / label_name).write_bytes(raw[:-1])

    # Act & Assert
    with pytest.raises(FormatError):
        data.load_mnist(str(tmp_path))


def test_load_dataset_unknown_name(tmp_path):
    # Arrange
    # Act & Assert
    with pytest.raises(UsageError):
        data.load_dataset("imagenet", str(tmp_path))


def test_dataset_rejects_out_of_range_labels():
    # Arrange
    images = np.zeros((2, 1, 4, 4), dtype=np.float32)

    # Act & Assert
    with pytest.raises(FormatError):
        data.Dataset(images, np.array([0, 10]), 10, "test")


def test_dataset_is_read_only(synthetic_dataset):
    # Arrange
    dataset = synthetic_dataset(count=4)

    # Act & Assert
    with pytest.raises(ValueError):
        dataset.images[0, 0, 0, 0] = 1.0


def test_dataset_subset_and_head(synthetic_dataset):
    # Arrange
    dataset = synthetic_dataset(count=10)

    # Act
    subset = dataset.subset([7, 2])
    head = dataset.head(50)

    # Assert
    np.testing.assert_array_equal(subset.labels, [7, 2])
    np.testing.assert_array_equal(subset.images[0], dataset.images[7])
    assert len(head) == 10


def test_batch_iter_sizes(synthetic_dataset):
    # Arrange
    dataset = synthetic_dataset(count=10)

    # Act
    batches = list(data.batch_iter(dataset, 3))

    # Assert
    assert [len(labels) for _, labels in batches] == [3, 3, 3, 1]
    np.testing.assert_array_equal(np.concatenate([labels for _, labels in batches]), dataset.labels)


def test_batch_iter_shuffle_covers_everything_once(synthetic_dataset):
    # Arrange
    dataset = synthetic_dataset(count=10, num_classes=10)

    # Act
    first = np.concatenate([labels for _, labels in data.batch_iter(dataset, 4, seed=3, shuffle=True)])
    second = np.concatenate([labels for _, labels in data.batch_iter(dataset, 4, seed=3, shuffle=True)])

    # Assert
    np.testing.assert_array_equal(np.sort(first), np.arange(10))
    np.testing.assert_array_equal(first, second)


def test_batch_iter_rejects_zero_batch(synthetic_dataset):
    # Arrange
    dataset = synthetic_dataset(count=2)

    # Act & Assert
    with pytest.raises(UsageError):
        list(data.batch_iter(dataset, 0))
