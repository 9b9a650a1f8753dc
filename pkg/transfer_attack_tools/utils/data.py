"""
Ingestion of desk-scale image datasets.

Images are kept as one float32 array ``[N,C,H,W]`` with pixels in [0,1]. That is also the pixel domain the attacks
work in; per-channel standardization belongs to the model graphs.
"""

import gzip
import logging
import os
from typing import Iterator, Optional, Sequence, Tuple

import numpy as np

from transfer_attack_tools.utils.errors import FormatError, UsageError

logger = logging.getLogger(__name__)

CIFAR10_RECORD = 3073
CIFAR10_SHAPE = (3, 32, 32)
CIFAR10_PER_BATCH = 10000
CIFAR10_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR10_TEST_FILES = ["test_batch.bin"]

MNIST_IMAGE_MAGIC = 0x00000803
MNIST_LABEL_MAGIC = 0x00000801
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

DATASETS = ("cifar10", "mnist")


class Dataset:
    """
    Immutable collection of images in [0,1] and their labels.
    """

    def __init__(self, images: np.ndarray, labels: np.ndarray, num_classes: int, split: str):
        """
        :param images: ``[N,C,H,W]`` pixel values in [0,1].
        :param labels: ``[N]`` class indices.
        :param num_classes: Number of classes of the task.
        :param split: ``"train"`` or ``"test"``.
        """
        if images.ndim != 4 or images.shape[0] != labels.shape[0]:
            raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise FormatError(f"labels outside [0, {num_classes})")
        self.images = np.ascontiguousarray(images, dtype=np.float32)
        self.labels = np.ascontiguousarray(labels, dtype=np.int64)
        self.images.setflags(write=False)
        self.labels.setflags(write=False)
        self.num_classes = num_classes
        self.split = split

    def __len__(self) -> int:
        return self.labels.shape[0]

    def __getitem__(self, index: int) -> Tuple[np.ndarray, int]:
        return self.images[index], int(self.labels[index])

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])  # type: ignore

    def subset(self, indices: Sequence[int]) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices], self.num_classes, self.split)

    def head(self, count: int) -> "Dataset":
        return self.subset(np.arange(min(count, len(self))))


def _read_file(path: str) -> bytes:
    if not os.path.isfile(path):
        raise FileNotFoundError(f'Dataset file "{path}" does not exist.')
    if path.endswith(".gz"):
        with gzip.open(path, "rb") as gz_fp:
            return gz_fp.read()
    with open(path, "rb") as raw_fp:
        return raw_fp.read()


def parse_cifar10_batch(raw: bytes, name: str, expected: Optional[int] = CIFAR10_PER_BATCH) -> Tuple[np.ndarray, np.ndarray]:
    """
    Decodes CIFAR-10 binary records (1 label byte followed by the R, G and B planes of 1024 bytes each).

    :param raw: File content.
    :param name: File name for error messages.
    :param expected: Number of records the file must hold; ``None`` accepts any count.
    :return: ``([N,3,32,32] float32 images, [N] labels)``
    """
    if len(raw) % CIFAR10_RECORD != 0:
        raise FormatError(f'"{name}" is truncated: {len(raw)} bytes is not a multiple of {CIFAR10_RECORD}')
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR10_RECORD)
    if expected is not None and records.shape[0] != expected:
        raise FormatError(f'"{name}" holds {records.shape[0]} records, expected {expected}')
    labels = records[:, 0].astype(np.int64)
    images = records[:, 1:].reshape((-1,) + CIFAR10_SHAPE).astype(np.float32) / np.float32(255)
    return images, labels


def cifar10_bytes(images: np.ndarray, labels: np.ndarray) -> bytes:
    """
    Encodes images and labels in the CIFAR-10 record layout. Inverse of ``parse_cifar10_batch``.
    """
    pixels = np.rint(np.asarray(images, dtype=np.float64) * 255).astype(np.uint8).reshape(len(labels), -1)
    records = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], pixels], axis=1)
    return records.tobytes()


def load_cifar10(path: str) -> Tuple[Dataset, Dataset]:
    """
    Loads the binary version of CIFAR-10.

    :param path: Directory with ``data_batch_1.bin`` ... ``data_batch_5.bin`` and ``test_batch.bin``.
    :return: The train (50000 images) and test (10000 images) datasets.
    """
    splits = []
    for split, files in (("train", CIFAR10_TRAIN_FILES), ("test", CIFAR10_TEST_FILES)):
        parts = [parse_cifar10_batch(_read_file(os.path.join(path, name)), name) for name in files]
        images = np.concatenate([part[0] for part in parts])
        labels = np.concatenate([part[1] for part in parts])
        logger.debug("Loaded %d CIFAR-10 %s images from %s", len(labels), split, path)
        splits.append(Dataset(images, labels, 10, split))
    return splits[0], splits[1]


def _parse_idx(raw: bytes, name: str, magic: int) -> np.ndarray:
    if len(raw) < 8:
        raise FormatError(f'"{name}" is truncated')
    found = int.from_bytes(raw[:4], "big")
    if found != magic:
        raise FormatError(f'"{name}" has magic 0x{found:08x}, expected 0x{magic:08x}')
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    dims = tuple(int.from_bytes(raw[4 + 4 * i : 8 + 4 * i], "big") for i in range(ndim))
    if len(raw) != header + int(np.prod(dims)):
        raise FormatError(f'"{name}" size does not match its header dimensions {dims}')
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def idx_bytes(array: np.ndarray, magic: int) -> bytes:
    """
    Encodes a uint8 array in the IDX layout with the given magic number.
    """
    header = magic.to_bytes(4, "big") + b"".join(int(dim).to_bytes(4, "big") for dim in array.shape)
    return header + np.ascontiguousarray(array, dtype=np.uint8).tobytes()


def _mnist_path(path: str, name: str) -> str:
    plain = os.path.join(path, name)
    if not os.path.isfile(plain) and os.path.isfile(plain + ".gz"):
        return plain + ".gz"
    return plain


def load_mnist(path: str) -> Tuple[Dataset, Dataset]:
    """
    Loads MNIST from IDX files (plain or gzipped).

    :param path: Directory with the four canonical IDX files.
    :return: The train and test datasets with ``1x28x28`` images.
    """
    splits = []
    for split in ("train", "test"):
        image_name, label_name = MNIST_FILES[split]
        images = _parse_idx(_read_file(_mnist_path(path, image_name)), image_name, MNIST_IMAGE_MAGIC)
        labels = _parse_idx(_read_file(_mnist_path(path, label_name)), label_name, MNIST_LABEL_MAGIC)
        if images.shape[0] != labels.shape[0]:
            raise FormatError(f'"{image_name}" has {images.shape[0]} images but "{label_name}" {labels.shape[0]}')
        pixels = images[:, None, :, :].astype(np.float32) / np.float32(255)
        splits.append(Dataset(pixels, labels.astype(np.int64), 10, split))
    return splits[0], splits[1]


def load_dataset(name: str, path: str) -> Tuple[Dataset, Dataset]:
    """
    :param name: One of ``DATASETS``.
    :param path: Dataset directory.
    """
    if name == "cifar10":
        return load_cifar10(path)
    if name == "mnist":
        return load_mnist(path)
    raise UsageError(f"Unknown dataset {name!r}, valid: {', '.join(DATASETS)}")


def batch_iter(
    dataset: Dataset, batch_size: int, seed: int = 0, shuffle: bool = False
) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """
    Yields ``(images, labels)`` batches covering every example exactly once.

    :param dataset: The dataset to iterate.
    :param batch_size: Maximum batch size; the last batch may be smaller.
    :param seed: Seeds the shuffle order.
    :param shuffle: Keep the stored order if false.
    """
    if batch_size < 1:
        raise UsageError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(dataset))
    if shuffle:
        order = np.random.Generator(np.random.Philox(seed)).permutation(len(dataset))
    for start in range(0, len(order), batch_size):
        chosen = order[start : start + batch_size]
        yield dataset.images[chosen], dataset.labels[chosen]
