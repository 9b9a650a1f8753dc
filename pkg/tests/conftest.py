"""
Helper module that is shared by all tests and read by pytest.

More information:

    https://docs.pytest.org/en/6.2.x/fixture.html#scope-sharing-fixtures-across-classes-modules-packages-or-session
"""
import numpy as np
import pytest

from transfer_attack_tools.utils.data import MNIST_FILES, MNIST_IMAGE_MAGIC, MNIST_LABEL_MAGIC, Dataset, idx_bytes
from transfer_attack_tools.utils.model_zoo import build_model, save_weights, weight_path


@pytest.fixture
def synthetic_dataset():
    def _synthetic_dataset_factory(
        count: int = 20, shape=(3, 8, 8), num_classes: int = 10, seed: int = 0, split: str = "test"
    ):
        rng = np.random.Generator(np.random.Philox(seed))
        images = rng.random((count,) + tuple(shape)).astype(np.float32)
        labels = np.arange(count, dtype=np.int64) % num_classes
        return Dataset(images, labels, num_classes, split)

    return _synthetic_dataset_factory


@pytest.fixture
def tiny_model():
    def _tiny_model_factory(arch_id: str = "mini_vgg", seed: int = 0, num_classes: int = 10, in_channels: int = 3):
        return build_model(arch_id, num_classes=num_classes, seed=seed, in_channels=in_channels)

    return _tiny_model_factory


@pytest.fixture
def numeric_gradient():
    """
    Central finite differences of a scalar function of one array.
    """

    def _numeric_gradient(func, array: np.ndarray, step: float = 1e-5, coordinates=None):
        array = np.array(array, dtype=np.float64)
        grad = np.zeros_like(array)
        flat_coordinates = range(array.size) if coordinates is None else coordinates
        for flat in flat_coordinates:
            index = np.unravel_index(flat, array.shape)
            original = array[index]
            array[index] = original + step
            upper = func(array)
            array[index] = original - step
            lower = func(array)
            array[index] = original
            grad[index] = (upper - lower) / (2 * step)
        return grad

    return _numeric_gradient


@pytest.fixture
def mnist_zoo(tmp_path):
    """
    A workspace with tiny MNIST files whose test labels are all ``label`` and a zoo of untrained models whose
    classifier bias makes them predict ``label`` on every image.
    """

    def _mnist_zoo_factory(archs=("mini_vgg", "mini_res", "mini_dense"), seeds=(0,), label: int = 3, count: int = 8):
        data_dir, model_dir = tmp_path / "mnist", tmp_path / "models"
        data_dir.mkdir(exist_ok=True)
        model_dir.mkdir(exist_ok=True)
        rng = np.random.Generator(np.random.Philox(0))
        images = rng.integers(0, 256, size=(count, 28, 28), dtype=np.uint8)
        labels = np.full(count, label, dtype=np.uint8)
        for split in ("train", "test"):
            image_name, label_name = MNIST_FILES[split]
            (data_dir / image_name).write_bytes(idx_bytes(images, MNIST_IMAGE_MAGIC))
            (data_dir / label_name).write_bytes(idx_bytes(labels, MNIST_LABEL_MAGIC))
        for arch_id in archs:
            for seed in seeds:
                model = build_model(arch_id, seed=seed, in_channels=1)
                model.weights["fc.bias"].data[label] = 10.0
                save_weights(model, weight_path(str(model_dir), arch_id, seed))
        return {
            "dataset": "mnist",
            "data_dir": str(data_dir),
            "model_dir": str(model_dir),
            "out_dir": str(tmp_path / "results"),
            "archs": list(archs),
        }

    return _mnist_zoo_factory
