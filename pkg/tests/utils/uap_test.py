import os

import numpy as np
import pytest

from transfer_attack_tools.utils import uap
from transfer_attack_tools.utils.attack_engine import AttackConfig
from transfer_attack_tools.utils.data import Dataset
from transfer_attack_tools.utils.errors import FormatError, ShapeError, UsageError
from transfer_attack_tools.utils.evaluation import EvaluationConfig
from transfer_attack_tools.utils.losses import LossSpec


def _uap_config(**changes) -> AttackConfig:
    settings = dict(loss=LossSpec("logit"), iterations=4, epsilon=8 / 255, di_resize_band=(6, 8), ti_kernel=3)
    settings.update(changes)
    return AttackConfig(**settings)


def test_generate_uap_stays_in_the_ball(tiny_model):
    # Arrange
    model = tiny_model("mini_res")

    # Act
    artifact = uap.generate_uap([model], 3, _uap_config(), (3, 8, 8))

    # Assert
    assert artifact.perturbation.shape == (3, 8, 8)
    assert np.abs(artifact.perturbation).max() <= 8 / 255 + 1e-6
    assert np.abs(artifact.perturbation).max() > 0
    assert artifact.target == 3
    assert artifact.source == "mini_res"


def test_generate_uap_is_reproducible(tiny_model):
    # Arrange
    models = [tiny_model("mini_vgg"), tiny_model("mini_dense")]

    # Act
    first = uap.generate_uap(models, 1, _uap_config(loss=LossSpec("po_trip")), (3, 8, 8))
    second = uap.generate_uap(models, 1, _uap_config(loss=LossSpec("po_trip")), (3, 8, 8))

    # Assert
    assert first.source == "mini_vgg+mini_dense"
    np.testing.assert_array_equal(first.perturbation, second.perturbation)


def test_generate_uap_without_iterations(tiny_model):
    # Arrange
    model = tiny_model("mini_vgg")

    # Act
    zero = uap.generate_uap([model], 2, _uap_config(iterations=0), (3, 8, 8))
    noisy = uap.generate_uap([model], 2, _uap_config(iterations=0, init="gaussian", init_sigma=0.5), (3, 8, 8))

    # Assert
    assert not zero.perturbation.any()
    assert noisy.perturbation.any()
    assert np.abs(noisy.perturbation).max() <= 8 / 255 + 1e-6


@pytest.mark.parametrize("changes", [{"norm": "l2"}, {"unbounded": True}, {"epsilon": 0.0}])
def test_generate_uap_needs_linf_ball(changes, tiny_model):
    # Arrange
    model = tiny_model("mini_vgg")

    # Act & Assert
    with pytest.raises(UsageError):
        uap.generate_uap([model], 2, _uap_config(**changes), (3, 8, 8))


def test_apply_uap_clips():
    # Arrange
    artifact = uap.UapArtifact(np.full((1, 2, 2), 0.25, dtype=np.float32), 0, "mini_vgg", 0.25)
    images = np.array([[[[0.9, 0.1], [0.5, 0.0]]]], dtype=np.float32)

    # Act
    result = uap.apply_uap(artifact, images)

    # Assert
    np.testing.assert_allclose(result, [[[[1.0, 0.35], [0.75, 0.25]]]])


def test_apply_uap_shape_mismatch():
    # Arrange
    artifact = uap.UapArtifact(np.zeros((3, 4, 4), dtype=np.float32), 0, "mini_vgg", 0.1)

    # Act & Assert
    with pytest.raises(ShapeError):
        uap.apply_uap(artifact, np.zeros((2, 3, 8, 8)))


def test_evaluate_zero_uap_is_the_prior(tiny_model, synthetic_dataset):
    # Arrange
    model = tiny_model("mini_vgg")
    model.weights["fc.weight"].data[:] = 0.0
    model.weights["fc.bias"].data[4] = 1.0
    artifact = uap.UapArtifact(np.zeros((3, 8, 8), dtype=np.float32), 4, "mini_vgg", 0.0)
    dataset = synthetic_dataset(count=20)

    # Act
    hit = uap.evaluate_uap(artifact, model, dataset)
    miss = uap.evaluate_uap(artifact, model, dataset, target=5, jobs=2)

    # Assert
    assert hit == 1.0
    assert miss == 0.0


def test_save_and_load_uap(tmp_path):
    # Arrange
    perturbation = np.random.default_rng(0).uniform(-0.05, 0.05, size=(3, 8, 8)).astype(np.float32)
    artifact = uap.UapArtifact(perturbation, 7, "mini_incep", 16 / 255)
    path = str(tmp_path / "uap_mini_incep_logit_t7.uap")

    # Act
    uap.save_uap(artifact, path)
    loaded = uap.load_uap(path)

    # Assert
    np.testing.assert_array_equal(loaded.perturbation, perturbation)
    assert loaded.target == 7
    assert loaded.source == "mini_incep"
    assert loaded.epsilon == pytest.approx(16 / 255)
    assert loaded.config is None


def test_load_uap_bad_magic(tmp_path):
    # Arrange
    path = tmp_path / "broken.uap"
    path.write_bytes(b"UAP2" + bytes(16))

    # Act & Assert
    with pytest.raises(FormatError):
        uap.load_uap(str(path))


def test_load_uap_trailing_bytes(tmp_path):
    # Arrange
    path = tmp_path / "padded.uap"
    uap.save_uap(uap.UapArtifact(np.zeros((1, 2, 2), dtype=np.float32), 0, "mini_vgg", 0.1), str(path))
    path.write_bytes(path.read_bytes() + b"\x00")

    # Act & Assert
    with pytest.raises(FormatError):
        uap.load_uap(str(path))


def test_run_uap_suite(tiny_model, synthetic_dataset, tmp_path):
    # Arrange
    models = [tiny_model("mini_vgg"), tiny_model("mini_res")]
    dataset = synthetic_dataset(count=10)
    cfg = EvaluationConfig(n_images=6)

    # Act
    report = uap.run_uap_suite(
        models, dataset, [LossSpec("logit")], _uap_config(iterations=2), cfg, targets=[1, 2], out_dir=str(tmp_path)
    )

    # Assert
    assert [(row.source, row.target) for row in report] == [
        ("mini_vgg", "mini_vgg"),
        ("mini_vgg", "mini_res"),
        ("mini_res", "mini_vgg"),
        ("mini_res", "mini_res"),
    ]
    assert all(row.methods == "UAP-TMDI" and row.checkpoint == 2 and row.n_images == 6 for row in report)
    assert sorted(os.listdir(tmp_path)) == [
        "uap_mini_res_logit_t1.uap",
        "uap_mini_res_logit_t2.uap",
        "uap_mini_vgg_logit_t1.uap",
        "uap_mini_vgg_logit_t2.uap",
    ]


def test_run_uap_suite_evaluates_only_the_head(tiny_model, synthetic_dataset):
    # Arrange
    models = [tiny_model("mini_vgg")]
    dataset = synthetic_dataset(count=10)
    images = np.array(dataset.images)
    labels = np.array(dataset.labels)
    images[6:] = 1.0 - images[6:]
    labels[6:] = labels[6:][::-1]
    changed_tail = Dataset(images, labels, dataset.num_classes, dataset.split)
    cfg = EvaluationConfig(n_images=6)

    def _run(data):
        return uap.run_uap_suite(models, data, [LossSpec("logit")], _uap_config(iterations=2), cfg, targets=[1])

    # Act
    report, tail_report = _run(dataset), _run(changed_tail)

    # Assert
    assert list(report) == list(tail_report)
    assert all(row.n_images == 6 for row in report)
