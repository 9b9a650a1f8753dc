import csv
import os

import numpy as np
import pytest

from transfer_attack_tools import attack, config
from transfer_attack_tools.utils.errors import UsageError


@pytest.fixture
def attack_run(mnist_zoo):
    workspace = mnist_zoo()

    def _attack_run_factory(**changes):
        settings = dict(
            workspace,
            source="mini_vgg",
            targets=["mini_res", "mini_dense"],
            iterations=2,
            checkpoints=[1],
            n_images=3,
            chunk_size=2,
            gate_images=8,
        )
        settings.update(changes)
        return config.RunConfig.resolve(overrides=settings)

    return _attack_run_factory


def _read_csv(path):
    with open(path, encoding="UTF-8") as csv_fp:
        return list(csv.DictReader(csv_fp))


def test_attack_writes_all_outputs(attack_run):
    # Arrange
    run = attack_run()

    # Act
    report = attack.main(run)

    # Assert
    out_dir = run.out_dir
    rows = _read_csv(os.path.join(out_dir, "report.csv"))
    assert len(report) == len(rows) == 4
    assert {(row["target"], row["checkpoint"]) for row in rows} == {
        ("mini_res", "1"),
        ("mini_res", "2"),
        ("mini_dense", "1"),
        ("mini_dense", "2"),
    }
    assert rows[0]["epsilon"] == "16.000000"
    assert len(_read_csv(os.path.join(out_dir, "trajectory.csv"))) == 3 * 2
    samples = _read_csv(os.path.join(out_dir, "eval_images.csv"))
    assert [row["index"] for row in samples] == ["0", "1", "2"]
    assert all(row["original"] == "3" and row["target"] != "3" for row in samples)
    for checkpoint in (1, 2):
        images = np.load(os.path.join(out_dir, f"adv_ckpt{checkpoint}.npy"))
        assert images.shape == (3, 1, 28, 28)
    assert config.RunConfig.resolve(os.path.join(out_dir, "run.conf")).values == run.values


def test_attack_does_not_depend_on_jobs(attack_run, tmp_path):
    # Arrange
    serial_run = attack_run(out_dir=str(tmp_path / "serial"), chunk_size=1, jobs=1)
    parallel_run = attack_run(out_dir=str(tmp_path / "parallel"), chunk_size=1, jobs=4)

    # Act
    attack.main(serial_run)
    attack.main(parallel_run)

    # Assert
    for name in ("report.csv", "trajectory.csv", "eval_images.csv", "adv_ckpt1.npy", "adv_ckpt2.npy"):
        assert (tmp_path / "serial" / name).read_bytes() == (tmp_path / "parallel" / name).read_bytes()


def test_attack_zero_epsilon_leaves_images_unchanged(attack_run):
    # Arrange
    run = attack_run(epsilon=0.0, targets=["mini_res"])

    # Act
    report = attack.main(run)

    # Assert
    assert all(row.targeted_sr == 0.0 for row in report)
    assert all(row.nontargeted_sr == 0.0 for row in report)


def test_attack_missing_model(attack_run):
    # Arrange
    run = attack_run(targets=["mini_incep"])

    # Act & Assert
    with pytest.raises(UsageError) as error:
        attack.main(run)
    assert "train --arch mini_incep" in str(error.value)


def test_attack_refuses_untrained_models(attack_run):
    # Arrange
    run = attack_run(min_accuracy=0.6, gate_images=8)
    label_file = os.path.join(run.data_dir, "t10k-labels-idx1-ubyte")
    with open(label_file, "rb") as label_fp:
        raw = bytearray(label_fp.read())
    raw[8:] = bytes(range(len(raw) - 8))
    with open(label_file, "wb") as label_fp:
        label_fp.write(bytes(raw))

    # Act & Assert
    with pytest.raises(UsageError) as error:
        attack.main(run)
    assert "clean accuracy" in str(error.value)
