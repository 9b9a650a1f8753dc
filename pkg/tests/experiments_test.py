"""
Experiments on CIFAR-10 with the trained zoo. They take minutes and only run when both
``TRANSFER_ATTACK_TOOLS_CIFAR`` (dataset directory) and ``TRANSFER_ATTACK_TOOLS_MODELS`` (directory with the
``<arch>_s0.mzw`` files) are set:

    > pytest -m slow tests/experiments_test.py
"""

import os

import numpy as np
import pytest

from transfer_attack_tools.utils import evaluation, uap
from transfer_attack_tools.utils.attack_engine import AttackConfig
from transfer_attack_tools.utils.data import load_cifar10
from transfer_attack_tools.utils.evaluation import EvaluationConfig
from transfer_attack_tools.utils.losses import LOSS_KINDS, LossSpec
from transfer_attack_tools.utils.model_zoo import ARCHITECTURES, accuracy, load_zoo

CIFAR_DIR = os.environ.get("TRANSFER_ATTACK_TOOLS_CIFAR")
MODEL_DIR = os.environ.get("TRANSFER_ATTACK_TOOLS_MODELS")

pytestmark = [
    pytest.mark.slow,
    pytest.mark.skipif(not (CIFAR_DIR and MODEL_DIR), reason="CIFAR-10 and trained models are not configured"),
]


@pytest.fixture(scope="module")
def test_set():
    return load_cifar10(CIFAR_DIR)[1]


@pytest.fixture(scope="module")
def zoo():
    return load_zoo(MODEL_DIR, list(ARCHITECTURES), 0)


def test_zoo_is_trained(zoo, test_set):
    # Arrange
    gate_set = test_set.head(1000)

    # Act
    scores = [accuracy(model, gate_set) for model in zoo]

    # Assert
    assert min(scores) >= 0.6


def test_whitebox_attack_converges(zoo, test_set):
    # Arrange
    source = zoo[0]
    cfg = EvaluationConfig(n_images=200, jobs=os.cpu_count() or 1)
    sample = evaluation.select_evaluation_images([source], test_set, cfg)

    # Act
    result = evaluation.attack_sample([source], sample, AttackConfig(loss=LossSpec("logit")), cfg)

    # Assert
    assert evaluation.success_rate(source, result.final, sample.targets) >= 0.95
    trajectory = result.trajectory
    assert np.mean(trajectory.target_logit[-1] > trajectory.target_logit[0]) >= 0.95


def test_logit_beats_ce_in_transfer(zoo, test_set):
    # Arrange
    cfg = EvaluationConfig(n_images=200, jobs=os.cpu_count() or 1)
    losses = [LossSpec("ce"), LossSpec("logit")]

    # Act
    report = evaluation.run_single_transfer(zoo, test_set, AttackConfig(), cfg, losses)

    # Assert
    ce = np.mean([row.targeted_sr for row in report.select(loss="ce", checkpoint=300)])
    logit = np.mean([row.targeted_sr for row in report.select(loss="logit", checkpoint=300)])
    assert logit >= ce + 0.05


def test_ce_loss_vanishes_while_logit_keeps_rising(zoo, test_set):
    # Arrange
    cfg = EvaluationConfig(n_images=100, jobs=os.cpu_count() or 1)
    losses = [LossSpec(kind) for kind in LOSS_KINDS]

    # Act
    rows = evaluation.run_trend_analysis(zoo[1], test_set, losses, AttackConfig(), cfg)

    # Assert
    by_loss = {(row.loss, row.iteration): row for row in rows}
    assert by_loss[("ce", 300)].norm_loss < 0.1
    assert by_loss[("logit", 300)].target_logit > by_loss[("logit", 20)].target_logit


def test_transfer_needs_many_iterations(zoo, test_set):
    # Arrange
    cfg = EvaluationConfig(n_images=200, jobs=os.cpu_count() or 1)

    # Act
    report = evaluation.run_single_transfer(zoo, test_set, AttackConfig(), cfg)

    # Assert
    early = np.mean([row.targeted_sr for row in report.select(checkpoint=20)])
    late = np.mean([row.targeted_sr for row in report.select(checkpoint=300)])
    assert late >= early + 0.10


def test_ensemble_beats_single_sources(zoo, test_set):
    # Arrange
    cfg = EvaluationConfig(n_images=200, jobs=os.cpu_count() or 1)

    # Act
    single = evaluation.run_single_transfer(zoo, test_set, AttackConfig(), cfg)
    ensemble = evaluation.run_ensemble_transfer(zoo, test_set, AttackConfig(), cfg)

    # Assert
    for holdout in zoo:
        (row,) = ensemble.select(target=holdout.name, checkpoint=300)
        singles = [cell.targeted_sr for cell in single.select(target=holdout.name, checkpoint=300)]
        assert row.targeted_sr >= np.mean(singles)


def test_rank_sweep_is_monotonic(zoo, test_set):
    # Arrange
    cfg = EvaluationConfig(n_images=200, jobs=os.cpu_count() or 1)
    losses = [LossSpec("ce"), LossSpec("po_trip"), LossSpec("logit")]

    # Act
    report = evaluation.run_rank_sweep(zoo[1], zoo[0], test_set, [2, 5, 10], AttackConfig(), cfg, losses)

    # Assert
    for spec in losses:
        rates = [row.targeted_sr for row in report.select(loss=spec.label)]
        drops = [later - earlier for earlier, later in zip(rates, rates[1:])]
        assert sum(1 for drop in drops if drop > 0) <= 1
        assert max(drops) <= 0.02


def test_step_size_barely_matters(zoo, test_set):
    # Arrange
    cfg = EvaluationConfig(n_images=200, jobs=os.cpu_count() or 1)
    losses = [LossSpec("ce"), LossSpec("po_trip"), LossSpec("logit")]

    # Act
    _, spreads = evaluation.run_stepsize_sweep(
        zoo[1], zoo[0], test_set, [1 / 255, 2 / 255, 4 / 255], AttackConfig(), cfg, losses
    )

    # Assert
    assert all(row.spread <= 0.10 for row in spreads)


def test_logit_uap_beats_ce_uap(zoo, test_set):
    # Arrange
    cfg = EvaluationConfig(n_images=200, jobs=os.cpu_count() or 1)

    # Act
    report = uap.run_uap_suite(zoo, test_set, [LossSpec("ce"), LossSpec("logit")], AttackConfig(), cfg)

    # Assert
    wins = 0
    for model in zoo:
        (ce,) = report.select(source=model.name, target=model.name, loss="ce")
        (logit,) = report.select(source=model.name, target=model.name, loss="logit")
        wins += logit.targeted_sr > ce.targeted_sr
    assert wins >= 3
