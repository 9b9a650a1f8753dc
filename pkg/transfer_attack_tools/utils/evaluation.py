"""
Experiment orchestration: transfer matrices, ensemble hold-out protocols, low-ranked target sweeps, step-size sweeps
and loss/gradient trend analysis. Results are plain row tuples written as CSV.

Attacks run in fixed chunks of evaluation images (``EvaluationConfig.chunk_size``) that may be spread over a thread
pool; chunks are aggregated by image index, so ``jobs`` never changes a result.
"""

import concurrent.futures
import csv
import dataclasses
import logging
from collections import namedtuple
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from transfer_attack_tools.utils.attack_engine import (
    AttackConfig,
    AttackResult,
    Trajectory,
    attack,
    target_confidence_and_rank,
)
from transfer_attack_tools.utils.data import Dataset
from transfer_attack_tools.utils.errors import NumericalDomainError, UsageError
from transfer_attack_tools.utils.losses import LossSpec
from transfer_attack_tools.utils.model_zoo import Model, accuracy, predict_logits

logger = logging.getLogger(__name__)

SCAN_BLOCK = 1000

TransferRow = namedtuple(
    "TransferRow",
    (
        "source",
        "target",
        "loss",
        "methods",
        "checkpoint",
        "epsilon",
        "alpha",
        "seed",
        "n_images",
        "targeted_sr",
        "nontargeted_sr",
        "mean_target_conf",
        "mean_target_rank",
    ),
)
TrendRow = namedtuple("TrendRow", "loss iteration norm_loss norm_grad_l1 target_logit")
SpreadRow = namedtuple("SpreadRow", "loss source target min_targeted_sr max_targeted_sr spread")


def _format(value) -> str:
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.6f}"
    return str(value)


def write_rows(path: str, fields: Sequence[str], rows) -> None:
    """
    Writes namedtuple rows as CSV with a fixed float format, so equal results give equal bytes.
    """
    with open(path, "w", encoding="UTF-8", newline="") as csv_fp:
        writer = csv.writer(csv_fp, lineterminator="\n")
        writer.writerow(fields)
        for row in rows:
            writer.writerow([_format(value) for value in row])


class TransferReport:
    """
    Ordered collection of ``TransferRow``.
    """

    def __init__(self, rows: Optional[List[TransferRow]] = None):
        self.rows: List[TransferRow] = list(rows or [])

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def extend(self, other) -> None:
        self.rows.extend(other)

    def select(self, **criteria) -> List[TransferRow]:
        """
        :return: Rows whose fields equal every keyword given, e.g. ``select(loss="logit", checkpoint=300)``.
        """
        return [row for row in self.rows if all(getattr(row, key) == value for key, value in criteria.items())]

    def to_csv(self, path: str) -> None:
        write_rows(path, TransferRow._fields, self.rows)


@dataclass
class EvaluationConfig:
    """
    Sampling, gating and parallelism of an experiment.

    :ivar n_images: Evaluation images per experiment.
    :ivar seed: Seeds the default target assignment.
    :ivar jobs: Worker threads for attacks.
    :ivar chunk_size: Images attacked together; part of the result identity, unlike ``jobs``.
    :ivar min_accuracy: Clean accuracy a model needs before experiments use it.
    :ivar gate_images: Test images used for the accuracy gate.
    :ivar include_whitebox: Add source == target cells to single-model transfer.
    """

    n_images: int = 200
    seed: int = 0
    jobs: int = 1
    chunk_size: int = 25
    min_accuracy: float = 0.6
    gate_images: int = 1000
    include_whitebox: bool = False

    def validate(self) -> None:
        if self.n_images < 1 or self.jobs < 1 or self.chunk_size < 1:
            raise UsageError("n_images, jobs and chunk_size must be >= 1")
        if not 0 <= self.min_accuracy <= 1:
            raise UsageError(f"min_accuracy must lie in [0,1], got {self.min_accuracy}")


@dataclass
class EvaluationSample:
    """
    Evaluation images with their dataset indices, clean classes and assigned targets.
    """

    indices: np.ndarray
    images: np.ndarray
    originals: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return self.indices.shape[0]


def success_rate(target_model: Model, adv_images: np.ndarray, targets) -> float:
    """
    Fraction of ``adv_images`` that ``target_model`` classifies as their target.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if len(adv_images) == 0:
        raise UsageError("success rate of an empty image set is undefined")
    if len(adv_images) != targets.shape[0]:
        raise UsageError(f"{len(adv_images)} images but {targets.shape[0]} targets")
    predictions = predict_logits(target_model, adv_images).data.argmax(axis=1)
    return float(np.mean(predictions == targets))


def target_stats(target_model: Model, adv_image: np.ndarray, target: int) -> Tuple[float, int]:
    """
    :return: Softmax confidence of ``target`` and its rank (1 = predicted class).
    """
    image = np.asarray(adv_image, dtype=np.float32)
    logits = predict_logits(target_model, image[None] if image.ndim == 3 else image).data
    if not 0 <= target < logits.shape[1]:
        raise UsageError(f"target {target} outside [0, {logits.shape[1]})")
    confidence, rank = target_confidence_and_rank(logits[:1], np.array([target]))
    return float(confidence[0]), int(rank[0])


def select_target_by_rank(model: Model, image: np.ndarray, rank: int) -> int:
    """
    Class at position ``rank`` of the model's descending logits on the clean ``image``; ties go to the lower class.
    """
    if not 1 <= rank <= model.num_classes:
        raise UsageError(f"rank must lie in [1, {model.num_classes}], got {rank}")
    image = np.asarray(image, dtype=np.float32)
    logits = predict_logits(model, image[None] if image.ndim == 3 else image).data[0]
    order = np.argsort(-logits, kind="stable")
    return int(order[rank - 1])


def check_accuracy_gate(models: Sequence[Model], dataset: Dataset, cfg: EvaluationConfig) -> None:
    """
    Refuses models whose clean accuracy on the first ``cfg.gate_images`` test images is below ``cfg.min_accuracy``.
    """
    gate_set = dataset.head(cfg.gate_images)
    for model in models:
        score = accuracy(model, gate_set)
        logger.debug("%s clean accuracy %.4f on %d images", model.name, score, len(gate_set))
        if score < cfg.min_accuracy:
            raise UsageError(
                f"{model.name} reaches only {score:.3f} clean accuracy (< {cfg.min_accuracy}); "
                f"train it first with: transfer-attack-tools train --arch {model.arch_id}"
            )


def default_target(index: int, original: int, num_classes: int, seed: int) -> int:
    """
    Pseudorandom class != ``original``, a fixed function of ``(seed, index)``.
    """
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, int(index)])))
    return int((original + 1 + rng.integers(0, num_classes - 1)) % num_classes)


def select_evaluation_images(
    sources: Sequence[Model], dataset: Dataset, cfg: EvaluationConfig, rank: Optional[int] = None
) -> EvaluationSample:
    """
    First ``cfg.n_images`` images of ``dataset`` that every source classifies correctly.

    :param rank: Targets are the class at this rank on the first source; default is ``default_target``.
    """
    if rank is not None and not 2 <= rank <= sources[0].num_classes:
        raise UsageError(f"target rank must lie in [2, {sources[0].num_classes}], got {rank}")
    found: List[np.ndarray] = []
    first_logits: List[np.ndarray] = []
    for start in range(0, len(dataset), SCAN_BLOCK):
        block = slice(start, start + SCAN_BLOCK)
        logits = [predict_logits(source, dataset.images[block]).data for source in sources]
        correct = np.logical_and.reduce([scores.argmax(axis=1) == dataset.labels[block] for scores in logits])
        found.append(start + np.flatnonzero(correct))
        first_logits.append(logits[0][correct])
        if sum(part.size for part in found) >= cfg.n_images:
            break
    indices = np.concatenate(found)[: cfg.n_images]
    if indices.size == 0:
        raise UsageError("no test image is classified correctly by all source models")
    if indices.size < cfg.n_images:
        logger.warning("Only %d of %d requested evaluation images are available", indices.size, cfg.n_images)
    originals = dataset.labels[indices]
    if rank is None:
        targets = np.array(
            [default_target(i, o, dataset.num_classes, cfg.seed) for i, o in zip(indices, originals)], dtype=np.int64
        )
    else:
        order = np.argsort(-np.concatenate(first_logits)[: indices.size], axis=1, kind="stable")
        targets = order[:, rank - 1].astype(np.int64)
    return EvaluationSample(indices, dataset.images[indices], originals, targets)


def attack_sample(
    sources: Sequence[Model], sample: EvaluationSample, attack_cfg: AttackConfig, cfg: EvaluationConfig
) -> AttackResult:
    """
    Attacks every image of ``sample`` chunk by chunk and stitches the chunks together in index order.
    """
    starts = list(range(0, len(sample), cfg.chunk_size))

    def run_chunk(start: int) -> AttackResult:
        chunk = slice(start, start + cfg.chunk_size)
        return attack(
            sources,
            sample.images[chunk],
            sample.targets[chunk],
            sample.originals[chunk],
            attack_cfg,
            keys=sample.indices[chunk],
        )

    if cfg.jobs == 1:
        results = [run_chunk(start) for start in starts]
    else:
        with concurrent.futures.ThreadPoolExecutor(max_workers=cfg.jobs) as executor:
            # map keeps submission order
            results = list(executor.map(run_chunk, starts))

    snapshots = {
        checkpoint: np.concatenate([result.snapshots[checkpoint] for result in results])
        for checkpoint in attack_cfg.checkpoints
    }
    trajectory = Trajectory(attack_cfg.iterations, len(sample))
    for name in Trajectory.FIELDS:
        setattr(trajectory, name, np.concatenate([getattr(result.trajectory, name) for result in results], axis=1))
    return AttackResult(snapshots=snapshots, trajectory=trajectory, seed=attack_cfg.seed)


def evaluate_transfer(
    source_name: str,
    target_model: Model,
    sample: EvaluationSample,
    result: AttackResult,
    attack_cfg: AttackConfig,
    checkpoints: Optional[Sequence[int]] = None,
) -> List[TransferRow]:
    """
    One row per checkpoint for the adversarial images of ``result`` evaluated on ``target_model``.
    """
    rows = []
    for checkpoint in checkpoints or attack_cfg.checkpoints:
        logits = predict_logits(target_model, result.snapshots[checkpoint]).data
        predictions = logits.argmax(axis=1)
        confidence, rank = target_confidence_and_rank(logits, sample.targets)
        rows.append(
            TransferRow(
                source=source_name,
                target=target_model.name,
                loss=attack_cfg.loss.label,
                methods=attack_cfg.methods,
                checkpoint=checkpoint,
                epsilon=attack_cfg.epsilon * 255,
                alpha=attack_cfg.alpha * 255,
                seed=attack_cfg.seed,
                n_images=len(sample),
                targeted_sr=float(np.mean(predictions == sample.targets)),
                nontargeted_sr=float(np.mean(predictions != sample.originals)),
                mean_target_conf=float(np.mean(confidence)),
                mean_target_rank=float(np.mean(rank)),
            )
        )
    return rows


def _per_loss(attack_cfg: AttackConfig, losses: Optional[Sequence[LossSpec]]) -> List[AttackConfig]:
    return [dataclasses.replace(attack_cfg, loss=spec) for spec in (losses or [attack_cfg.loss])]


def run_single_transfer(
    models: Sequence[Model],
    dataset: Dataset,
    attack_cfg: AttackConfig,
    cfg: EvaluationConfig,
    losses: Optional[Sequence[LossSpec]] = None,
) -> TransferReport:
    """
    Every ordered (source, target != source) pair, attacked on the source and evaluated on the target at every
    checkpoint. ``cfg.include_whitebox`` adds the source == target cells.
    """
    cfg.validate()
    if len(models) < 2:
        raise UsageError("single-model transfer needs at least two models")
    check_accuracy_gate(models, dataset, cfg)
    report = TransferReport()
    for loss_cfg in _per_loss(attack_cfg, losses):
        for source in models:
            sample = select_evaluation_images([source], dataset, cfg)
            logger.info("Attacking %s with %s on %d images", source.name, loss_cfg.loss.label, len(sample))
            result = attack_sample([source], sample, loss_cfg, cfg)
            for target in models:
                if target is source and not cfg.include_whitebox:
                    continue
                report.extend(evaluate_transfer(source.name, target, sample, result, loss_cfg))
    return report


def run_source_transfer(
    source: Model,
    targets: Sequence[Model],
    dataset: Dataset,
    attack_cfg: AttackConfig,
    cfg: EvaluationConfig,
    losses: Optional[Sequence[LossSpec]] = None,
) -> TransferReport:
    """
    Transfer from one source to each of ``targets`` at every checkpoint, once per loss.
    """
    cfg.validate()
    check_accuracy_gate([source] + list(targets), dataset, cfg)
    sample = select_evaluation_images([source], dataset, cfg)
    report = TransferReport()
    for loss_cfg in _per_loss(attack_cfg, losses):
        logger.info("Attacking %s with %s on %d images", source.name, loss_cfg.loss.label, len(sample))
        result = attack_sample([source], sample, loss_cfg, cfg)
        for target in targets:
            report.extend(evaluate_transfer(source.name, target, sample, result, loss_cfg))
    return report


def run_ensemble_transfer(
    models: Sequence[Model],
    dataset: Dataset,
    attack_cfg: AttackConfig,
    cfg: EvaluationConfig,
    holdout_rule: str = "hard",
    siblings: Optional[Dict[str, Model]] = None,
    losses: Optional[Sequence[LossSpec]] = None,
) -> TransferReport:
    """
    Hold-out ensemble transfer: each model in turn is the target, the others form the source ensemble.

    :param holdout_rule: ``hard`` uses only the other architectures; ``easy`` adds a second-seed sibling of the
                         hold-out architecture to the ensemble.
    :param siblings: Sibling model by hold-out model name, required for ``easy``.
    """
    cfg.validate()
    if holdout_rule not in ("hard", "easy"):
        raise UsageError(f"Unknown hold-out rule {holdout_rule!r}, valid: easy, hard")
    if len(models) < 3:
        raise UsageError("ensemble transfer needs at least three models")
    siblings = siblings or {}
    if holdout_rule == "easy":
        missing = [model.name for model in models if model.name not in siblings]
        if missing:
            raise UsageError(f"easy hold-out needs sibling models for: {', '.join(missing)}")
    check_accuracy_gate(list(models) + list(siblings.values()), dataset, cfg)
    report = TransferReport()
    for loss_cfg in _per_loss(attack_cfg, losses):
        for holdout in models:
            sources = [model for model in models if model is not holdout]
            name = f"-{holdout.name}"
            if holdout_rule == "easy":
                sources.append(siblings[holdout.name])
                name += f"+{siblings[holdout.name].name}"
            sample = select_evaluation_images(sources, dataset, cfg)
            logger.info("Attacking ensemble %s with %s on %d images", name, loss_cfg.loss.label, len(sample))
            result = attack_sample(sources, sample, loss_cfg, cfg)
            report.extend(evaluate_transfer(name, holdout, sample, result, loss_cfg))
    return report


def run_rank_sweep(
    source: Model,
    target: Model,
    dataset: Dataset,
    ranks: Sequence[int],
    attack_cfg: AttackConfig,
    cfg: EvaluationConfig,
    losses: Optional[Sequence[LossSpec]] = None,
) -> TransferReport:
    """
    Targets chosen at given ranks of the source's clean prediction; one row per rank per loss at the last checkpoint.
    The rank is recorded in the source column as ``<source>@rank<r>``.
    """
    cfg.validate()
    for rank in ranks:
        if not 2 <= rank <= source.num_classes:
            raise UsageError(f"target rank must lie in [2, {source.num_classes}], got {rank}")
    check_accuracy_gate([source, target], dataset, cfg)
    report = TransferReport()
    final = [max(attack_cfg.checkpoints)]
    for loss_cfg in _per_loss(attack_cfg, losses):
        for rank in ranks:
            sample = select_evaluation_images([source], dataset, cfg, rank=rank)
            logger.info("Rank %d targets, %s, %d images", rank, loss_cfg.loss.label, len(sample))
            result = attack_sample([source], sample, loss_cfg, cfg)
            report.extend(evaluate_transfer(f"{source.name}@rank{rank}", target, sample, result, loss_cfg, final))
    return report


def normalize_trend(series: Sequence[float]) -> List[float]:
    """
    Divides every value by the first one.

    :raises NumericalDomainError: If the first value is zero.
    """
    if len(series) == 0:
        raise UsageError("cannot normalize an empty series")
    first = float(series[0])
    if first == 0:
        raise NumericalDomainError("cannot normalize a series whose first value is zero")
    return [1.0] + [float(value) / first for value in series[1:]]


def run_trend_analysis(
    source: Model,
    dataset: Dataset,
    losses: Sequence[LossSpec],
    attack_cfg: AttackConfig,
    cfg: EvaluationConfig,
) -> List[TrendRow]:
    """
    White-box loss, input-gradient L1 and target-logit trends over iterations. The first two are averaged over the
    images and then divided by their first-iteration value; the target logit stays raw.
    """
    cfg.validate()
    check_accuracy_gate([source], dataset, cfg)
    sample = select_evaluation_images([source], dataset, cfg)
    rows = []
    for loss_cfg in _per_loss(attack_cfg, losses):
        logger.info("Trend run for %s on %d images", loss_cfg.loss.label, len(sample))
        trajectory = attack_sample([source], sample, loss_cfg, cfg).trajectory
        norm_loss = normalize_trend(trajectory.loss.mean(axis=1))
        norm_grad = normalize_trend(trajectory.grad_l1.mean(axis=1))
        logits = trajectory.target_logit.mean(axis=1)
        for iteration in range(len(trajectory)):
            rows.append(
                TrendRow(loss_cfg.loss.label, iteration + 1, norm_loss[iteration], norm_grad[iteration], logits[iteration])
            )
    return rows


def run_stepsize_sweep(
    source: Model,
    target: Model,
    dataset: Dataset,
    alphas: Sequence[float],
    attack_cfg: AttackConfig,
    cfg: EvaluationConfig,
    losses: Optional[Sequence[LossSpec]] = None,
) -> Tuple[TransferReport, List[SpreadRow]]:
    """
    One row per (alpha, loss) at the last checkpoint plus the max-min targeted success spread per loss.

    :param alphas: Step sizes in [0,1] pixel units; duplicates are dropped with a warning.
    """
    cfg.validate()
    unique = sorted(set(float(alpha) for alpha in alphas))
    if len(unique) != len(alphas):
        logger.warning("Dropped %d duplicate step size(s)", len(alphas) - len(unique))
    if not unique or unique[0] <= 0:
        raise UsageError("step sizes must be > 0")
    check_accuracy_gate([source, target], dataset, cfg)
    sample = select_evaluation_images([source], dataset, cfg)
    final = [max(attack_cfg.checkpoints)]
    report = TransferReport()
    spreads = []
    for loss_cfg in _per_loss(attack_cfg, losses):
        rates = []
        for alpha in unique:
            step_cfg = dataclasses.replace(loss_cfg, alpha=alpha)
            logger.info("Step size %g/255 with %s", alpha * 255, loss_cfg.loss.label)
            result = attack_sample([source], sample, step_cfg, cfg)
            rows = evaluate_transfer(source.name, target, sample, result, step_cfg, final)
            rates.append(rows[0].targeted_sr)
            report.extend(rows)
        spreads.append(
            SpreadRow(loss_cfg.loss.label, source.name, target.name, min(rates), max(rates), max(rates) - min(rates))
        )
    return report, spreads


TrajectoryRow = namedtuple(
    "TrajectoryRow", "image iteration loss grad_l1 target_logit target_prob target_rank zero_grad"
)
SampleRow = namedtuple("SampleRow", "index original target")


def trajectory_rows(result: AttackResult, sample: EvaluationSample) -> List[TrajectoryRow]:
    """
    Flattens the trajectory to one row per (image, iteration); ``image`` is the dataset index.
    """
    trajectory = result.trajectory
    rows = []
    for position, index in enumerate(sample.indices):
        for iteration in range(len(trajectory)):
            rows.append(
                TrajectoryRow(
                    int(index),
                    iteration + 1,
                    float(trajectory.loss[iteration, position]),
                    float(trajectory.grad_l1[iteration, position]),
                    float(trajectory.target_logit[iteration, position]),
                    float(trajectory.target_prob[iteration, position]),
                    int(trajectory.target_rank[iteration, position]),
                    int(trajectory.zero_grad[iteration, position]),
                )
            )
    return rows


def sample_rows(sample: EvaluationSample) -> List[SampleRow]:
    return [SampleRow(int(i), int(o), int(t)) for i, o, t in zip(sample.indices, sample.originals, sample.targets)]
