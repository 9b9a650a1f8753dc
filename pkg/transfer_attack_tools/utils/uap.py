"""
Data-free targeted universal adversarial perturbations: the attack runs on a constant mid-gray image and the
difference to that image is the perturbation applied to every dataset image.
"""

import concurrent.futures
import dataclasses
import logging
import os
import struct
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from transfer_attack_tools.utils.attack_engine import (
    AttackConfig,
    attack,
    ensemble_logits,
    image_generators,
    initial_point,
    target_confidence_and_rank,
)
from transfer_attack_tools.utils.data import Dataset
from transfer_attack_tools.utils.errors import FormatError, ShapeError, UsageError
from transfer_attack_tools.utils.evaluation import EvaluationConfig, TransferReport, TransferRow
from transfer_attack_tools.utils.losses import LossSpec
from transfer_attack_tools.utils.model_zoo import BinaryReader, Model, pack_str, predict_logits
from transfer_attack_tools.utils.tensor_core import Tensor

logger = logging.getLogger(__name__)

UAP_MAGIC = b"UAP1"
MEAN_PIXEL = 0.5
EVAL_CHUNK = 256


@dataclass
class UapArtifact:
    """
    A perturbation ``[C,H,W]`` with entries in ``[-epsilon, epsilon]`` steering images towards ``target``.

    :ivar source: Architecture id(s) it was generated on, joined with ``+``.
    :ivar config: Generation settings; ``None`` for artifacts read from disk.
    """

    perturbation: np.ndarray
    target: int
    source: str
    epsilon: float
    config: Optional[AttackConfig] = None


def _mean_image_original(models: Sequence[Model], mean_image: np.ndarray, target: int) -> int:
    # the class the ensemble predicts for the gray image, or the runner-up if that is the target
    logits = ensemble_logits(models, Tensor(mean_image[None])).data[0]
    order = np.argsort(-logits, kind="stable")
    return int(order[1] if order[0] == target else order[0])


def generate_uap(models: Sequence[Model], target: int, cfg: AttackConfig, image_shape: Tuple[int, int, int]) -> UapArtifact:
    """
    Runs ``attack`` from the constant 0.5 image and returns the final perturbation. Touches no dataset.

    With ``cfg.iterations == 0`` the perturbation is the starting offset: zero, or clipped gaussian noise for
    ``init = gaussian``.

    :param image_shape: ``(C,H,W)`` of the images the perturbation will be applied to.
    """
    if cfg.norm != "linf" or cfg.unbounded or cfg.epsilon <= 0:
        raise UsageError("UAP generation needs a bounded L-infinity attack with epsilon > 0")
    mean_image = np.full(tuple(image_shape), MEAN_PIXEL, dtype=np.float32)
    if not models or not 0 <= target < models[0].num_classes:
        raise UsageError(f"target {target} outside the classes of the source models")
    source = "+".join(model.arch_id for model in models)
    if cfg.iterations == 0:
        init_rngs, _ = image_generators(cfg.seed, [0])
        start = initial_point(mean_image[None], cfg, init_rngs)[0]
        return UapArtifact(start - mean_image, target, source, cfg.epsilon, cfg)
    original = _mean_image_original(models, mean_image, target)
    result = attack(models, mean_image, target, original, cfg)
    perturbation = (result.final[0] - mean_image).astype(np.float32)
    return UapArtifact(perturbation, target, source, cfg.epsilon, cfg)


def apply_uap(uap: UapArtifact, images: np.ndarray) -> np.ndarray:
    """
    ``clip(images + perturbation, 0, 1)``.
    """
    images = np.asarray(images, dtype=np.float32)
    if images.shape[-3:] != uap.perturbation.shape:
        raise ShapeError("apply_uap", f"perturbation {uap.perturbation.shape} vs images {images.shape}")
    return np.clip(images + uap.perturbation, 0, 1)


def _uap_logits(uap: UapArtifact, eval_model: Model, dataset: Dataset, jobs: int) -> np.ndarray:
    starts = list(range(0, len(dataset), EVAL_CHUNK))

    def run_chunk(start: int) -> np.ndarray:
        return predict_logits(eval_model, apply_uap(uap, dataset.images[start : start + EVAL_CHUNK])).data

    if jobs == 1:
        return np.concatenate([run_chunk(start) for start in starts])
    with concurrent.futures.ThreadPoolExecutor(max_workers=jobs) as executor:
        return np.concatenate(list(executor.map(run_chunk, starts)))


def evaluate_uap(
    uap: UapArtifact, eval_model: Model, dataset: Dataset, target: Optional[int] = None, jobs: int = 1
) -> float:
    """
    Fraction of ``dataset`` that ``eval_model`` classifies as ``target`` (default: the UAP's target) once perturbed.
    """
    if len(dataset) == 0:
        raise UsageError("cannot evaluate a UAP on an empty dataset")
    target = uap.target if target is None else target
    return float(np.mean(_uap_logits(uap, eval_model, dataset, jobs).argmax(axis=1) == target))


def save_uap(uap: UapArtifact, path: str) -> None:
    """
    Writes ``UAP1``: magic, ``u32`` rank, ``u32`` dims, ``f32`` epsilon, ``u32`` target, length-prefixed source id,
    then the little-endian float32 perturbation.
    """
    shape = uap.perturbation.shape
    with open(path, "wb") as uap_fp:
        uap_fp.write(UAP_MAGIC + struct.pack("<I", len(shape)) + struct.pack(f"<{len(shape)}I", *shape))
        uap_fp.write(struct.pack("<fI", uap.epsilon, uap.target) + pack_str(uap.source))
        uap_fp.write(uap.perturbation.astype("<f4").tobytes())


def load_uap(path: str) -> UapArtifact:
    with open(path, "rb") as uap_fp:
        reader = BinaryReader(uap_fp.read(), path)
    if reader.take(4) != UAP_MAGIC:
        raise FormatError(f'"{path}" is not a UAP file (bad magic)')
    dims = tuple(reader.u32() for _ in range(reader.u32()))
    epsilon = reader.f32()
    target = reader.u32()
    source = reader.string()
    perturbation = reader.array(dims)
    if not reader.exhausted:
        raise FormatError(f'"{path}" has trailing bytes')
    return UapArtifact(perturbation.copy(), target, source, epsilon)


def run_uap_suite(
    models: Sequence[Model],
    dataset: Dataset,
    losses: Sequence[LossSpec],
    attack_cfg: AttackConfig,
    cfg: EvaluationConfig,
    targets: Optional[Sequence[int]] = None,
    out_dir: Optional[str] = None,
) -> TransferReport:
    """
    One UAP per (model, loss, target class). Only the subset ``dataset.head(cfg.n_images)`` is evaluated, by every
    model; the remaining images are never read and ``n_images`` of each row is the subset size. Each row averages
    over the target classes; ``source == target`` rows are the white-box results.

    :param out_dir: If set, every perturbation is saved there as ``uap_<arch>_<loss>_t<k>.uap``.
    """
    cfg.validate()
    eval_set = dataset.head(cfg.n_images)
    targets = list(range(dataset.num_classes)) if targets is None else list(targets)
    report = TransferReport()
    for source in models:
        for spec in losses:
            loss_cfg = dataclasses.replace(attack_cfg, loss=spec)
            stats: List[List[Tuple[float, float, float, float]]] = [[] for _ in models]
            for target in targets:
                logger.info("Generating UAP on %s with %s for class %d", source.name, spec.label, target)
                uap = generate_uap([source], target, loss_cfg, eval_set.image_shape)
                if out_dir is not None:
                    save_uap(uap, os.path.join(out_dir, f"uap_{source.arch_id}_{spec.label}_t{target}.uap"))
                wanted = np.full(len(eval_set), target, dtype=np.int64)
                for position, eval_model in enumerate(models):
                    logits = _uap_logits(uap, eval_model, eval_set, cfg.jobs)
                    predictions = logits.argmax(axis=1)
                    confidence, rank = target_confidence_and_rank(logits, wanted)
                    stats[position].append(
                        (
                            float(np.mean(predictions == target)),
                            float(np.mean(predictions != eval_set.labels)),
                            float(np.mean(confidence)),
                            float(np.mean(rank)),
                        )
                    )
            for position, eval_model in enumerate(models):
                means = np.mean(np.array(stats[position]), axis=0)
                report.rows.append(
                    TransferRow(
                        source=source.name,
                        target=eval_model.name,
                        loss=spec.label,
                        methods=f"UAP-{loss_cfg.methods}",
                        checkpoint=loss_cfg.iterations,
                        epsilon=loss_cfg.epsilon * 255,
                        alpha=loss_cfg.alpha * 255,
                        seed=loss_cfg.seed,
                        n_images=len(eval_set),
                        targeted_sr=float(means[0]),
                        nontargeted_sr=float(means[1]),
                        mean_target_conf=float(means[2]),
                        mean_target_rank=float(means[3]),
                    )
                )
    return report
