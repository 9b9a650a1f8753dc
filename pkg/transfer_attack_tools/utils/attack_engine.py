"""
Iterative targeted attack: sign descent on a targeted loss, composable with momentum (MI), translation-invariant
gradient smoothing (TI) and diverse inputs (DI), under an L-infinity (default) or L2 bound, against one model or an
equally weighted ensemble.

One call of ``attack`` owns its momentum state and random generators. Randomness of image ``i`` comes from a Philox
generator keyed by ``(cfg.seed, keys[i])`` and DI draws a fixed amount of randomness per iteration, so a run is
reproducible and its checkpoint ``n`` equals the final image of an ``n``-iteration run.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.stats

from transfer_attack_tools.utils import tensor_core as tc
from transfer_attack_tools.utils.errors import ShapeError, UsageError
from transfer_attack_tools.utils.losses import LossSpec, compute_loss
from transfer_attack_tools.utils.model_zoo import Model
from transfer_attack_tools.utils.tensor_core import ComputeGraph, Tensor

logger = logging.getLogger(__name__)

DEFAULT_CHECKPOINTS = (20, 100, 300)
NORMS = ("linf", "l2")
INITS = ("zero", "gaussian")


@dataclass
class AttackConfig:
    """
    Everything that defines one attack run. ``epsilon`` and ``alpha`` are in [0,1] pixel units.

    ``use_mi``, ``init`` and ``checkpoints`` default to ``None`` and are resolved on construction: unbounded runs
    start from gaussian noise without momentum, bounded ones from the clean image with momentum; checkpoints are the
    defaults up to ``iterations`` plus ``iterations`` itself.
    """

    # pylint: disable=R0902

    loss: LossSpec = field(default_factory=LossSpec)
    epsilon: float = 16 / 255
    alpha: float = 2 / 255
    iterations: int = 300
    checkpoints: Optional[Tuple[int, ...]] = None
    use_mi: Optional[bool] = None
    mi_decay: float = 1.0
    use_ti: bool = True
    ti_kernel: int = 5
    use_di: bool = True
    di_prob: float = 0.7
    di_resize_band: Optional[Tuple[int, int]] = None
    norm: str = "linf"
    unbounded: bool = False
    init: Optional[str] = None
    init_sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.use_mi is None:
            self.use_mi = not self.unbounded
        elif self.use_mi and self.unbounded:
            logger.info("Unbounded attack: momentum disabled")
            self.use_mi = False
        if self.init is None:
            self.init = "gaussian" if self.unbounded else "zero"
        if self.checkpoints is None:
            self.checkpoints = tuple(
                sorted({c for c in DEFAULT_CHECKPOINTS if c <= self.iterations} | {self.iterations})
            )
        self.checkpoints = tuple(sorted(set(int(c) for c in self.checkpoints)))
        if self.di_resize_band is not None:
            self.di_resize_band = (int(self.di_resize_band[0]), int(self.di_resize_band[1]))

    def validate(self) -> None:
        """
        :raises UsageError: On any violated invariant.
        """
        if self.alpha <= 0:
            raise UsageError(f"alpha must be > 0, got {self.alpha}")
        if self.epsilon < 0 or self.epsilon > 1:
            raise UsageError(f"epsilon must lie in [0,1], got {self.epsilon}")
        if self.iterations < 1:
            raise UsageError(f"iterations must be >= 1, got {self.iterations}")
        if any(c < 1 or c > self.iterations for c in self.checkpoints):
            raise UsageError(f"checkpoints {self.checkpoints} must lie in [1, {self.iterations}]")
        if not 0 <= self.di_prob <= 1:
            raise UsageError(f"di_prob must lie in [0,1], got {self.di_prob}")
        if self.mi_decay < 0:
            raise UsageError(f"mi_decay must be >= 0, got {self.mi_decay}")
        if self.ti_kernel < 1 or self.ti_kernel % 2 == 0:
            raise UsageError(f"ti_kernel must be odd and >= 1, got {self.ti_kernel}")
        if self.norm not in NORMS:
            raise UsageError(f"Unknown norm {self.norm!r}, valid: {', '.join(NORMS)}")
        if self.init not in INITS:
            raise UsageError(f"Unknown init {self.init!r}, valid: {', '.join(INITS)}")
        if self.init_sigma < 0:
            raise UsageError("init_sigma must be >= 0")

    def resize_band(self, size: int) -> Tuple[int, int]:
        """
        DI band for ``size x size`` images; by default ``[size - size // 10, size]`` (29..32 at 32x32).
        """
        low, high = self.di_resize_band or (size - size // 10, size)
        if not 1 <= low <= high <= size:
            raise UsageError(f"DI resize band ({low}, {high}) must satisfy 1 <= low <= high <= {size}")
        return low, high

    @property
    def methods(self) -> str:
        """
        Short tag of the enabled transfer methods such as ``TMDI``; plain I-FGSM is ``I``.
        """
        tag = ("T" if self.use_ti else "") + ("M" if self.use_mi else "") + ("DI" if self.use_di else "")
        tag = tag or "I"
        if self.norm == "l2":
            tag += "-l2"
        if self.unbounded:
            tag += "-unbounded"
        return tag


class Trajectory:
    """
    Per-iteration, per-image attack statistics, each an array ``[iterations, B]``.
    """

    # pylint: disable=R0903

    FIELDS = ("loss", "grad_l1", "target_logit", "target_prob", "target_rank", "zero_grad")

    def __init__(self, iterations: int, batch: int):
        self.loss = np.zeros((iterations, batch), dtype=np.float64)
        self.grad_l1 = np.zeros((iterations, batch), dtype=np.float64)
        self.target_logit = np.zeros((iterations, batch), dtype=np.float64)
        self.target_prob = np.zeros((iterations, batch), dtype=np.float64)
        self.target_rank = np.zeros((iterations, batch), dtype=np.int64)
        self.zero_grad = np.zeros((iterations, batch), dtype=bool)

    def __len__(self) -> int:
        return self.loss.shape[0]


@dataclass
class AttackResult:
    """
    Checkpoint snapshots ``{iteration: [B,C,H,W]}``, the trajectory and the seed that produced them.
    """

    snapshots: Dict[int, np.ndarray]
    trajectory: Trajectory
    seed: int

    @property
    def final(self) -> np.ndarray:
        return self.snapshots[max(self.snapshots)]


def target_confidence_and_rank(logits: np.ndarray, targets: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    :param logits: ``[B,k]``.
    :param targets: ``[B]``.
    :return: Softmax probability of each target and its rank (1 + number of strictly larger logits).
    """
    logits = np.asarray(logits, dtype=np.float64)
    rows = np.arange(logits.shape[0])
    target_logits = logits[rows, targets]
    shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
    confidence = shifted[rows, targets] / shifted.sum(axis=1)
    rank = 1 + (logits > target_logits[:, None]).sum(axis=1)
    return confidence, rank


def make_ti_kernel(size: int) -> np.ndarray:
    """
    Normalized 2-D Gaussian window of side ``size`` with ``sigma = size / 3``.
    """
    if size < 1 or size % 2 == 0:
        raise UsageError(f"TI kernel size must be odd and >= 1, got {size}")
    offsets = np.arange(size) - (size - 1) / 2
    window = scipy.stats.norm.pdf(offsets, scale=size / 3)
    kernel = np.outer(window, window)
    return (kernel / kernel.sum()).astype(np.float32)


def ti_smooth(grad: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """
    Per-channel same-size convolution of a gradient with zero padding.

    :param grad: ``[C,H,W]`` or ``[B,C,H,W]``.
    :param kernel: Square odd kernel, e.g. from ``make_ti_kernel``.
    """
    size = kernel.shape[0]
    if size == 1:
        return grad * kernel[0, 0]
    planes = grad.reshape((-1, 1) + grad.shape[-2:])
    smoothed = tc.conv2d(Tensor(planes), Tensor(kernel.reshape(1, 1, size, size)), stride=1, padding=size // 2)
    return smoothed.data.reshape(grad.shape)


def di_transform(
    image: Tensor, p: float, resize_band: Tuple[int, int], rng: np.random.Generator
) -> Tensor:
    """
    With probability ``p`` resize ``image`` to a random ``r x r`` in ``resize_band`` and zero-pad it back at a random
    offset; otherwise return it unchanged. Always consumes exactly four draws from ``rng``.

    :param image: ``[C,H,W]`` tensor, recorded in the active graph.
    """
    height, width = image.shape[-2], image.shape[-1]
    low, high = resize_band
    if not 1 <= low <= high <= min(height, width):
        raise UsageError(f"DI resize band {resize_band} does not fit {height}x{width}")
    apply = rng.random() < p
    size = int(rng.integers(low, high + 1))
    top = int(rng.integers(0, height - size + 1))
    left = int(rng.integers(0, width - size + 1))
    if not apply:
        return image
    return tc.pad2d(tc.resize_bilinear(image, size, size), top, left, height, width)


def _per_image_sum(array: np.ndarray) -> np.ndarray:
    return array.reshape(array.shape[0], -1).sum(axis=1) if array.ndim == 4 else np.atleast_1d(array.sum())


def mi_accumulate(g_prev: np.ndarray, grad: np.ndarray, mu: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Momentum update ``mu * g_prev + grad / ||grad||_1``, normalized per image for ``[B,C,H,W]`` arrays.

    :return: The new momentum and a boolean per image marking zero gradients; those images keep ``mu * g_prev``.
    """
    if g_prev.shape != grad.shape:
        raise ShapeError("mi_accumulate", f"momentum {g_prev.shape} vs gradient {grad.shape}")
    l1 = _per_image_sum(np.abs(grad))
    zero = l1 == 0
    safe = np.where(zero, 1.0, l1).astype(grad.dtype)
    scale = safe.reshape((-1,) + (1,) * (grad.ndim - 1)) if grad.ndim == 4 else safe[0]
    momentum = mu * g_prev + grad / scale
    if zero.any():
        keep = mu * g_prev
        if grad.ndim == 4:
            momentum[zero] = keep[zero]
        else:
            momentum = keep
    return momentum.astype(grad.dtype), zero


def step_and_project(x_curr: np.ndarray, x_orig: np.ndarray, update_dir: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    """
    One descent step followed by projection.

    - ``linf``: ``clip01(clip_ball(x - alpha * sign(dir)))``.
    - ``l2``: step ``alpha * dir / ||dir||_2`` per image, radial projection onto the epsilon ball, then ``clip01``.
    - unbounded: no ball projection, the [0,1] clip stays.
    """
    if not x_curr.shape == x_orig.shape == update_dir.shape:
        raise ShapeError("step_and_project", f"{x_curr.shape}, {x_orig.shape}, {update_dir.shape}")
    dtype = x_curr.dtype
    alpha, epsilon = dtype.type(cfg.alpha), dtype.type(cfg.epsilon)
    batched = x_curr.ndim == 4
    if cfg.norm == "linf":
        proposal = x_curr - alpha * np.sign(update_dir)
        if not cfg.unbounded:
            proposal = np.clip(proposal, x_orig - epsilon, x_orig + epsilon)
        return np.clip(proposal, 0, 1).astype(dtype)

    norms = np.sqrt(_per_image_sum(update_dir * update_dir))
    safe = np.where(norms == 0, 1.0, norms).astype(dtype)
    step = update_dir / (safe.reshape(-1, 1, 1, 1) if batched else safe[0])
    proposal = x_curr - alpha * step
    if not cfg.unbounded:
        delta = proposal - x_orig
        lengths = np.sqrt(_per_image_sum(delta * delta))
        factors = np.where(lengths > epsilon, epsilon / np.maximum(lengths, 1e-12), 1.0).astype(dtype)
        proposal = x_orig + delta * (factors.reshape(-1, 1, 1, 1) if batched else factors[0])
    return np.clip(proposal, 0, 1).astype(dtype)


def ensemble_logits(models: Sequence[Model], images: Tensor) -> Tensor:
    """
    Arithmetic mean of the models' logits (equal weights).
    """
    if not models:
        raise UsageError("ensemble needs at least one model")
    num_classes = {model.num_classes for model in models}
    if len(num_classes) != 1:
        raise UsageError(f"ensemble members disagree on the number of classes: {sorted(num_classes)}")
    outputs = [model.forward(images) for model in models]
    if len(outputs) == 1:
        return outputs[0]
    total = outputs[0]
    for output in outputs[1:]:
        total = tc.add(total, output)
    return tc.scale(total, 1.0 / len(outputs))


def image_generators(seed: int, keys: Sequence[int]) -> Tuple[List[np.random.Generator], List[np.random.Generator]]:
    init_rngs, di_rngs = [], []
    for key in keys:
        init_seq, di_seq = np.random.SeedSequence([seed, int(key)]).spawn(2)
        init_rngs.append(np.random.Generator(np.random.Philox(init_seq)))
        di_rngs.append(np.random.Generator(np.random.Philox(di_seq)))
    return init_rngs, di_rngs


def initial_point(x_orig: np.ndarray, cfg: AttackConfig, rngs: Sequence[np.random.Generator]) -> np.ndarray:
    """
    Starting image: the clean image, or clean image plus gaussian noise, clipped to the ball and to [0,1].
    """
    if cfg.init == "zero":
        return x_orig.copy()
    noise = np.stack([rng.normal(0.0, cfg.init_sigma, size=x_orig.shape[1:]) for rng in rngs]).astype(x_orig.dtype)
    start = x_orig + noise
    if not cfg.unbounded:
        epsilon = x_orig.dtype.type(cfg.epsilon)
        if cfg.norm == "linf":
            start = np.clip(start, x_orig - epsilon, x_orig + epsilon)
        else:
            lengths = np.sqrt(_per_image_sum(noise * noise))
            factors = np.where(lengths > epsilon, epsilon / np.maximum(lengths, 1e-12), 1.0)
            start = x_orig + noise * factors.reshape(-1, 1, 1, 1).astype(x_orig.dtype)
    return np.clip(start, 0, 1).astype(x_orig.dtype)


def attack(
    models: Sequence[Model],
    images: np.ndarray,
    targets,
    originals,
    cfg: AttackConfig,
    keys: Optional[Sequence[int]] = None,
) -> AttackResult:
    """
    Runs the iterative targeted attack.

    Per iteration: DI transform (if enabled), ensemble logits, loss, backward to the input, TI smoothing (if
    enabled), MI accumulation (if enabled), step and projection.

    :param models: Source model(s); more than one forms an equal-weight logit ensemble.
    :param images: Clean ``[C,H,W]`` image or ``[B,C,H,W]`` batch in [0,1].
    :param targets: Target class per image.
    :param originals: Clean class per image (used by Po+Trip).
    :param cfg: The attack configuration.
    :param keys: Per-image randomness keys, defaults to the batch positions. Passing dataset indices makes results
                 independent of how images are batched.
    :return: Snapshots at ``cfg.checkpoints`` and the full trajectory.
    """
    cfg.validate()
    x_orig = np.asarray(images, dtype=np.float32)
    if x_orig.ndim == 3:
        x_orig = x_orig[None]
    if x_orig.ndim != 4:
        raise ShapeError("attack", f"expected [C,H,W] or [B,C,H,W] images, got {np.shape(images)}")
    if x_orig.min() < 0 or x_orig.max() > 1:
        raise UsageError("attack images must have pixels in [0,1]")
    batch = x_orig.shape[0]
    targets = np.broadcast_to(np.asarray(targets, dtype=np.int64), (batch,)).copy()
    originals = np.broadcast_to(np.asarray(originals, dtype=np.int64), (batch,)).copy()
    num_classes = models[0].num_classes if models else 0
    if targets.min() < 0 or targets.max() >= num_classes:
        raise UsageError(f"target class outside [0, {num_classes})")
    keys = list(range(batch)) if keys is None else list(keys)
    if len(keys) != batch:
        raise UsageError(f"{len(keys)} keys for {batch} images")

    init_rngs, di_rngs = image_generators(cfg.seed, keys)
    band = cfg.resize_band(x_orig.shape[-1]) if cfg.use_di else None
    kernel = make_ti_kernel(cfg.ti_kernel) if cfg.use_ti else None
    x = initial_point(x_orig, cfg, init_rngs)
    momentum = np.zeros_like(x_orig)
    trajectory = Trajectory(cfg.iterations, batch)
    snapshots: Dict[int, np.ndarray] = {}
    rows = np.arange(batch)

    for iteration in range(cfg.iterations):
        with ComputeGraph() as graph:
            x_tensor = Tensor(x, requires_grad=True)
            inputs = x_tensor
            if cfg.use_di:
                inputs = _diverse_batch(x_tensor, cfg.di_prob, band, di_rngs)
            logits = ensemble_logits(models, inputs)
            per_image = compute_loss(cfg.loss, logits, targets, originals, reduction="none")
            tc.backward(graph, tc.reduce_sum(per_image))
        grad = x_tensor.grad if x_tensor.grad is not None else np.zeros_like(x)

        confidence, rank = target_confidence_and_rank(logits.data, targets)
        trajectory.loss[iteration] = per_image.data
        trajectory.grad_l1[iteration] = _per_image_sum(np.abs(grad))
        trajectory.target_logit[iteration] = logits.data[rows, targets]
        trajectory.target_prob[iteration] = confidence
        trajectory.target_rank[iteration] = rank

        if kernel is not None:
            grad = ti_smooth(grad, kernel)
        if cfg.use_mi:
            momentum, zero = mi_accumulate(momentum, grad, cfg.mi_decay)
            direction = momentum
        else:
            zero = _per_image_sum(np.abs(grad)) == 0
            direction = grad
        if zero.any():
            logger.debug("Iteration %d: zero gradient for %d image(s)", iteration + 1, int(zero.sum()))
        trajectory.zero_grad[iteration] = zero
        x = step_and_project(x, x_orig, direction, cfg)
        if iteration + 1 in cfg.checkpoints:
            snapshots[iteration + 1] = x.copy()
    return AttackResult(snapshots=snapshots, trajectory=trajectory, seed=cfg.seed)


def _diverse_batch(
    batch: Tensor, p: float, resize_band: Tuple[int, int], rngs: Sequence[np.random.Generator]
) -> Tensor:
    # every image draws its own transform from its own generator
    image_shape = (1,) + batch.shape[1:]
    rows = [tc.reshape(di_transform(tc.select(batch, i), p, resize_band, rng), image_shape) for i, rng in enumerate(rngs)]
    return rows[0] if len(rows) == 1 else tc.concat(*rows, axis=0)
