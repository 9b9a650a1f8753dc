"""
Four small, architecturally diverse classifiers built on ``tensor_core``, their training loop and their weight file.

- ``mini_vgg``: plain conv stacks.
- ``mini_res``: residual blocks joined by ``add`` skips.
- ``mini_dense``: dense blocks joined by ``concat`` skips.
- ``mini_incep``: parallel 1x1 / 3x3 / 5x5 branches concatenated.

Every architecture ends in global average pooling, so any square input works.
"""

import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from transfer_attack_tools.utils import tensor_core as tc
from transfer_attack_tools.utils.data import Dataset, batch_iter
from transfer_attack_tools.utils.errors import FormatError, ShapeError, TrainingError, UsageError
from transfer_attack_tools.utils.losses import loss_ce
from transfer_attack_tools.utils.tensor_core import ComputeGraph, Tensor

logger = logging.getLogger(__name__)

WEIGHTS_MAGIC = b"MZW1"
NORMALIZATION = {
    3: ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)),
    1: ((0.1307,), (0.3081,)),
}


class Model:
    """
    A classifier: architecture id, named weights and the standardization constants applied inside its graph.
    """

    def __init__(self, arch_id: str, num_classes: int, weights: Dict[str, Tensor], mean, std, name: str = ""):
        """
        :param arch_id: One of ``ARCHITECTURES``.
        :param num_classes: Length of the logit vector.
        :param weights: Trainable tensors by name.
        :param mean: Per-channel mean subtracted from [0,1] pixels.
        :param std: Per-channel standard deviation.
        :param name: Identifier used in reports, defaults to ``arch_id``.
        """
        if arch_id not in ARCHITECTURES:
            raise UsageError(f"Unknown architecture {arch_id!r}, valid: {', '.join(ARCHITECTURES)}")
        self.arch_id = arch_id
        self.num_classes = num_classes
        self.weights = weights
        self.mean = np.asarray(mean, dtype=np.float32)
        self.std = np.asarray(std, dtype=np.float32)
        self.name = name or arch_id

    @property
    def in_channels(self) -> int:
        return self.mean.shape[0]

    def parameter_count(self) -> int:
        return sum(tensor.size for tensor in self.weights.values())

    def set_trainable(self, flag: bool) -> None:
        for tensor in self.weights.values():
            tensor.requires_grad = flag
            tensor.grad = None

    def cast(self, dtype) -> "Model":
        """
        :return: A copy whose weights use ``dtype``; gradient checks run the models in float64.
        """
        weights = {name: Tensor(tensor.data.astype(dtype), name=name) for name, tensor in self.weights.items()}
        return Model(self.arch_id, self.num_classes, weights, self.mean, self.std, self.name)

    def forward(self, images: Tensor) -> Tensor:
        """
        Logits for ``[C,H,W]`` or ``[B,C,H,W]`` images in [0,1]; recorded in the active graph if any.
        """
        x = images if images.data.ndim == 4 else tc.reshape(images, (1,) + images.shape)
        if x.data.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError("forward", f"{self.arch_id} expects {self.in_channels} channels, got {images.shape}")
        x = tc.channel_affine(x, 1.0 / self.std, -self.mean / self.std)
        return ARCHITECTURES[self.arch_id].forward(self, x)

    def trace(self, image_shape: Tuple[int, int, int]) -> ComputeGraph:
        """
        Records one forward pass on a blank image; the graph shows the structure of the architecture.
        """
        with ComputeGraph() as graph:
            self.forward(Tensor(np.zeros((1,) + tuple(image_shape), dtype=np.float32), requires_grad=True))
        return graph

    # layer helpers used by the architecture definitions

    def conv(self, x: Tensor, name: str, stride: int = 1, padding: Optional[int] = None) -> Tensor:
        kernel = self.weights[f"{name}.weight"]
        if padding is None:
            padding = kernel.shape[-1] // 2
        return tc.conv2d(x, kernel, stride=stride, padding=padding, bias=self.weights[f"{name}.bias"])

    def conv_relu(self, x: Tensor, name: str, stride: int = 1) -> Tensor:
        return tc.relu(self.conv(x, name, stride))

    def classify(self, x: Tensor) -> Tensor:
        pooled = tc.pool2d(x, "avg", window=x.shape[-1])
        flat = tc.reshape(pooled, (pooled.shape[0], pooled.shape[1]))
        return tc.dense(flat, self.weights["fc.weight"], self.weights["fc.bias"])


class Architecture:
    """
    Parameter layout plus forward function of one architecture.
    """

    # pylint: disable=R0903

    def __init__(self, layout: Callable[[int, int], List[Tuple[str, tuple]]], forward: Callable[[Model, Tensor], Tensor]):
        self.layout = layout
        self.forward = forward


def _conv_shape(name: str, c_in: int, c_out: int, size: int = 3) -> List[Tuple[str, tuple]]:
    return [(f"{name}.weight", (c_out, c_in, size, size)), (f"{name}.bias", (c_out,))]


def _fc_shape(c_in: int, num_classes: int) -> List[Tuple[str, tuple]]:
    return [("fc.weight", (num_classes, c_in)), ("fc.bias", (num_classes,))]


def _vgg_layout(in_channels: int, num_classes: int) -> List[Tuple[str, tuple]]:
    return (
        _conv_shape("conv1_1", in_channels, 32)
        + _conv_shape("conv1_2", 32, 32)
        + _conv_shape("conv2_1", 32, 64)
        + _conv_shape("conv2_2", 64, 64)
        + _conv_shape("conv3_1", 64, 128)
        + _fc_shape(128, num_classes)
    )


def _vgg_forward(model: Model, x: Tensor) -> Tensor:
    x = model.conv_relu(x, "conv1_1")
    x = tc.pool2d(model.conv_relu(x, "conv1_2"), "max", 2)
    x = model.conv_relu(x, "conv2_1")
    x = tc.pool2d(model.conv_relu(x, "conv2_2"), "max", 2)
    x = tc.pool2d(model.conv_relu(x, "conv3_1"), "max", 2)
    return model.classify(x)


RES_WIDTHS = (32, 64, 128)


def _res_layout(in_channels: int, num_classes: int) -> List[Tuple[str, tuple]]:
    layout = _conv_shape("stem", in_channels, RES_WIDTHS[0])
    for stage, width in enumerate(RES_WIDTHS, start=1):
        if stage > 1:
            layout += _conv_shape(f"down{stage}", RES_WIDTHS[stage - 2], width)
        layout += _conv_shape(f"res{stage}a", width, width) + _conv_shape(f"res{stage}b", width, width)
    return layout + _fc_shape(RES_WIDTHS[-1], num_classes)


def _res_forward(model: Model, x: Tensor) -> Tensor:
    x = model.conv_relu(x, "stem")
    for stage in range(1, len(RES_WIDTHS) + 1):
        if stage > 1:
            x = model.conv_relu(x, f"down{stage}", stride=2)
        branch = model.conv(model.conv_relu(x, f"res{stage}a"), f"res{stage}b")
        x = tc.relu(tc.add(x, branch))
    return model.classify(x)


DENSE_STEM = 32
DENSE_GROWTH = 16
DENSE_LAYERS = 3
DENSE_TRANSITIONS = (64, 96)


def _dense_layout(in_channels: int, num_classes: int) -> List[Tuple[str, tuple]]:
    layout = _conv_shape("stem", in_channels, DENSE_STEM)
    width = DENSE_STEM
    for block, transition in enumerate(DENSE_TRANSITIONS, start=1):
        for layer in range(1, DENSE_LAYERS + 1):
            layout += _conv_shape(f"dense{block}_{layer}", width, DENSE_GROWTH)
            width += DENSE_GROWTH
        layout += _conv_shape(f"trans{block}", width, transition, size=1)
        width = transition
    return layout + _fc_shape(width, num_classes)


def _dense_forward(model: Model, x: Tensor) -> Tensor:
    x = model.conv_relu(x, "stem")
    for block in range(1, len(DENSE_TRANSITIONS) + 1):
        for layer in range(1, DENSE_LAYERS + 1):
            x = tc.concat(x, model.conv_relu(x, f"dense{block}_{layer}"), axis=1)
        x = tc.pool2d(model.conv_relu(x, f"trans{block}"), "avg", 2)
    return model.classify(x)


# (1x1 width, 3x3 reduce, 3x3 width, 5x5 reduce, 5x5 width) per inception module
INCEPTION_MODULES = ((16, 16, 24, 8, 8), (32, 32, 48, 12, 16))
INCEPTION_STEM = 32


def _incep_layout(in_channels: int, num_classes: int) -> List[Tuple[str, tuple]]:
    layout = _conv_shape("stem", in_channels, INCEPTION_STEM)
    width = INCEPTION_STEM
    for index, (b1, r3, b3, r5, b5) in enumerate(INCEPTION_MODULES, start=1):
        layout += (
            _conv_shape(f"inc{index}_1x1", width, b1, size=1)
            + _conv_shape(f"inc{index}_3x3r", width, r3, size=1)
            + _conv_shape(f"inc{index}_3x3", r3, b3)
            + _conv_shape(f"inc{index}_5x5r", width, r5, size=1)
            + _conv_shape(f"inc{index}_5x5", r5, b5, size=5)
        )
        width = b1 + b3 + b5
    return layout + _fc_shape(width, num_classes)


def _incep_forward(model: Model, x: Tensor) -> Tensor:
    x = tc.pool2d(model.conv_relu(x, "stem"), "max", 2)
    for index in range(1, len(INCEPTION_MODULES) + 1):
        if index > 1:
            x = tc.pool2d(x, "max", 2)
        x = tc.concat(
            model.conv_relu(x, f"inc{index}_1x1"),
            model.conv_relu(model.conv_relu(x, f"inc{index}_3x3r"), f"inc{index}_3x3"),
            model.conv_relu(model.conv_relu(x, f"inc{index}_5x5r"), f"inc{index}_5x5"),
            axis=1,
        )
    return model.classify(x)


ARCHITECTURES: Dict[str, Architecture] = {
    "mini_vgg": Architecture(_vgg_layout, _vgg_forward),
    "mini_res": Architecture(_res_layout, _res_forward),
    "mini_dense": Architecture(_dense_layout, _dense_forward),
    "mini_incep": Architecture(_incep_layout, _incep_forward),
}


def build_model(arch_id: str, num_classes: int = 10, seed: int = 0, in_channels: int = 3, name: str = "") -> Model:
    """
    Creates a freshly initialized model.

    Weights use fan-in scaled uniform noise (bound ``sqrt(6 / fan_in)``, ``1 / sqrt(fan_in)`` for the classifier),
    biases start at zero.

    :param arch_id: One of ``ARCHITECTURES``.
    :param num_classes: Number of output classes.
    :param seed: Seeds the initialization.
    :param in_channels: 3 for CIFAR-10, 1 for MNIST.
    :param name: Report identifier, defaults to ``arch_id``.
    """
    if arch_id not in ARCHITECTURES:
        raise UsageError(f"Unknown architecture {arch_id!r}, valid: {', '.join(ARCHITECTURES)}")
    if in_channels not in NORMALIZATION:
        raise UsageError(f"No normalization constants for {in_channels} input channels")
    rng = np.random.Generator(np.random.Philox(seed))
    weights = {}
    for weight_name, shape in ARCHITECTURES[arch_id].layout(in_channels, num_classes):
        if weight_name.endswith(".bias"):
            data = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = 1.0 / np.sqrt(fan_in) if weight_name == "fc.weight" else np.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        weights[weight_name] = Tensor(data, name=weight_name)
    mean, std = NORMALIZATION[in_channels]
    return Model(arch_id, num_classes, weights, mean, std, name=name)


def predict_logits(model: Model, images, batch_size: int = 256) -> Tensor:
    """
    Raw logits for ``[B,C,H,W]`` images in [0,1], computed outside of any graph.

    :param model: The classifier.
    :param images: numpy array or ``Tensor``.
    :param batch_size: Chunk size of the forward passes.
    :return: ``[B,num_classes]``.
    """
    data = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float32)
    if data.ndim != 4:
        raise ShapeError("predict_logits", f"expected [B,C,H,W] images, got {data.shape}")
    chunks = [
        model.forward(Tensor(data[start : start + batch_size])).data for start in range(0, data.shape[0], batch_size)
    ]
    if not chunks:
        return Tensor(np.zeros((0, model.num_classes), dtype=np.float32))
    return Tensor(np.concatenate(chunks))


def accuracy(model: Model, dataset: Dataset, batch_size: int = 256) -> float:
    """
    :return: Fraction of ``dataset`` whose argmax logit equals the label.
    """
    if len(dataset) == 0:
        raise UsageError("accuracy of an empty dataset is undefined")
    predictions = predict_logits(model, dataset.images, batch_size).data.argmax(axis=1)
    return float(np.mean(predictions == dataset.labels))


@dataclass
class TrainConfig:
    """
    SGD with momentum on the cross-entropy loss.
    """

    epochs: int = 30
    batch_size: int = 128
    lr: float = 0.05
    lr_decay_epochs: Tuple[int, ...] = field(default_factory=lambda: (20, 25))
    lr_decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    flip: bool = True

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise UsageError("epochs and batch_size must be >= 1")
        if min(self.lr, self.lr_decay_factor, self.momentum, self.weight_decay) < 0:
            raise UsageError("learning rate, decay factor, momentum and weight decay must be >= 0")

    def learning_rate(self, epoch: int) -> float:
        """
        :param epoch: 0-based epoch index.
        """
        decays = sum(1 for boundary in self.lr_decay_epochs if boundary <= epoch)
        return self.lr * self.lr_decay_factor**decays


def train(model: Model, train_set: Dataset, test_set: Dataset, cfg: TrainConfig) -> Tuple[Model, dict]:
    """
    Trains ``model`` in place; reproducible given ``cfg.seed``.

    :return: The model and a metrics dict with ``test_acc``, ``epochs`` and the per-epoch mean ``losses``.
    """
    cfg.validate()
    for dataset in (train_set, test_set):
        if dataset.num_classes != model.num_classes:
            raise UsageError(f"{dataset.split} set has {dataset.num_classes} classes, model {model.num_classes}")
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    velocity = {name: np.zeros_like(tensor.data) for name, tensor in model.weights.items()}
    epoch_losses = []
    model.set_trainable(True)
    try:
        for epoch in range(cfg.epochs):
            lr = cfg.learning_rate(epoch)
            if epoch > 0 and lr != cfg.learning_rate(epoch - 1):
                logger.info("Learning rate decayed to %g", lr)
            order_seed = int(np.random.SeedSequence([cfg.seed, epoch]).generate_state(1)[0])
            running = []
            for images, labels in batch_iter(train_set, cfg.batch_size, seed=order_seed, shuffle=True):
                if cfg.flip:
                    flip = rng.random(len(labels)) < 0.5
                    images = np.where(flip[:, None, None, None], images[..., ::-1], images)
                with ComputeGraph() as graph:
                    loss = tc.scale(loss_ce(model.forward(Tensor(images)), labels), 1.0 / len(labels))
                    tc.backward(graph, loss)
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingError(f"Training of {model.name} diverged in epoch {epoch + 1}: loss is {value}")
                running.append(value)
                for name, tensor in model.weights.items():
                    step = tensor.grad + cfg.weight_decay * tensor.data
                    velocity[name] = cfg.momentum * velocity[name] + step
                    tensor.data -= np.float32(lr) * velocity[name]
            epoch_losses.append(float(np.mean(running)))
            logger.info("%s epoch %d/%d: loss %.4f", model.name, epoch + 1, cfg.epochs, epoch_losses[-1])
    finally:
        model.set_trainable(False)
    test_acc = accuracy(model, test_set)
    logger.info("%s test accuracy %.4f", model.name, test_acc)
    return model, {"test_acc": test_acc, "epochs": cfg.epochs, "losses": epoch_losses}


def pack_str(value: str) -> bytes:
    encoded = value.encode("UTF-8")
    return struct.pack("<I", len(encoded)) + encoded


def save_weights(model: Model, path: str) -> None:
    """
    Writes the ``MZW1`` weight file: magic, length-prefixed arch id, ``u32`` class count, then per tensor its
    length-prefixed name, ``u32`` rank, ``u32`` dims and little-endian float32 data. The normalization constants are
    stored as the tensors ``norm.mean`` and ``norm.std``.
    """
    tensors = dict(model.weights)
    tensors["norm.mean"] = Tensor(model.mean)
    tensors["norm.std"] = Tensor(model.std)
    with open(path, "wb") as weights_fp:
        weights_fp.write(WEIGHTS_MAGIC + pack_str(model.arch_id) + struct.pack("<I", model.num_classes))
        for name, tensor in tensors.items():
            weights_fp.write(pack_str(name) + struct.pack("<I", tensor.data.ndim))
            weights_fp.write(struct.pack(f"<{tensor.data.ndim}I", *tensor.shape))
            weights_fp.write(tensor.data.astype("<f4").tobytes())


class BinaryReader:
    """
    Bounds-checked cursor over a byte string.
    """

    def __init__(self, raw: bytes, path: str):
        self.raw = raw
        self.path = path
        self.offset = 0

    def take(self, count: int) -> bytes:
        if self.offset + count > len(self.raw):
            raise FormatError(f'"{self.path}" is truncated at byte {self.offset}')
        chunk = self.raw[self.offset : self.offset + count]
        self.offset += count
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f32(self) -> float:
        return struct.unpack("<f", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("UTF-8")

    def array(self, dims: Tuple[int, ...]) -> np.ndarray:
        count = int(np.prod(dims)) if dims else 1
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32).reshape(dims)

    @property
    def exhausted(self) -> bool:
        return self.offset == len(self.raw)


def load_weights(path: str, into: Optional[Model] = None, name: str = "") -> Model:
    """
    Reads a file written by ``save_weights``.

    :param path: The weight file.
    :param into: If given, the file must hold the same architecture; its weights are replaced.
    :param name: Report identifier of the returned model.
    """
    with open(path, "rb") as weights_fp:
        reader = BinaryReader(weights_fp.read(), path)
    if reader.take(4) != WEIGHTS_MAGIC:
        raise FormatError(f'"{path}" is not a weight file (bad magic)')
    arch_id = reader.string()
    num_classes = reader.u32()
    if arch_id not in ARCHITECTURES:
        raise FormatError(f'"{path}" names unknown architecture {arch_id!r}')
    if into is not None and into.arch_id != arch_id:
        raise UsageError(f'"{path}" holds {arch_id}, cannot load into {into.arch_id}')
    tensors: Dict[str, np.ndarray] = {}
    while not reader.exhausted:
        tensor_name = reader.string()
        dims = tuple(reader.u32() for _ in range(reader.u32()))
        if tensor_name in tensors:
            raise FormatError(f'"{path}" lists {tensor_name} twice')
        tensors[tensor_name] = reader.array(dims)
    try:
        mean, std = tensors.pop("norm.mean"), tensors.pop("norm.std")
    except KeyError as error:
        raise FormatError(f'"{path}" lacks normalization constants') from error
    expected = dict(ARCHITECTURES[arch_id].layout(mean.shape[0], num_classes))
    if set(expected) != set(tensors) or any(tensors[key].shape != shape for key, shape in expected.items()):
        raise FormatError(f'"{path}" does not match the {arch_id} parameter layout')
    weights = {key: Tensor(tensors[key].copy(), name=key) for key in expected}
    if into is not None:
        into.weights = weights
        into.mean, into.std, into.num_classes = mean, std, num_classes
        return into
    return Model(arch_id, num_classes, weights, mean, std, name=name)


def weight_path(model_dir: str, arch_id: str, seed: int) -> str:
    """
    Canonical weight file of a trained model: ``<model_dir>/<arch>_s<seed>.mzw``.
    """
    return os.path.join(model_dir, f"{arch_id}_s{seed}.mzw")


def load_zoo(model_dir: str, arch_ids: List[str], seed: int, suffix: str = "") -> List[Model]:
    """
    Loads the trained models of ``arch_ids``.

    :param suffix: Appended to the report names, e.g. to tell second-seed siblings apart.
    :raises UsageError: Listing the ``train`` commands for every missing weight file.
    """
    missing = [arch_id for arch_id in arch_ids if not os.path.isfile(weight_path(model_dir, arch_id, seed))]
    if missing:
        commands = "\n".join(
            f"  transfer-attack-tools train --arch {arch_id} --seed {seed} --out {model_dir}" for arch_id in missing
        )
        raise UsageError(f"Missing trained models, run:\n{commands}")
    return [
        load_weights(weight_path(model_dir, arch_id, seed), name=f"{arch_id}{suffix}") for arch_id in arch_ids
    ]
