"""
Minimal dense-tensor arithmetic with reverse-mode differentiation.

The module knows a fixed set of primitives that is enough to express the four model architectures of
``model_zoo``, the four attack losses of ``losses`` and the input transformations of ``attack_engine``. Values are
numpy arrays in row-major order with channels-first layout (``C,H,W``); every primitive also accepts a leading batch
axis.

Recording works like a tape. Primitives executed inside ``with ComputeGraph() as graph:`` whose inputs require
gradients append one node to ``graph``; ``backward(graph, output)`` walks the tape in exact reverse order. Outside of
any graph the primitives only compute forward values, which is what inference uses.
"""

import threading
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from transfer_attack_tools.utils.errors import ShapeError, UsageError

_STATE = threading.local()


class Tensor:
    """
    Dense n-dimensional float array with an optional gradient slot.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        """
        :param data: Anything numpy can turn into an array. float64 arrays keep their precision, everything else
                     becomes float32.
        :param requires_grad: Whether ``backward`` should fill the gradient slot of this tensor.
        :param name: Optional name, used for weights.
        """
        array = np.asarray(data)
        if array.dtype not in (np.float32, np.float64):
            array = array.astype(np.float32)
        self.data: np.ndarray = np.ascontiguousarray(array)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        """
        :return: The value of a single-element tensor as Python float.
        """
        if self.data.size != 1:
            raise UsageError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


class Node:
    """
    One recorded primitive application.
    """

    # pylint: disable=R0903

    __slots__ = ("kind", "inputs", "output", "params", "backward_fn")

    def __init__(self, kind: str, inputs: Tuple[Tensor, ...], output: Tensor, params: dict, backward_fn: Callable):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.params = params
        self.backward_fn = backward_fn


class ComputeGraph:
    """
    Ordered list of op nodes. The list order is a topological order because nodes are appended while the forward pass
    executes.
    """

    def __init__(self):
        self.nodes: List[Node] = []

    def __enter__(self) -> "ComputeGraph":
        _graph_stack().append(self)
        return self

    def __exit__(self, exc_type, exc_value, traceback):
        _graph_stack().pop()
        return False

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def kinds(self) -> List[str]:
        return [node.kind for node in self.nodes]

    def count(self, kind: str) -> int:
        """
        :param kind: Primitive name such as ``"add"`` or ``"concat"``.
        :return: How often the primitive was recorded.
        """
        return sum(1 for node in self.nodes if node.kind == kind)

    def leaves(self) -> List[Tensor]:
        """
        :return: Tensors that require gradients and were not produced by a node of this graph, in first-use order.
        """
        produced = {id(node.output) for node in self.nodes}
        seen = set()
        result = []
        for node in self.nodes:
            for tensor in node.inputs:
                if tensor.requires_grad and id(tensor) not in produced and id(tensor) not in seen:
                    seen.add(id(tensor))
                    result.append(tensor)
        return result


def _graph_stack() -> List[ComputeGraph]:
    if not hasattr(_STATE, "graphs"):
        _STATE.graphs = []
    return _STATE.graphs


def current_graph() -> Optional[ComputeGraph]:
    """
    :return: The innermost active graph of the calling thread or ``None``.
    """
    stack = _graph_stack()
    return stack[-1] if stack else None


def _emit(op_kind: str, inputs: Sequence[Tensor], data: np.ndarray, backward_fn: Callable, **params) -> Tensor:
    requires_grad = any(tensor.requires_grad for tensor in inputs)
    out = Tensor(data, requires_grad=requires_grad)
    graph = current_graph()
    if graph is not None and requires_grad:
        graph.record(Node(op_kind, tuple(inputs), out, params, backward_fn))
    return out


def backward(graph: ComputeGraph, output: Tensor) -> List[Tensor]:
    """
    Reverse-mode sweep over ``graph`` starting at the scalar ``output``.

    Gradient slots of every tensor touched by the graph are reset first, so calling this twice on the same graph
    yields bitwise-identical gradients.

    :param graph: The graph the output was recorded in.
    :param output: Scalar tensor to differentiate.
    :return: The leaves of the graph with their ``grad`` slots filled.
    """
    if output.size != 1:
        raise UsageError(f"backward needs a scalar output, got shape {output.shape}")
    for node in graph.nodes:
        node.output.grad = None
        for tensor in node.inputs:
            if tensor.requires_grad:
                tensor.grad = None
    output.grad = np.ones_like(output.data)
    for node in reversed(graph.nodes):
        upstream = node.output.grad
        if upstream is None:
            continue
        for tensor, grad in zip(node.inputs, node.backward_fn(upstream)):
            if grad is None or not tensor.requires_grad:
                continue
            grad = np.array(grad, dtype=tensor.data.dtype).reshape(tensor.shape)
            tensor.grad = grad if tensor.grad is None else tensor.grad + grad
    return graph.leaves()


def _needs(tensor: Optional[Tensor]) -> bool:
    return tensor is not None and tensor.requires_grad


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# Layers


def conv2d(
    input: Tensor,  # pylint: disable=redefined-builtin
    kernel: Tensor,
    stride: int = 1,
    padding: int = 0,
    bias: Optional[Tensor] = None,
) -> Tensor:
    """
    2-D cross-correlation.

    :param input: ``[C_in,H,W]`` or ``[B,C_in,H,W]``.
    :param kernel: ``[C_out,C_in,kH,kW]``.
    :param stride: Step between windows, at least 1.
    :param padding: Zero padding on every spatial border.
    :param bias: Optional ``[C_out]`` added to every output position.
    :return: ``[C_out,H',W']`` (or batched) with ``H' = (H + 2*padding - kH) // stride + 1``.
    """
    if stride < 1 or padding < 0:
        raise UsageError(f"conv2d: stride must be >= 1 and padding >= 0, got {stride} and {padding}")
    unbatched = input.data.ndim == 3
    x = input.data[None] if unbatched else input.data
    if x.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError("conv2d", f"expected [B,C,H,W] input and 4-d kernel, got {input.shape} and {kernel.shape}")
    out_channels, in_channels, kernel_h, kernel_w = kernel.shape
    if x.shape[1] != in_channels:
        raise ShapeError("conv2d", f"input has {x.shape[1]} channels but kernel expects {in_channels}")
    height, width = x.shape[2], x.shape[3]
    if kernel_h > height + 2 * padding or kernel_w > width + 2 * padding:
        raise ShapeError("conv2d", f"kernel {kernel_h}x{kernel_w} larger than padded input {height}x{width}")
    if bias is not None and bias.shape != (out_channels,):
        raise ShapeError("conv2d", f"bias shape {bias.shape} does not match {out_channels} output channels")

    padded = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    windows = sliding_window_view(padded, (kernel_h, kernel_w), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(windows, kernel.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out_h, out_w = out.shape[2], out.shape[3]

    def backward_fn(grad):
        grad = grad[None] if unbatched else grad
        grad_input = grad_kernel = grad_bias = None
        if input.requires_grad:
            cols = np.tensordot(grad, kernel.data, axes=([1], [0]))
            grad_padded = np.zeros_like(padded)
            for i in range(kernel_h):
                for j in range(kernel_w):
                    grad_padded[
                        :, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride
                    ] += cols[..., i, j].transpose(0, 3, 1, 2)
            grad_input = grad_padded[:, :, padding : padding + height, padding : padding + width]
            if unbatched:
                grad_input = grad_input[0]
        if kernel.requires_grad:
            grad_kernel = np.tensordot(grad, windows, axes=([0, 2, 3], [0, 2, 3]))
        if _needs(bias):
            grad_bias = grad.sum(axis=(0, 2, 3))
        return grad_input, grad_kernel, grad_bias

    inputs = [input, kernel] + ([bias] if bias is not None else [])
    return _emit(
        "conv2d", inputs, out[0] if unbatched else out, backward_fn, stride=stride, padding=padding
    )


def dense(input: Tensor, weight: Tensor, bias: Tensor) -> Tensor:  # pylint: disable=redefined-builtin
    """
    Affine layer ``out[i] = sum_j weight[i,j] * input[j] + bias[i]``.

    :param input: ``[n]`` or ``[B,n]``.
    :param weight: ``[m,n]``.
    :param bias: ``[m]``.
    """
    if weight.data.ndim != 2 or input.data.ndim not in (1, 2) or input.shape[-1] != weight.shape[1]:
        raise ShapeError("dense", f"input {input.shape} does not fit weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError("dense", f"bias {bias.shape} does not fit weight {weight.shape}")
    out = input.data @ weight.data.T + bias.data

    def backward_fn(grad):
        x_2d = input.data.reshape(-1, weight.shape[1])
        grad_2d = grad.reshape(-1, weight.shape[0])
        grad_input = grad @ weight.data if input.requires_grad else None
        grad_weight = grad_2d.T @ x_2d if weight.requires_grad else None
        grad_bias = grad_2d.sum(axis=0) if bias.requires_grad else None
        return grad_input, grad_weight, grad_bias

    return _emit("dense", (input, weight, bias), out, backward_fn)


def relu(input: Tensor) -> Tensor:  # pylint: disable=redefined-builtin
    mask = input.data > 0
    return _emit("relu", (input,), np.where(mask, input.data, 0).astype(input.data.dtype), lambda grad: (grad * mask,))


def pool2d(input: Tensor, kind: str, window: int, stride: Optional[int] = None) -> Tensor:  # pylint: disable=W0622
    """
    Max or average pooling over square windows.

    Max pooling routes the gradient to the first maximum of each window in row-major order.

    :param input: ``[C,H,W]`` or ``[B,C,H,W]``.
    :param kind: ``"max"`` or ``"avg"``.
    :param window: Side of the square window.
    :param stride: Defaults to ``window``.
    """
    if kind not in ("max", "avg"):
        raise UsageError(f"pool2d: unknown kind {kind!r}")
    stride = window if stride is None else stride
    if window < 1 or stride < 1:
        raise UsageError("pool2d: window and stride must be >= 1")
    unbatched = input.data.ndim == 3
    x = input.data[None] if unbatched else input.data
    if x.ndim != 4:
        raise ShapeError("pool2d", f"expected [B,C,H,W] input, got {input.shape}")
    if window > x.shape[2] or window > x.shape[3]:
        raise ShapeError("pool2d", f"window {window} exceeds spatial extent {x.shape[2]}x{x.shape[3]}")

    windows = sliding_window_view(x, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    out_h, out_w = windows.shape[2], windows.shape[3]
    if kind == "avg":
        out = windows.mean(axis=(4, 5), dtype=x.dtype)
        argmax = None
    else:
        flat = windows.reshape(windows.shape[:4] + (window * window,))
        argmax = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]

    def backward_fn(grad):
        grad = grad[None] if unbatched else grad
        grad_input = np.zeros_like(x)
        for i in range(window):
            for j in range(window):
                if argmax is None:
                    contribution = grad / (window * window)
                else:
                    contribution = grad * (argmax == i * window + j)
                grad_input[:, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += contribution
        return (grad_input[0] if unbatched else grad_input,)

    return _emit("pool2d", (input,), out[0] if unbatched else out, backward_fn, kind=kind, window=window, stride=stride)


def add(a: Tensor, b: Tensor) -> Tensor:
    """
    Elementwise sum of two equally shaped tensors (skip connections).
    """
    if a.shape != b.shape:
        raise ShapeError("add", f"shapes differ: {a.shape} vs {b.shape}")
    return _emit("add", (a, b), a.data + b.data, lambda grad: (grad, grad))


def concat(*tensors: Tensor, axis: int = 0) -> Tensor:
    """
    Concatenates tensors that agree on every axis but ``axis``.
    """
    if len(tensors) < 2:
        raise UsageError("concat needs at least two tensors")
    ndim = tensors[0].data.ndim
    axis = axis % ndim if ndim else 0
    for tensor in tensors[1:]:
        if tensor.data.ndim != ndim or any(
            tensor.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis
        ):
            raise ShapeError("concat", f"shapes {tensors[0].shape} and {tensor.shape} differ off axis {axis}")
    out = np.concatenate([tensor.data for tensor in tensors], axis=axis)
    split_points = np.cumsum([tensor.shape[axis] for tensor in tensors])[:-1]

    def backward_fn(grad):
        return tuple(np.split(grad, split_points, axis=axis))

    return _emit("concat", tensors, out, backward_fn, axis=axis)


def reshape(input: Tensor, shape: Tuple[int, ...]) -> Tensor:  # pylint: disable=redefined-builtin
    original = input.shape
    try:
        out = input.data.reshape(shape)
    except ValueError as error:
        raise ShapeError("reshape", f"cannot reshape {original} into {shape}") from error
    return _emit("reshape", (input,), out, lambda grad: (grad.reshape(original),), shape=shape)


def select(input: Tensor, index: int) -> Tensor:  # pylint: disable=redefined-builtin
    """
    Entry ``index`` along the leading axis, e.g. one image of a batch.
    """
    if input.data.ndim == 0 or not 0 <= index < input.shape[0]:
        raise ShapeError("select", f"index {index} outside leading axis of {input.shape}")

    def backward_fn(grad):
        grad_input = np.zeros_like(input.data)
        grad_input[index] = grad
        return (grad_input,)

    return _emit("select", (input,), input.data[index], backward_fn, index=index)


def channel_affine(input: Tensor, scale: np.ndarray, shift: np.ndarray) -> Tensor:  # pylint: disable=W0622
    """
    Per-channel ``x * scale[c] + shift[c]`` with constant coefficients. Models use it to standardize [0,1] pixels
    inside the graph.
    """
    channels = input.shape[-3]
    if scale.shape != (channels,) or shift.shape != (channels,):
        raise ShapeError("channel_affine", f"{channels} channels but coefficients {scale.shape}, {shift.shape}")
    scale_b = scale.astype(input.data.dtype)[:, None, None]
    shift_b = shift.astype(input.data.dtype)[:, None, None]
    return _emit("channel_affine", (input,), input.data * scale_b + shift_b, lambda grad: (grad * scale_b,))


def _resize_matrix(source: int, target: int, dtype) -> np.ndarray:
    # half-pixel centres, edge clamped; source == target gives the identity
    matrix = np.zeros((target, source), dtype=np.float64)
    ratio = source / target
    for i in range(target):
        position = min(max((i + 0.5) * ratio - 0.5, 0.0), source - 1)
        lower = int(np.floor(position))
        upper = min(lower + 1, source - 1)
        weight = position - lower
        matrix[i, lower] += 1.0 - weight
        matrix[i, upper] += weight
    return matrix.astype(dtype)


def resize_bilinear(input: Tensor, out_h: int, out_w: int) -> Tensor:  # pylint: disable=redefined-builtin
    """
    Bilinear resize of the two trailing axes to ``out_h x out_w``.
    """
    if input.data.ndim < 2 or out_h < 1 or out_w < 1:
        raise ShapeError("resize_bilinear", f"cannot resize {input.shape} to {out_h}x{out_w}")
    rows = _resize_matrix(input.shape[-2], out_h, input.data.dtype)
    cols = _resize_matrix(input.shape[-1], out_w, input.data.dtype)
    out = np.matmul(np.matmul(rows, input.data), cols.T)
    return _emit(
        "resize_bilinear",
        (input,),
        out,
        lambda grad: (np.matmul(np.matmul(rows.T, grad), cols),),
        size=(out_h, out_w),
    )


def pad2d(input: Tensor, top: int, left: int, out_h: int, out_w: int) -> Tensor:  # pylint: disable=W0622
    """
    Places ``input`` at offset ``(top, left)`` of a zero canvas of ``out_h x out_w``.
    """
    height, width = input.shape[-2], input.shape[-1]
    if top < 0 or left < 0 or top + height > out_h or left + width > out_w:
        raise ShapeError("pad2d", f"{height}x{width} at ({top},{left}) does not fit {out_h}x{out_w}")
    out = np.zeros(input.shape[:-2] + (out_h, out_w), dtype=input.data.dtype)
    out[..., top : top + height, left : left + width] = input.data
    return _emit(
        "pad2d", (input,), out, lambda grad: (grad[..., top : top + height, left : left + width],), top=top, left=left
    )


# Heads and elementwise arithmetic used by the losses


def softmax(logits: Tensor) -> Tensor:
    """
    Max-subtracted softmax over the last axis.
    """
    if logits.data.ndim == 0 or logits.shape[-1] < 2:
        raise UsageError(f"softmax needs at least two classes, got shape {logits.shape}")
    shifted = np.exp(logits.data - logits.data.max(axis=-1, keepdims=True))
    probs = shifted / shifted.sum(axis=-1, keepdims=True)

    def backward_fn(grad):
        return (probs * (grad - (grad * probs).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", (logits,), probs, backward_fn)


def log_softmax(logits: Tensor) -> Tensor:
    if logits.data.ndim == 0 or logits.shape[-1] < 2:
        raise UsageError(f"log_softmax needs at least two classes, got shape {logits.shape}")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    exps = np.exp(shifted)
    sums = exps.sum(axis=-1, keepdims=True)
    probs = exps / sums

    def backward_fn(grad):
        return (grad - probs * grad.sum(axis=-1, keepdims=True),)

    return _emit("log_softmax", (logits,), shifted - np.log(sums), backward_fn)


def gather(input: Tensor, index: np.ndarray) -> Tensor:  # pylint: disable=redefined-builtin
    """
    Picks entries along the last axis of a ``[B,k]`` tensor; ``index`` is an integer array ``[B,m]``.
    """
    index = np.asarray(index, dtype=np.int64)
    if input.data.ndim != 2 or index.ndim != 2 or index.shape[0] != input.shape[0]:
        raise ShapeError("gather", f"input {input.shape} and index {index.shape} do not line up")
    if index.size and (index.min() < 0 or index.max() >= input.shape[1]):
        raise UsageError(f"gather: index out of range for {input.shape[1]} entries")
    rows = np.arange(input.shape[0])[:, None]
    out = input.data[rows, index]

    def backward_fn(grad):
        grad_input = np.zeros_like(input.data)
        np.add.at(grad_input, (np.broadcast_to(rows, index.shape), index), grad)
        return (grad_input,)

    return _emit("gather", (input,), out, backward_fn)


def reduce_sum(input: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:  # pylint: disable=W0622
    out = input.data.sum(axis=axis, keepdims=keepdims)
    shape = input.shape

    def backward_fn(grad):
        if axis is not None and not keepdims:
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad, shape),)

    return _emit("sum", (input,), out, backward_fn, axis=axis)


def reduce_max(input: Tensor, axis: int = -1) -> Tensor:  # pylint: disable=redefined-builtin
    """
    Maximum along ``axis``; the gradient goes to the first maximal entry.
    """
    argmax = input.data.argmax(axis=axis)
    out = np.take_along_axis(input.data, np.expand_dims(argmax, axis), axis=axis).squeeze(axis)

    def backward_fn(grad):
        grad_input = np.zeros_like(input.data)
        np.put_along_axis(grad_input, np.expand_dims(argmax, axis), np.expand_dims(grad, axis), axis=axis)
        return (grad_input,)

    return _emit("max", (input,), out, backward_fn, axis=axis)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    return _emit("sub", (a, b), out, lambda grad: (_unbroadcast(grad, a.shape), -_unbroadcast(grad, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def backward_fn(grad):
        return _unbroadcast(grad * b.data, a.shape), _unbroadcast(grad * a.data, b.shape)

    return _emit("mul", (a, b), out, backward_fn)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def backward_fn(grad):
        return _unbroadcast(grad / b.data, a.shape), _unbroadcast(-grad * a.data / (b.data * b.data), b.shape)

    return _emit("div", (a, b), out, backward_fn)


def scale(input: Tensor, factor: float) -> Tensor:  # pylint: disable=redefined-builtin
    return _emit("scale", (input,), input.data * input.data.dtype.type(factor), lambda grad: (grad * factor,))


def shift(input: Tensor, offset: float) -> Tensor:  # pylint: disable=redefined-builtin
    return _emit("shift", (input,), input.data + input.data.dtype.type(offset), lambda grad: (grad,))


def neg(input: Tensor) -> Tensor:  # pylint: disable=redefined-builtin
    return _emit("neg", (input,), -input.data, lambda grad: (-grad,))


def exp(input: Tensor) -> Tensor:  # pylint: disable=redefined-builtin
    out = np.exp(input.data)
    return _emit("exp", (input,), out, lambda grad: (grad * out,))


def log(input: Tensor) -> Tensor:  # pylint: disable=redefined-builtin
    return _emit("log", (input,), np.log(input.data), lambda grad: (grad / input.data,))


def sqrt(input: Tensor) -> Tensor:  # pylint: disable=redefined-builtin
    out = np.sqrt(input.data)
    return _emit("sqrt", (input,), out, lambda grad: (grad / (2 * out),))


def square(input: Tensor) -> Tensor:  # pylint: disable=redefined-builtin
    return _emit("square", (input,), input.data * input.data, lambda grad: (2 * grad * input.data,))


def absolute(input: Tensor) -> Tensor:  # pylint: disable=redefined-builtin
    return _emit("abs", (input,), np.abs(input.data), lambda grad: (grad * np.sign(input.data),))


def clamp_min(input: Tensor, floor: float) -> Tensor:  # pylint: disable=redefined-builtin
    """
    ``max(x, floor)``; gradient passes only where ``x > floor``.
    """
    mask = input.data > floor
    out = np.where(mask, input.data, input.data.dtype.type(floor))
    return _emit("clamp_min", (input,), out, lambda grad: (grad * mask,), floor=floor)


def arccosh(input: Tensor) -> Tensor:  # pylint: disable=redefined-builtin
    out = np.arccosh(input.data)

    def backward_fn(grad):
        tiny = np.finfo(input.data.dtype).tiny
        return (grad / np.sqrt(np.maximum(input.data * input.data - 1, tiny)),)

    return _emit("arccosh", (input,), out, backward_fn)
