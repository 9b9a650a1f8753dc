"""
The four targeted attack objectives. Each builds a scalar node over the logits from ``tensor_core`` primitives, so
``tensor_core.backward`` carries the gradient down to the input pixels.

All losses accept ``[k]`` or ``[B,k]`` logits together with one target per row. With ``reduction="sum"`` (default)
they return the batch sum, with ``reduction="none"`` the per-row values ``[B]``.
"""

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from transfer_attack_tools.utils import tensor_core as tc
from transfer_attack_tools.utils.errors import NumericalDomainError, UsageError
from transfer_attack_tools.utils.tensor_core import Tensor

LOSS_KINDS = ("ce", "logit", "po_trip", "cw")

Targets = Union[int, np.ndarray, list]


@dataclass
class LossSpec:
    """
    Loss choice plus its parameters.

    :ivar kind: ``ce``, ``logit``, ``cw`` or ``po_trip``.
    :ivar cw_confidence: C&W confidence ``K``.
    :ivar po_trip_lambda: Weight of the triplet term.
    :ivar triplet_margin: Triplet margin ``gamma``.
    :ivar xi: Stability constant of the Poincare distance.
    """

    kind: str = "logit"
    cw_confidence: float = 0.0
    po_trip_lambda: float = 0.01
    triplet_margin: float = 0.007
    xi: float = 1e-5

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise UsageError(f"Unknown loss {self.kind!r}, valid: {', '.join(LOSS_KINDS)}")
        if self.cw_confidence < 0 or self.po_trip_lambda < 0 or self.triplet_margin < 0:
            raise UsageError("cw_confidence, po_trip_lambda and triplet_margin must be >= 0")
        if self.xi <= 0:
            raise UsageError(f"xi must be > 0, got {self.xi}")

    @property
    def label(self) -> str:
        """
        Name used in reports; C&W carries a non-zero ``K`` in its label.
        """
        if self.kind == "cw" and self.cw_confidence:
            return f"cw_k{self.cw_confidence:g}"
        return self.kind


def _as_rows(logits: Tensor, targets: Targets):
    rows = logits if logits.data.ndim == 2 else tc.reshape(logits, (1,) + logits.shape)
    index = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    if index.shape[0] != rows.shape[0]:
        raise UsageError(f"{rows.shape[0]} logit rows but {index.shape[0]} targets")
    if index.min() < 0 or index.max() >= rows.shape[1]:
        raise UsageError(f"target class outside [0, {rows.shape[1]})")
    return rows, index


def _reduce(values: Tensor, reduction: str) -> Tensor:
    if reduction == "sum":
        return tc.reduce_sum(values)
    if reduction == "none":
        return values
    raise UsageError(f"Unknown reduction {reduction!r}")


def _pick(rows: Tensor, index: np.ndarray) -> Tensor:
    return tc.reshape(tc.gather(rows, index[:, None]), (rows.shape[0],))


def loss_ce(logits: Tensor, target: Targets, reduction: str = "sum") -> Tensor:
    """
    ``-log softmax(logits)[target]``. The gradient w.r.t. the logits is ``softmax - onehot(target)``; its target
    coordinate ``p_t - 1`` vanishes as the target probability saturates.
    """
    rows, index = _as_rows(logits, target)
    return _reduce(tc.neg(_pick(tc.log_softmax(rows), index)), reduction)


def loss_logit(logits: Tensor, target: Targets, reduction: str = "sum") -> Tensor:
    """
    ``-logits[target]``; the gradient w.r.t. the logits is the constant ``-onehot(target)``.
    """
    rows, index = _as_rows(logits, target)
    return _reduce(tc.neg(_pick(rows, index)), reduction)


def loss_cw(logits: Tensor, target: Targets, confidence: float = 0.0, reduction: str = "sum") -> Tensor:
    """
    Targeted C&W hinge ``max(max_{j != t} z_j - z_t, -K)``.

    :param confidence: ``K >= 0``; larger values keep pushing after the target became the top class.
    """
    if confidence < 0:
        raise UsageError(f"C&W confidence must be >= 0, got {confidence}")
    rows, index = _as_rows(logits, target)
    num_classes = rows.shape[1]
    if num_classes < 2:
        raise UsageError("C&W needs at least two classes")
    others = np.array([[j for j in range(num_classes) if j != t] for t in index], dtype=np.int64)
    margin = tc.sub(tc.reduce_max(tc.gather(rows, others), axis=1), _pick(rows, index))
    # relu keeps the linear branch only where it is strictly above -K
    return _reduce(tc.shift(tc.relu(tc.shift(margin, confidence)), -confidence), reduction)


def _cosine_distance(rows: Tensor, index: np.ndarray, l2_norm: Tensor) -> Tensor:
    # D(l, y) = 1 - |l_y| / (||l||_2 * ||y||_2) for a one-hot y
    return tc.shift(tc.neg(tc.div(tc.absolute(_pick(rows, index)), l2_norm)), 1.0)


def loss_po_trip(
    logits: Tensor,
    target: Targets,
    original: Targets,
    po_trip_lambda: float = 0.01,
    margin: float = 0.007,
    xi: float = 1e-5,
    reduction: str = "sum",
) -> Tensor:
    """
    Poincare distance to the target plus a weighted triplet term pushing away from the original class.

    ``u`` is the L1-normalized logit vector, ``v`` the one-hot target with its entry lowered to ``1 - xi``.

    :param original: Clean class of every row.
    :param po_trip_lambda: Triplet weight.
    :param margin: Triplet margin.
    :param xi: Stability constant, also the floor of the norm denominators.
    :raises NumericalDomainError: If ``||u||_2 >= 1`` (one-hot-like logits), the distance is undefined.
    """
    rows, index = _as_rows(logits, target)
    _, original_index = _as_rows(rows, original)
    if np.any(index == original_index):
        raise UsageError("Po+Trip needs target != original")
    count, num_classes = rows.shape
    dtype = rows.data.dtype

    l1_norm = tc.clamp_min(tc.reduce_sum(tc.absolute(rows), axis=1, keepdims=True), xi)
    u = tc.div(rows, l1_norm)
    u_norm_sq = tc.reduce_sum(tc.square(u), axis=1)
    if np.any(u_norm_sq.data >= 1.0):
        raise NumericalDomainError("Poincare distance undefined: normalized logits have ||u||_2 >= 1")

    v = np.zeros((count, num_classes), dtype=dtype)
    v[np.arange(count), index] = 1.0 - xi
    v_norm_sq = (1.0 - xi) ** 2
    distance_sq = tc.reduce_sum(tc.square(tc.sub(u, Tensor(v))), axis=1)
    denominator = tc.scale(tc.shift(tc.neg(u_norm_sq), 1.0), 1.0 - v_norm_sq)
    delta = tc.div(tc.scale(distance_sq, 2.0), denominator)
    poincare = tc.arccosh(tc.shift(delta, 1.0))

    l2_norm = tc.clamp_min(tc.sqrt(tc.reduce_sum(tc.square(rows), axis=1)), xi)
    gap = tc.sub(_cosine_distance(rows, index, l2_norm), _cosine_distance(rows, original_index, l2_norm))
    triplet = tc.relu(tc.shift(gap, margin))
    return _reduce(tc.add(poincare, tc.scale(triplet, po_trip_lambda)), reduction)


def compute_loss(
    spec: LossSpec, logits: Tensor, target: Targets, original: Optional[Targets] = None, reduction: str = "sum"
) -> Tensor:
    """
    Dispatches to the loss named by ``spec``. ``original`` is only needed by Po+Trip.
    """
    if spec.kind == "ce":
        return loss_ce(logits, target, reduction)
    if spec.kind == "logit":
        return loss_logit(logits, target, reduction)
    if spec.kind == "cw":
        return loss_cw(logits, target, spec.cw_confidence, reduction)
    if original is None:
        raise UsageError("Po+Trip needs the original class")
    return loss_po_trip(logits, target, original, spec.po_trip_lambda, spec.triplet_margin, spec.xi, reduction)
