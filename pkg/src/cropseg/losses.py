"""Training losses over probability maps: overlap (soft-IOU) and
cross-entropy, both validity-mask aware, with analytic gradients.

The overlap loss drives up the soft intersection-over-union of every class:
per example m and class k, with sums over that example's valid pixels,

    I = sum_i p_i * g_i
    U = sum_i (p_i + g_i - p_i * g_i)
    loss = sum_k (1 - mean_m I/U)

so its value lives in [0, C]. The gradient at a valid pixel is
-(g*U - I*(1-g)) / (M * U^2) with M the number of contributing examples.
An example with no valid pixels is skipped and M reduced; a class empty in
both prediction and reference (U == 0) counts as perfect overlap with zero
gradient, removing the 0/0 case. Invalid pixels contribute nothing to
values or gradients.

Cross-entropy averages -sum_k g_k*ln(p_k + eps) over valid pixels with
eps = 1e-12 guarding the log.
"""

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import DataError, DimensionError, EmptyBatchError

CE_EPS = 1e-12

LOSS_KINDS = ("iou", "ce")


@dataclass
class LossResult:
    value: float
    grad: np.ndarray
    per_class_iou: np.ndarray = None


@dataclass
class GroundMask:
    """One-hot reference (N,C,S,S) plus per-pixel validity (N,S,S).

    Valid pixels carry exactly one 1 across classes; invalid pixels are
    all-zero, so masking is already baked into the one-hot tensor.
    """

    onehot: np.ndarray
    valid: np.ndarray

    @classmethod
    def from_labels(cls, labels, valid, num_classes):
        labels = np.asarray(labels)
        valid = np.asarray(valid, dtype=bool)
        if labels.shape != valid.shape:
            raise DimensionError(
                f"labels shape {labels.shape} != valid mask shape {valid.shape}"
            )
        if labels.min(initial=0) < 0 or labels.max(initial=0) >= num_classes:
            raise DataError(
                f"label values must lie in [0, {num_classes}), "
                f"got range [{labels.min()}, {labels.max()}]"
            )
        n, s0, s1 = labels.shape
        onehot = np.zeros((n, num_classes, s0, s1), dtype=np.float32)
        ni, ri, ci = np.nonzero(valid)
        onehot[ni, labels[ni, ri, ci], ri, ci] = 1.0
        return cls(onehot=onehot, valid=valid)

    def check(self):
        per_pixel = self.onehot.sum(axis=1)
        if not np.array_equal(per_pixel[self.valid], np.ones(int(self.valid.sum()), dtype=per_pixel.dtype)):
            raise DataError("each valid pixel must have exactly one reference class")
        if per_pixel[~self.valid].any():
            raise DataError("invalid pixels must be all-zero across classes")
        return self


def _check_pair(pred, truth):
    if pred.ndim != 4:
        raise DimensionError(f"prediction map must be rank 4, got rank {pred.ndim}")
    if pred.shape != truth.onehot.shape:
        raise DimensionError(
            f"prediction shape {pred.shape} != reference shape {truth.onehot.shape}"
        )
    if truth.valid.shape != (pred.shape[0],) + pred.shape[2:]:
        raise DimensionError(
            f"valid mask shape {truth.valid.shape} incompatible with prediction {pred.shape}"
        )
    lo, hi = float(pred.min()), float(pred.max())
    if lo < -1e-6 or hi > 1 + 1e-6:
        raise DataError(f"prediction entries must lie in [0,1], got [{lo}, {hi}]")


def iou_loss(pred, truth):
    """Soft-IOU loss, its per-class overlap, and its analytic gradient."""
    _check_pair(pred, truth)
    validf = truth.valid.astype(np.float64)
    kept = truth.valid.reshape(truth.valid.shape[0], -1).any(axis=1)
    m = int(kept.sum())
    if m == 0:
        raise EmptyBatchError("no example in the batch has a valid pixel")
    p = pred.astype(np.float64, copy=False) * validf[:, None]
    g = truth.onehot.astype(np.float64, copy=False)
    pg = p * g
    inter = pg.sum(axis=(2, 3))                  # (N, C)
    union = (p + g - pg).sum(axis=(2, 3))        # (N, C)
    safe_union = np.where(union > 0, union, 1.0)
    ratio = np.where(union > 0, inter / safe_union, 1.0)
    per_class = ratio[kept].mean(axis=0)         # (C,)
    value = float((1.0 - per_class).sum())
    coef = np.where((union > 0) & kept[:, None], 1.0 / (m * safe_union**2), 0.0)
    grad = -(g * union[:, :, None, None] - inter[:, :, None, None] * (1.0 - g))
    grad *= coef[:, :, None, None]
    grad *= validf[:, None]
    return LossResult(value=value, grad=grad.astype(pred.dtype, copy=False),
                      per_class_iou=per_class)


def cross_entropy_loss(pred, truth):
    """Masked mean of -sum_k g_k * ln(p_k + eps) over valid pixels."""
    _check_pair(pred, truth)
    n_valid = int(truth.valid.sum())
    if n_valid == 0:
        raise EmptyBatchError("no valid pixel in the batch")
    p = pred.astype(np.float64, copy=False)
    g = truth.onehot.astype(np.float64, copy=False)
    value = float(-(g * np.log(p + CE_EPS)).sum() / n_valid)
    grad = -(g / (p + CE_EPS)) / n_valid
    return LossResult(value=value, grad=grad.astype(pred.dtype, copy=False))


def loss_through_softmax(logits, truth, kind):
    """Loss of softmax(logits) with the gradient chained back to the logits."""
    if kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")
    probs = ops.softmax_channels(logits)
    inner = iou_loss(probs, truth) if kind == "iou" else cross_entropy_loss(probs, truth)
    grad_logits = ops.softmax_channels_backward(probs, inner.grad)
    return LossResult(value=inner.value, grad=grad_logits,
                      per_class_iou=inner.per_class_iou)


def compute_loss(pred, truth, kind):
    """Dispatch on loss kind for probability-map inputs."""
    if kind == "iou":
        return iou_loss(pred, truth)
    if kind == "ce":
        return cross_entropy_loss(pred, truth)
    raise ValueError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")
