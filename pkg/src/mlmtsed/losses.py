"""Sequential classification, distance and confidence losses.

All three take a target and a prediction shaped ``[..., T, C, 3]`` (any
leading batch axes), average over ``T`` and sum over classes and batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .annotation import SegmentTarget
from .errors import EmptyBatch, ShapeMismatch

BCE_EPS = 1e-7
IOU_TINY = 1e-12


@dataclass
class LossBreakdown:
    class_loss: float
    dist_loss: float
    conf_loss: float
    total: float
    tensor: ad.Tensor | None = None


def _prep(target, pred):
    if isinstance(target, SegmentTarget):
        target = target.values
    target = np.asarray(target, dtype=np.float64)
    pred = ad.as_tensor(pred)
    if target.shape != pred.shape or target.ndim < 3 or target.shape[-1] != 3:
        raise ShapeMismatch(f"target {target.shape} vs prediction {pred.shape}")
    return target, pred, target.shape[-3]


def class_loss(target, pred) -> ad.Tensor:
    target, pred, T = _prep(target, pred)
    y = target[..., 0]
    y_hat = ad.clip(pred[..., 0], BCE_EPS, 1.0 - BCE_EPS)
    bce = ad.add(ad.mul(-y, ad.log(y_hat)), ad.mul(-(1.0 - y), ad.log(ad.sub(1.0, y_hat))))
    return ad.mul(ad.tsum(bce), 1.0 / T)


def dist_loss(target, pred) -> ad.Tensor:
    """Squared onset/offset distance error, inactive frames included."""
    target, pred, T = _prep(target, pred)
    err = ad.square(ad.sub(target[..., 1:], pred[..., 1:]))
    return ad.mul(ad.tsum(err), 1.0 / T)


def boundary_iou(target, pred) -> ad.Tensor:
    """Per-cell (min(p, p^) + min(q, q^)) / (max(p, p^) + max(q, q^)), 0/0 -> 0."""
    target, pred, _ = _prep(target, pred)
    p, q = target[..., 1], target[..., 2]
    p_hat, q_hat = pred[..., 1], pred[..., 2]
    inter = ad.add(ad.minimum(p, p_hat), ad.minimum(q, q_hat))
    union = ad.add(ad.maximum(p, p_hat), ad.maximum(q, q_hat))
    return ad.safe_div(inter, union, IOU_TINY)


def conf_loss(target, pred) -> ad.Tensor:
    target, pred, T = _prep(target, pred)
    iou = boundary_iou(target, pred)
    return ad.mul(ad.tsum(ad.square(ad.sub(target[..., 0], iou))), 1.0 / T)


def total_loss(targets, preds=None) -> LossBreakdown:
    """Unweighted sum of the three losses over a batch.

    Accepts either stacked ``targets``/``preds`` with a leading batch axis,
    or a single sequence of ``(target, pred)`` pairs.
    """
    if preds is None:
        pairs = list(targets)
        if not pairs:
            raise EmptyBatch("total_loss needs at least one sample")
        targets = np.stack([t.values if isinstance(t, SegmentTarget) else np.asarray(t) for t, _ in pairs])
        preds = ad.stack([ad.as_tensor(p) for _, p in pairs])
    else:
        targets = np.asarray(targets.values if isinstance(targets, SegmentTarget) else targets)
        if targets.ndim < 3 or targets.size == 0:
            raise EmptyBatch("total_loss needs at least one sample")
    lc = class_loss(targets, preds)
    ld = dist_loss(targets, preds)
    lf = conf_loss(targets, preds)
    total = ad.add(ad.add(lc, ld), lf)
    return LossBreakdown(lc.item(), ld.item(), lf.item(), total.item(), total)
