"""Training losses with analytic gradients.

Each ``*_grad`` function returns ``(value, gradient)`` with the gradient
taken with respect to the first argument.
"""

from __future__ import annotations

from dataclasses import astuple, dataclass, fields
from typing import Callable

import numpy as np

from .errors import LengthMismatchError, NonFiniteError, OutOfRangeError, ShapeMismatchError
from .geometry import SampleGrid
from .overlap import WidthModel, lane_iou_grad

BCE_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    w_reg: float = 1.0
    w_iou: float = 1.0
    w_cls: float = 1.0
    w_fid: float = 1.0
    w_seg: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) >= 0:
                raise OutOfRangeError(f"{f.name} must be >= 0")


@dataclass(frozen=True)
class LossTerms:
    reg: float = 0.0
    iou: float = 0.0
    cls: float = 0.0
    fid: float = 0.0
    seg: float = 0.0


def _pair(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise LengthMismatchError(f"pred {pred.shape} vs target {target.shape}")
    if pred.size == 0:
        raise LengthMismatchError("need at least one element")
    return pred, target


def smooth_l1_grad(pred, target):
    pred, target = _pair(pred, target)
    d = pred - target
    ad = np.abs(d)
    quad = ad < 1.0
    val = np.where(quad, 0.5 * d * d, ad - 0.5).mean()
    grad = np.where(quad, d, np.sign(d)) / d.size
    return float(val), grad


def smooth_l1(pred, target) -> float:
    return smooth_l1_grad(pred, target)[0]


def iou_loss_arrays(xs, valid, gt_xs, gt_valid, width: WidthModel, dy: float):
    """``1 - signed IoU`` and its gradient with respect to ``xs``."""
    iou, g = lane_iou_grad(xs, valid, gt_xs, gt_valid, width, dy, signed=True)
    return 1.0 - iou, -g


def iou_loss_grad(pred, gt, width: WidthModel, grid: SampleGrid):
    val, g = iou_loss_arrays(pred.xs, pred.valid_mask(grid), gt.xs, gt.valid_mask(grid),
                             width, grid.spacing)
    return float(val), g


def iou_loss(pred, gt, width: WidthModel, grid: SampleGrid) -> float:
    return iou_loss_grad(pred, gt, width, grid)[0]


def bce_grad(pred, target):
    """Elementwise BCE; the gradient is zero where ``pred`` was clipped."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    p = np.clip(pred, BCE_EPS, 1.0 - BCE_EPS)
    val = -(target * np.log(p) + (1.0 - target) * np.log1p(-p))
    inside = (pred >= BCE_EPS) & (pred <= 1.0 - BCE_EPS)
    grad = np.where(inside, (p - target) / (p * (1.0 - p)), 0.0)
    return val, grad


def bce(pred, target):
    val, _ = bce_grad(pred, target)
    return float(val) if val.ndim == 0 else val


def fidelity_loss_grad(q_hat, q, positives, negatives):
    """Mean BCE over positives plus mean BCE over negatives."""
    q_hat, q = _pair(q_hat, q)
    total = 0.0
    grad = np.zeros_like(q_hat)
    for idx in (positives, negatives):
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size == 0:
            continue
        val, g = bce_grad(q_hat[idx], q[idx])
        total += float(val.mean())
        np.add.at(grad, idx, g / idx.size)
    return total, grad


def fidelity_loss(q_hat, q, positives, negatives) -> float:
    return fidelity_loss_grad(q_hat, q, positives, negatives)[0]


def stage_average(values) -> float:
    """Arithmetic mean of per-stage fidelity losses."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise LengthMismatchError("need at least one stage")
    return float(values.mean())


def seg_ce_grad(logits, labels):
    """Mean per-pixel softmax cross-entropy over ``(P, C)`` logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeMismatchError(f"logits {logits.shape} vs labels {labels.shape}")
    n, c = logits.shape
    if np.any(labels < 0) or np.any(labels >= c):
        raise OutOfRangeError(f"labels must lie in [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    val = (lse - z[rows, labels]).mean()
    grad = np.exp(z - lse[:, None])
    grad[rows, labels] -= 1.0
    return float(val), grad / n


def seg_ce(logits, labels) -> float:
    return seg_ce_grad(logits, labels)[0]


def total_loss(terms, weights: LossWeights) -> float:
    """Weighted sum over (reg, iou, cls, fid, seg)."""
    vals = astuple(terms) if isinstance(terms, LossTerms) else tuple(terms)
    if len(vals) != 5:
        raise LengthMismatchError(f"expected 5 loss terms, got {len(vals)}")
    if not all(np.isfinite(vals)):
        raise NonFiniteError(f"non-finite loss term in {vals}")
    return float(sum(w * v for w, v in zip(astuple(weights), vals)))


def finite_diff_check(fn: Callable, x, eps: float = 1e-6, grad=None,
                      floor: float = 1e-8) -> float:
    """Compare an analytic gradient with central differences.

    ``fn(x)`` returns the value, or ``(value, gradient)`` when ``grad`` is
    not supplied.  The error is measured in the max norm relative to the
    numerical gradient, ``max|a - n| / max(max|n|, floor)``, so coordinates
    whose true derivative is near zero are not dominated by difference
    roundoff.
    """
    if not eps > 0:
        raise OutOfRangeError("eps must be positive")
    x = np.array(x, dtype=np.float64)

    def value(z):
        v = fn(z)
        return v[0] if isinstance(v, tuple) else v

    analytic = fn(x.copy())[1] if grad is None else grad
    analytic = np.asarray(analytic, dtype=np.float64).reshape(x.shape)
    numeric = np.empty_like(x)
    flat = x.reshape(-1)
    out = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = value(x.copy())
        flat[i] = orig - eps
        fm = value(x.copy())
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"non-finite evaluation at coordinate {i}")
        out[i] = (fp - fm) / (2.0 * eps)
    if not np.all(np.isfinite(analytic)):
        raise NonFiniteError("non-finite analytic gradient")
    scale = max(float(np.abs(numeric).max(initial=0.0)), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)
