"""Training-time label assignment between candidates and ground-truth lanes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import OutOfRangeError, ShapeMismatchError

EPS = 1e-7


@dataclass(frozen=True)
class AssignConfig:
    cls_weight: float = 1.0      # lambda
    top_t: int = 4
    k_max: int = 4

    def __post_init__(self):
        if self.cls_weight < 0:
            raise OutOfRangeError("cls_weight must be >= 0")
        if not 1 <= self.k_max <= self.top_t:
            raise OutOfRangeError(f"need 1 <= k_max <= top_t, got {self.k_max}, {self.top_t}")


@dataclass(eq=False)
class AssignmentResult:
    positives: np.ndarray
    negatives: np.ndarray
    matched_gt: dict[int, int] = field(default_factory=dict)
    labels: np.ndarray = None
    soft_labels: np.ndarray = None

    def same_as(self, other: "AssignmentResult") -> bool:
        return (np.array_equal(self.positives, other.positives)
                and np.array_equal(self.negatives, other.negatives)
                and self.matched_gt == other.matched_gt
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.soft_labels, other.soft_labels))


def classification_cost(cls_conf) -> np.ndarray:
    return -np.log(np.maximum(np.asarray(cls_conf, dtype=np.float64), EPS))


def cost_matrix(ious, cls_conf, cfg: AssignConfig) -> np.ndarray:
    """``c[j, k] = -iou[j, k] + lambda * (-log p_j)``."""
    ious = np.asarray(ious, dtype=np.float64)
    cls_conf = np.asarray(cls_conf, dtype=np.float64)
    if ious.ndim != 2 or cls_conf.shape != (ious.shape[0],):
        raise ShapeMismatchError(f"ious {ious.shape} vs cls_conf {cls_conf.shape}")
    return -ious + cfg.cls_weight * classification_cost(cls_conf)[:, None]


def dynamic_k(ious: np.ndarray, cfg: AssignConfig) -> np.ndarray:
    """Per-GT positive count: rounded sum of the column's top IoUs."""
    t = min(cfg.top_t, ious.shape[0])
    top = -np.sort(-ious, axis=0)[:t]
    k = np.floor(top.sum(axis=0) + 0.5).astype(int)
    return np.clip(k, 1, cfg.k_max)


def dynamic_assign(cost, ious, cfg: AssignConfig) -> AssignmentResult:
    """Pick the ``k`` lowest-cost candidates per GT column.

    A candidate claimed by several GTs goes to the one where its cost is
    lowest (ties to the lower GT index).  Soft labels are the matched IoU
    for positives and 0 elsewhere.
    """
    cost = np.asarray(cost, dtype=np.float64)
    ious = np.asarray(ious, dtype=np.float64)
    if cost.shape != ious.shape or cost.ndim != 2:
        raise ShapeMismatchError(f"cost {cost.shape} vs ious {ious.shape}")
    n_priors, n_gts = cost.shape
    labels = np.zeros(n_priors, dtype=np.int64)
    soft = np.zeros(n_priors)
    matched: dict[int, int] = {}
    if n_gts and n_priors:
        ks = dynamic_k(ious, cfg)
        claim = np.zeros((n_priors, n_gts), dtype=bool)
        for g in range(n_gts):
            # stable sort keeps the lower prior index on equal cost
            order = np.argsort(cost[:, g], kind="stable")
            claim[order[:ks[g]], g] = True
        for j in np.flatnonzero(claim.any(axis=1)):
            gs = np.flatnonzero(claim[j])
            g = int(gs[np.argmin(cost[j, gs])])  # argmin returns the first minimum
            matched[int(j)] = g
            labels[j] = 1
            soft[j] = np.clip(ious[j, g], 0.0, 1.0)
    positives = np.flatnonzero(labels == 1)
    negatives = np.flatnonzero(labels == 0)
    return AssignmentResult(positives, negatives, matched, labels, soft)
