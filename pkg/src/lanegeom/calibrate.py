"""Confidence fusion and ranking diagnostics.

The fused reliability score is ``p * (beta0 + beta1 * q)``: classification
confidence scaled by an affine function of predicted geometric fidelity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConstantSeriesError, LengthMismatchError, NonFiniteError, OutOfRangeError


@dataclass(frozen=True)
class CriConfig:
    beta0: float = 0.4
    beta1: float = 0.6

    def __post_init__(self):
        if self.beta0 < 0 or self.beta1 < 0 or self.beta0 + self.beta1 <= 0:
            raise OutOfRangeError(f"need beta0, beta1 >= 0 with positive sum, got "
                                  f"({self.beta0}, {self.beta1})")


@dataclass(frozen=True)
class ScoredCandidate:
    p: float
    q: float
    cri: float
    ideal: float | None = None


def softmax2(z0: float, z1: float) -> float:
    """Probability of the positive class from a pair of logits."""
    if not (math.isfinite(z0) and math.isfinite(z1)):
        raise NonFiniteError(f"logits must be finite, got ({z0}, {z1})")
    d = z1 - z0
    if d >= 0:
        return 1.0 / (1.0 + math.exp(-d))
    e = math.exp(d)
    return e / (1.0 + e)


def _check_unit(name, x):
    x = np.asarray(x, dtype=np.float64)
    if np.any(~np.isfinite(x)) or np.any(x < 0) or np.any(x > 1):
        raise OutOfRangeError(f"{name} must lie in [0, 1]")
    return x


def cri(p, q, cfg: CriConfig):
    """Fused score; accepts scalars or arrays."""
    p = _check_unit("p", p)
    q = _check_unit("q", q)
    out = p * (cfg.beta0 + cfg.beta1 * q)
    return float(out) if out.ndim == 0 else out


def ideal_score(label, q):
    return np.asarray(label) * np.asarray(q, dtype=np.float64) if np.ndim(label) else label * q


def score_candidate(p: float, q: float, cfg: CriConfig, label: int | None = None,
                    q_true: float | None = None) -> ScoredCandidate:
    ideal = None if label is None or q_true is None else float(ideal_score(label, q_true))
    return ScoredCandidate(p, q, cri(p, q, cfg), ideal)


def pearson(x, y) -> float:
    """Sample Pearson correlation, two-pass (center first, then sum)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise LengthMismatchError(f"series shapes differ: {x.shape} vs {y.shape}")
    if x.size < 2:
        raise LengthMismatchError("need at least 2 samples")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        raise ConstantSeriesError("correlation undefined for a constant series")
    return float(np.dot(dx, dy) / math.sqrt(sxx * syy))


@dataclass(frozen=True)
class RankingQuality:
    pearson: float | None
    regret_at_k: float
    k: int
    error: str | None = None


def ranking_quality(scores, ideal, k: int = 10) -> RankingQuality:
    """Correlation with the ideal score and top-k regret.

    Regret is the mean ideal score lost by taking the top ``k`` by ``scores``
    instead of the top ``k`` by ``ideal``.  A constant series yields
    ``pearson=None`` with ``error`` set; regret is still computed.
    """
    scores = np.asarray(scores, dtype=np.float64)
    ideal = np.asarray(ideal, dtype=np.float64)
    if scores.shape != ideal.shape or scores.size < 2:
        raise LengthMismatchError("scores and ideal need equal lengths >= 2")
    k = max(1, min(k, scores.size))
    best = np.sort(ideal)[::-1][:k].sum()
    picked = ideal[np.argsort(-scores, kind="stable")[:k]].sum()
    regret = float((best - picked) / k)
    try:
        r = pearson(scores, ideal)
        err = None
    except ConstantSeriesError as exc:
        r, err = None, str(exc)
    return RankingQuality(r, regret, k, err)
