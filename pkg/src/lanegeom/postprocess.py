"""Inference post-processing: score filtering, offset modulation, lane NMS
and decoding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calibrate import CriConfig
from .errors import OutOfRangeError
from .geometry import LanePrior, SampleGrid, apply_point_update, decode_polyline
from .overlap import WidthModel, pairwise_iou
from .refine import ModulationConfig, modulate

SCORE_MODES = ("cls_only", "cri")


@dataclass(frozen=True)
class PostprocessConfig:
    score_threshold: float = 0.4   # tau
    nms_iou_threshold: float = 0.5
    top_k: int = 4
    score_mode: str = "cri"

    def __post_init__(self):
        if self.top_k < 1:
            raise OutOfRangeError("top_k must be >= 1")
        if not 0.0 < self.nms_iou_threshold <= 1.0:
            raise OutOfRangeError("nms_iou_threshold must lie in (0, 1]")
        if self.score_threshold < 0:
            raise OutOfRangeError("score_threshold must be >= 0")
        if self.score_mode not in SCORE_MODES:
            raise OutOfRangeError(f"score_mode must be one of {SCORE_MODES}")


@dataclass(frozen=True)
class Candidate:
    index: int
    prior: LanePrior
    score: float


@dataclass(frozen=True)
class Detection:
    points: np.ndarray   # (M, 2) image (x, y)
    score: float
    p: float
    q: float
    index: int = -1


def candidate_score(prior: LanePrior, mode: str, cri_cfg: CriConfig) -> float:
    if mode == "cls_only":
        return float(prior.p)
    return float(prior.p * (cri_cfg.beta0 + cri_cfg.beta1 * prior.q))


def filter_candidates(priors, cfg: PostprocessConfig, cri_cfg: CriConfig,
                      indices=None) -> list[Candidate]:
    """Score, drop those below ``tau``, sort by score then prior index."""
    if indices is None:
        indices = range(len(priors))
    out = []
    for i, prior in zip(indices, priors):
        s = candidate_score(prior, cfg.score_mode, cri_cfg)
        if s >= cfg.score_threshold:
            out.append(Candidate(int(i), prior, s))
    out.sort(key=lambda c: (-c.score, c.index))
    return out


def nms(candidates, width: WidthModel, cfg: PostprocessConfig, grid: SampleGrid) -> list[Candidate]:
    """Greedy suppression on unsigned LaneIoU, then truncation to ``top_k``.

    ``candidates`` must already be sorted by descending score.
    """
    n = len(candidates)
    if n == 0:
        return []
    xs = np.stack([c.prior.xs for c in candidates])
    va = np.stack([c.prior.valid_mask(grid) for c in candidates])
    ious = pairwise_iou(xs, va, xs, va, width, grid.spacing)
    alive = np.ones(n, dtype=bool)
    kept = []
    for i in range(n):
        if not alive[i]:
            continue
        kept.append(candidates[i])
        if len(kept) == cfg.top_k:
            break
        alive[i + 1:] &= ious[i, i + 1:] < cfg.nms_iou_threshold
    return kept


def refine_prior(prior: LanePrior, mod_cfg: ModulationConfig, use_refine: bool = True) -> LanePrior:
    """Apply the modulated refinement offsets carried by ``prior``."""
    if not use_refine or prior.refine_offsets is None:
        return prior
    delta = modulate(prior.refine_offsets, prior.q, mod_cfg)
    return apply_point_update(prior, np.zeros_like(prior.xs), delta)


def run_pipeline(priors, grid: SampleGrid, width: WidthModel, cfg: PostprocessConfig,
                 cri_cfg: CriConfig, mod_cfg: ModulationConfig,
                 use_refine: bool = True) -> list[Detection]:
    """filter -> modulate and apply offsets -> NMS -> decode.

    Candidates with fewer than two valid rows cannot be drawn and are
    dropped before scoring.
    """
    drawable = [i for i, p in enumerate(priors) if p.valid_block(grid)[1] >= 2]
    survivors = filter_candidates([priors[i] for i in drawable], cfg, cri_cfg, drawable)
    refined = [Candidate(c.index, refine_prior(c.prior, mod_cfg, use_refine), c.score)
               for c in survivors]
    kept = nms(refined, width, cfg, grid)
    return [Detection(decode_polyline(c.prior, grid), c.score, c.prior.p, c.prior.q, c.index)
            for c in kept]
