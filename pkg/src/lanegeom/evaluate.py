"""Mask-based lane evaluation.

Each lane is drawn as a thick polyline, predictions are matched one-to-one
to ground truth by maximum total mask IoU, and matched pairs above an IoU
threshold count as true positives.
"""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._raster import polyline_runs, runs_area, runs_intersection, runs_to_mask
from .errors import (
    DegeneratePolylineError,
    EmptyMaskError,
    LengthMismatchError,
    NonFiniteError,
    OutOfRangeError,
    ResolutionMismatchError,
)

RASTER_BATCH = 256


@dataclass(frozen=True)
class EvalConfig:
    mask_width: float = 30.0
    iou_thresholds: tuple = (0.5, 0.75, 0.9)
    eval_resolution: tuple = (320, 800)   # (H, W)
    strict: bool = True                   # TP needs IoU > t rather than >= t

    def __post_init__(self):
        object.__setattr__(self, "iou_thresholds", tuple(float(t) for t in self.iou_thresholds))
        object.__setattr__(self, "eval_resolution", tuple(int(v) for v in self.eval_resolution))
        if self.mask_width < 1:
            raise OutOfRangeError("mask_width must be >= 1")
        if not self.iou_thresholds or any(not 0.0 < t <= 1.0 for t in self.iou_thresholds):
            raise OutOfRangeError("IoU thresholds must lie in (0, 1]")
        if len(self.eval_resolution) != 2 or min(self.eval_resolution) < 1:
            raise OutOfRangeError("eval_resolution must be (H, W) with positive entries")


@dataclass(frozen=True)
class Counts:
    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    def as_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "precision": self.precision,
                "recall": self.recall, "f1": self.f1}


@dataclass
class EvalReport:
    counts: dict            # threshold -> Counts
    frames: int
    wall_time: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def fps(self) -> float:
        return self.frames / self.wall_time if self.wall_time > 0 else 0.0

    def f1(self, threshold: float) -> float:
        return self.counts[threshold].f1

    def to_dict(self, timing: bool = True) -> dict:
        out = {"frames": self.frames,
               "thresholds": {f"{t:.2f}": c.as_dict() for t, c in sorted(self.counts.items())}}
        if timing:
            out["meta"] = {"wall_time_s": self.wall_time, "fps": self.fps, **self.meta}
        return out

    def to_json(self, timing: bool = True) -> str:
        return json.dumps(self.to_dict(timing), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        lines = [f"{'iou':>6} {'tp':>7} {'fp':>7} {'fn':>7} {'prec':>8} {'rec':>8} {'f1':>8}"]
        for t, c in sorted(self.counts.items()):
            lines.append(f"{t:6.2f} {c.tp:7d} {c.fp:7d} {c.fn:7d} "
                         f"{c.precision:8.4f} {c.recall:8.4f} {c.f1:8.4f}")
        lines.append(f"frames: {self.frames}")
        return "\n".join(lines) + "\n"


def _as_polyline(lane) -> np.ndarray:
    pts = getattr(lane, "points", lane)
    pts = np.asarray(pts, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
        raise DegeneratePolylineError(f"polyline needs >= 2 (x, y) points, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise NonFiniteError("polyline has non-finite coordinates")
    if np.all(pts == pts[0]):
        raise DegeneratePolylineError("all polyline points coincide")
    return pts


def rasterize(polyline, width: float, resolution) -> np.ndarray:
    """Boolean ``(H, W)`` mask of pixels whose center lies within
    ``width / 2`` of the polyline."""
    h, w = resolution
    runs = polyline_runs([_as_polyline(polyline)], width / 2.0, h, w)
    return runs_to_mask(runs[0], w)


def mask_iou(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ResolutionMismatchError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        raise EmptyMaskError("both masks are empty")
    return np.count_nonzero(a & b) / union


@dataclass(frozen=True)
class Matching:
    pairs: list       # sorted (row, col) tuples
    total: float


def _solve_square(c: np.ndarray):
    """Shortest augmenting path assignment on a square matrix.

    Returns ``(col_of_row, u, v)`` with ``c[i, j] - u[i] - v[j] >= 0`` and
    equality on matched pairs.
    """
    n = c.shape[0]
    a = c.tolist()
    inf = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    p = [0] * (n + 1)      # p[j]: row matched to column j (1-based, 0 = free)
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            row = a[i0 - 1]
            ui0 = u[i0]
            delta = inf
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = row[j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of_row = [0] * n
    for j in range(1, n + 1):
        col_of_row[p[j] - 1] = j - 1
    return col_of_row, np.array(u[1:]), np.array(v[1:])


def _reroute(tight, col_of_row, row_of_col, fixed_cols, i, j):
    """Re-match so that row ``i`` takes column ``j`` while keeping a perfect
    matching inside ``tight``; rows with ``fixed_cols`` columns stay put."""
    i2 = row_of_col[j]
    j2 = col_of_row[i]
    # augmenting path from row i2 to the freed column j2
    seen = set(fixed_cols) | {j}
    parent = {}
    stack = [i2]
    found = False
    while stack and not found:
        r = stack.pop()
        for c in np.flatnonzero(tight[r]):
            c = int(c)
            if c in seen:
                continue
            seen.add(c)
            parent[c] = r
            if c == j2:
                found = True
                break
            stack.append(row_of_col[c])
    if not found:
        return False
    # flip along the path
    c = j2
    while True:
        r = parent[c]
        prev = col_of_row[r]
        col_of_row[r] = c
        row_of_col[c] = r
        if r == i2:
            break
        c = prev
    col_of_row[i] = j
    row_of_col[j] = i
    return True


def hungarian(cost) -> Matching:
    """Minimum-cost one-to-one matching of ``min(n, m)`` pairs.

    Among optimal matchings the lexicographically smallest sorted pair list
    is returned: optimal matchings are exactly the perfect matchings on the
    zero-reduced-cost edges of an optimal dual, so rows are fixed greedily in
    order to their smallest feasible column.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise LengthMismatchError(f"cost must be 2-D, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise NonFiniteError("cost matrix has non-finite entries")
    n, m = cost.shape
    if n == 0 or m == 0:
        return Matching([], 0.0)
    s = max(n, m)
    sq = np.zeros((s, s))
    sq[:n, :m] = cost
    col_of_row, u, v = _solve_square(sq)
    scale = max(1.0, float(np.abs(cost).max()))
    tight = np.abs(sq - u[:, None] - v[None, :]) <= 1e-9 * scale * s
    row_of_col = [0] * s
    for r, c in enumerate(col_of_row):
        tight[r, c] = True
        row_of_col[c] = r
    fixed_cols: set[int] = set()
    for i in range(n):
        real = [int(c) for c in np.flatnonzero(tight[i, :m]) if c not in fixed_cols]
        dummy = [c for c in range(m, s) if tight[i, c] and c not in fixed_cols]
        options = real + ([col_of_row[i]] if col_of_row[i] >= m else dummy[:1])
        for j in options:
            if col_of_row[i] == j or _reroute(tight, col_of_row, row_of_col, fixed_cols, i, j):
                fixed_cols.add(j)
                break
    pairs = [(i, col_of_row[i]) for i in range(n) if col_of_row[i] < m]
    total = math.fsum(cost[i, j] for i, j in pairs)
    return Matching(pairs, total)


def _frame_counts(iou: np.ndarray, thresholds, strict: bool) -> np.ndarray:
    """(T, 3) TP/FP/FN for one frame's (P, G) IoU matrix."""
    n_p, n_g = iou.shape
    out = np.zeros((len(thresholds), 3), dtype=np.int64)
    matched = np.zeros(0)
    if n_p and n_g:
        m = hungarian(-iou)
        matched = np.array([iou[i, j] for i, j in m.pairs])
    for k, t in enumerate(thresholds):
        tp = int(np.count_nonzero(matched > t if strict else matched >= t))
        out[k] = (tp, n_p - tp, n_g - tp)
    return out


def _chunk_counts(preds, gts, cfg: EvalConfig) -> np.ndarray:
    h, w = cfg.eval_resolution
    radius = cfg.mask_width / 2.0
    total = np.zeros((len(cfg.iou_thresholds), 3), dtype=np.int64)
    for b0 in range(0, len(preds), RASTER_BATCH):
        fp = [[_as_polyline(x) for x in f] for f in preds[b0:b0 + RASTER_BATCH]]
        fg = [[_as_polyline(x) for x in f] for f in gts[b0:b0 + RASTER_BATCH]]
        runs = polyline_runs([x for f in fp for x in f] + [x for f in fg for x in f], radius, h, w)
        areas = runs_area(runs)
        n_pred = sum(len(f) for f in fp)
        po, go = 0, n_pred
        for lp, lg in zip(fp, fg):
            a, b = len(lp), len(lg)
            iou = np.zeros((a, b))
            if a and b:
                inter = runs_intersection(runs[po:po + a], runs[go:go + b])
                union = areas[po:po + a, None] + areas[None, go:go + b] - inter
                iou = np.divide(inter, union, out=np.zeros((a, b)), where=union > 0)
            total += _frame_counts(iou, cfg.iou_thresholds, cfg.strict)
            po += a
            go += b
    return total


def _chunk_job(args):
    return _chunk_counts(*args)


def f1_report(preds, gts, cfg: EvalConfig, workers: int = 1, resolution=None) -> EvalReport:
    """Precision, recall and F1 at every configured threshold.

    ``preds`` and ``gts`` hold one list of polylines (or detections) per
    frame.  Frames are split into contiguous shards when ``workers > 1``;
    counts are integers, so the result does not depend on the split.
    """
    if resolution is not None and tuple(resolution) != cfg.eval_resolution:
        raise ResolutionMismatchError(
            f"inputs are {tuple(resolution)} but the evaluator expects {cfg.eval_resolution}")
    if len(preds) != len(gts):
        raise LengthMismatchError(f"{len(preds)} prediction frames vs {len(gts)} GT frames")
    t0 = time.perf_counter()
    n = len(preds)
    workers = max(1, min(int(workers), n)) if n else 1
    if workers == 1:
        total = _chunk_counts(list(preds), list(gts), cfg)
    else:
        bounds = np.linspace(0, n, workers + 1).round().astype(int)
        jobs = [(list(preds[a:b]), list(gts[a:b]), cfg) for a, b in zip(bounds[:-1], bounds[1:])]
        with ProcessPoolExecutor(max_workers=workers) as ex:
            total = sum(ex.map(_chunk_job, jobs))
    wall = time.perf_counter() - t0
    counts = {t: Counts(*map(int, row)) for t, row in zip(cfg.iou_thresholds, total)}
    return EvalReport(counts, n, wall, {"workers": workers})


def measure_fps(pipeline, frames, repeats: int = 3, warmup: int = 1) -> float:
    """Frames per second of ``pipeline(frame)`` averaged over ``repeats``
    timed passes after ``warmup`` untimed ones."""
    frames = list(frames)
    if not frames:
        raise LengthMismatchError("need at least one frame")
    if repeats < 1:
        raise OutOfRangeError("repeats must be >= 1")
    for _ in range(warmup):
        for fr in frames:
            pipeline(fr)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        for fr in frames:
            pipeline(fr)
        times.append(time.perf_counter() - t0)
    return len(frames) / (sum(times) / len(times))
