"""Scanline rasterization of thick polylines into per-row pixel runs.

A pixel ``(row, col)`` has its center at ``(col + 0.5, row + 0.5)`` and is
covered when that center lies within ``radius`` of some polyline segment
(round caps and joins).  Each segment's capsule cut by a pixel-row center
line is a single interval, computed in closed form; per row, the cuts are
merged into disjoint column runs.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

_EMPTY = (0, -1)


@njit(cache=True)
def _capsule_cut(ax, ay, bx, by, yc, r):
    """x-interval of {x : dist((x, yc), segment AB) <= r}; empty when lo > hi."""
    lo = math.inf
    hi = -math.inf
    r2 = r * r
    h2 = r2 - (yc - ay) * (yc - ay)
    if h2 >= 0.0:
        h = math.sqrt(h2)
        lo = min(lo, ax - h)
        hi = max(hi, ax + h)
    h2 = r2 - (yc - by) * (yc - by)
    if h2 >= 0.0:
        h = math.sqrt(h2)
        lo = min(lo, bx - h)
        hi = max(hi, bx + h)

    dx = bx - ax
    dy = by - ay
    l2 = dx * dx + dy * dy
    if l2 == 0.0:
        return lo, hi
    ln = math.sqrt(l2)
    w = yc - ay
    s_lo = -math.inf
    s_hi = math.inf
    # projection onto AB inside [0, 1]:  u*dx in [-w*dy, l2 - w*dy], u = x - ax
    a1 = -w * dy
    b1 = l2 - w * dy
    if dx > 0.0:
        s_lo, s_hi = a1 / dx, b1 / dx
    elif dx < 0.0:
        s_lo, s_hi = b1 / dx, a1 / dx
    elif a1 > 0.0 or b1 < 0.0:
        return lo, hi
    # perpendicular distance at most r:  u*dy in [w*dx - r*ln, w*dx + r*ln]
    a2 = w * dx - r * ln
    b2 = w * dx + r * ln
    if dy > 0.0:
        s_lo = max(s_lo, a2 / dy)
        s_hi = min(s_hi, b2 / dy)
    elif dy < 0.0:
        s_lo = max(s_lo, b2 / dy)
        s_hi = min(s_hi, a2 / dy)
    elif a2 > 0.0 or b2 < 0.0:
        return lo, hi
    if s_lo <= s_hi:
        lo = min(lo, s_lo + ax)
        hi = max(hi, s_hi + ax)
    return lo, hi


@njit(cache=True)
def _insert_run(runs, counts, row, a, b):
    """Insert [a, b] into the sorted disjoint runs of ``row``, merging
    overlapping or adjacent runs.  Returns False when capacity is exceeded."""
    n = counts[row]
    i = 0
    while i < n and runs[row, i, 1] < a - 1:
        i += 1
    j = i
    lo, hi = a, b
    while j < n and runs[row, j, 0] <= b + 1:
        lo = min(lo, runs[row, j, 0])
        hi = max(hi, runs[row, j, 1])
        j += 1
    merged = j - i
    new_n = n - merged + 1
    if new_n > runs.shape[1]:
        return False
    if merged == 0:
        for k in range(n, i, -1):
            runs[row, k, 0] = runs[row, k - 1, 0]
            runs[row, k, 1] = runs[row, k - 1, 1]
    elif merged > 1:
        shift = merged - 1
        for k in range(i + 1, new_n):
            runs[row, k, 0] = runs[row, k + shift, 0]
            runs[row, k, 1] = runs[row, k + shift, 1]
        for k in range(new_n, n):
            runs[row, k, 0] = 0
            runs[row, k, 1] = -1
    runs[row, i, 0] = lo
    runs[row, i, 1] = hi
    counts[row] = new_n
    return True


@njit(cache=True)
def _batch_runs(xs, ys, offsets, radius, height, width, cap):
    n_lanes = offsets.size - 1
    runs = np.zeros((n_lanes, height, cap, 2), dtype=np.int64)
    runs[:, :, :, 1] = -1
    counts = np.zeros((n_lanes, height), dtype=np.int64)
    for k in range(n_lanes):
        p0 = offsets[k]
        p1 = offsets[k + 1]
        n_seg = max(p1 - p0 - 1, 1)
        for s in range(n_seg):
            i0 = p0 + s
            i1 = min(i0 + 1, p1 - 1)
            ax, ay, bx, by = xs[i0], ys[i0], xs[i1], ys[i1]
            if max(ax, bx) + radius < 0.5 or min(ax, bx) - radius > width - 0.5:
                continue
            r0 = max(int(math.ceil(min(ay, by) - radius - 0.5)), 0)
            r1 = min(int(math.floor(max(ay, by) + radius - 0.5)), height - 1)
            for row in range(r0, r1 + 1):
                lo, hi = _capsule_cut(ax, ay, bx, by, row + 0.5, radius)
                if lo > hi:
                    continue
                c_lo = max(math.ceil(lo - 0.5), 0.0)
                c_hi = min(math.floor(hi - 0.5), width - 1.0)
                if c_lo > c_hi:
                    continue
                if not _insert_run(runs[k], counts[k], row, int(c_lo), int(c_hi)):
                    return runs, counts, False
    return runs, counts, True


def polyline_runs(polylines, radius: float, height: int, width: int) -> np.ndarray:
    """Pixel runs covered by each thick polyline.

    Returns an ``(L, height, R, 2)`` int array of inclusive ``[c_lo, c_hi]``
    column runs per row, unused slots ``[0, -1]``; ``R`` is the largest
    number of disjoint runs any row needed.
    """
    pts = [np.asarray(p, dtype=np.float64).reshape(-1, 2) for p in polylines]
    if not pts:
        return np.zeros((0, height, 1, 2), dtype=np.int64)
    offsets = np.zeros(len(pts) + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([p.shape[0] for p in pts])
    flat = np.concatenate(pts) if offsets[-1] else np.zeros((0, 2))
    xs = np.ascontiguousarray(flat[:, 0])
    ys = np.ascontiguousarray(flat[:, 1])
    cap = 1
    while True:
        runs, counts, ok = _batch_runs(xs, ys, offsets, float(radius), int(height), int(width), cap)
        if ok:
            break
        cap *= 4
    used = max(int(counts.max(initial=0)), 1)
    return runs[:, :, :used]


def runs_area(runs: np.ndarray) -> np.ndarray:
    """Pixel count per lane for ``(L, H, R, 2)`` runs."""
    return np.maximum(runs[..., 1] - runs[..., 0] + 1, 0).sum(axis=(-1, -2))


def runs_intersection(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(La, Lb) matrix of shared pixel counts.

    Runs inside one lane's row are disjoint, so summing pairwise run
    overlaps counts each shared pixel exactly once.
    """
    if a.shape[2] == 1 and b.shape[2] == 1:
        alo, ahi = a[:, None, :, 0, 0], a[:, None, :, 0, 1]
        blo, bhi = b[None, :, :, 0, 0], b[None, :, :, 0, 1]
        ov = np.minimum(ahi, bhi) - np.maximum(alo, blo) + 1
        return np.maximum(ov, 0).sum(axis=-1)
    alo = a[:, None, :, :, None, 0]
    ahi = a[:, None, :, :, None, 1]
    blo = b[None, :, :, None, :, 0]
    bhi = b[None, :, :, None, :, 1]
    ov = np.minimum(ahi, bhi) - np.maximum(alo, blo) + 1
    return np.maximum(ov, 0).sum(axis=(-1, -2, -3))


def runs_to_mask(runs: np.ndarray, width: int) -> np.ndarray:
    """Dense ``(H, W)`` boolean mask from one lane's ``(H, R, 2)`` runs."""
    height = runs.shape[0]
    mask = np.zeros((height, width), dtype=bool)
    for row, slot in zip(*np.nonzero(runs[..., 1] >= runs[..., 0])):
        lo, hi = runs[row, slot]
        mask[row, lo:hi + 1] = True
    return mask
