"""Lane and prior representation on a uniform row grid.

Rows are indexed top to bottom: ``rows[0] == 0`` is the top image row and
``rows[N-1] == H`` the bottom one.  A lane occupies one contiguous block of
rows, stored as ``(start_index, valid_length)`` instead of sentinel values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    EmptyLaneError,
    InvalidDimensionError,
    LengthMismatchError,
    OutOfRangeError,
)

DEFAULT_HEIGHT = 320
DEFAULT_WIDTH = 800
DEFAULT_POINTS = 72


@dataclass(frozen=True, eq=False)
class SampleGrid:
    height: float
    width: float
    n_points: int
    rows: np.ndarray = field(repr=False)

    @property
    def spacing(self) -> float:
        return self.height / (self.n_points - 1)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SampleGrid):
            return NotImplemented
        return (self.height, self.width, self.n_points) == (other.height, other.width, other.n_points)

    def __hash__(self) -> int:
        return hash((self.height, self.width, self.n_points))


def build_grid(height: float = DEFAULT_HEIGHT, width: float = DEFAULT_WIDTH,
               n_points: int = DEFAULT_POINTS) -> SampleGrid:
    if not (height > 0 and width > 0):
        raise InvalidDimensionError(f"image size must be positive, got {height}x{width}")
    if int(n_points) != n_points or n_points < 2:
        raise InvalidDimensionError(f"need at least 2 sample rows, got {n_points}")
    n_points = int(n_points)
    # i*H/(N-1) keeps both endpoints exact
    rows = np.arange(n_points, dtype=np.float64) * float(height) / (n_points - 1)
    rows.setflags(write=False)
    return SampleGrid(float(height), float(width), n_points, rows)


def _block_mask(n: int, start: int, length: int) -> np.ndarray:
    mask = np.zeros(n, dtype=bool)
    mask[start:start + length] = True
    return mask


@dataclass(frozen=True, eq=False)
class Lane:
    """Ground-truth lane sampled on a grid.

    ``xs`` has one entry per grid row; only ``xs[start_index:start_index +
    valid_length]`` is meaningful.
    """

    xs: np.ndarray
    start_index: int
    valid_length: int

    def __post_init__(self):
        xs = np.asarray(self.xs, dtype=np.float64)
        object.__setattr__(self, "xs", xs)
        if self.valid_length < 2:
            raise EmptyLaneError(f"lane needs >= 2 valid rows, got {self.valid_length}")
        if self.start_index < 0 or self.start_index + self.valid_length > xs.size:
            raise OutOfRangeError(
                f"valid block [{self.start_index}, {self.start_index + self.valid_length}) "
                f"exceeds {xs.size} rows")

    @property
    def valid(self) -> np.ndarray:
        return _block_mask(self.xs.size, self.start_index, self.valid_length)

    def valid_mask(self, grid: SampleGrid | None = None) -> np.ndarray:
        return self.valid

    @property
    def end_index(self) -> int:
        return self.start_index + self.valid_length - 1

    def start_point(self, grid: SampleGrid) -> tuple[float, float]:
        """Entry point: the bottom-most valid sample."""
        i = self.end_index
        return float(self.xs[i]), float(grid.rows[i])

    def angle(self, grid: SampleGrid) -> float:
        """Direction from the entry point towards the far end, in radians
        measured from the +x axis with y pointing up the image."""
        i0, i1 = self.end_index, self.start_index
        dx = self.xs[i1] - self.xs[i0]
        dy = grid.rows[i0] - grid.rows[i1]
        return math.atan2(dy, dx)

    def check_bounds(self, grid: SampleGrid) -> None:
        xs = self.xs[self.valid]
        if xs.size and (xs.min() < -grid.width or xs.max() > 2 * grid.width):
            raise OutOfRangeError("lane leaves the [-W, 2W] tolerance band")

    @classmethod
    def from_points(cls, points, grid: SampleGrid, tol: float = 1e-3) -> "Lane":
        """Resample an arbitrary polyline onto the grid rows by linear
        interpolation in y.  Rows within ``tol`` of the polyline's y-range
        are kept so that rounded endpoints do not drop a row."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        order = np.argsort(pts[:, 1], kind="stable")
        ys, xs = pts[order, 1], pts[order, 0]
        ys, keep = np.unique(ys, return_index=True)
        xs = xs[keep]
        if ys.size < 2:
            raise EmptyLaneError("polyline spans fewer than 2 distinct rows")
        rows = grid.rows
        inside = (rows >= ys[0] - tol) & (rows <= ys[-1] + tol)
        idx = np.flatnonzero(inside)
        if idx.size < 2:
            raise EmptyLaneError("polyline covers fewer than 2 grid rows")
        out = np.zeros(grid.n_points)
        out[idx] = np.interp(np.clip(rows[idx], ys[0], ys[-1]), ys, xs)
        return cls(out, int(idx[0]), int(idx.size))


@dataclass(frozen=True, eq=False)
class LanePrior:
    """Candidate lane.

    ``(x, y)`` is the entry point at the bottom of the lane and ``length``
    the number of rows it covers upwards from there.  ``refine_offsets``
    holds gated point-wise offsets at grid length, when available.
    """

    x: float
    y: float
    theta: float
    length: float
    xs: np.ndarray
    p: float = 0.0
    q: float = 0.0
    stage: int = 0
    refine_offsets: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "xs", np.asarray(self.xs, dtype=np.float64))
        if self.refine_offsets is not None:
            object.__setattr__(self, "refine_offsets",
                               np.asarray(self.refine_offsets, dtype=np.float64))
        if not (0.0 <= self.p <= 1.0 and 0.0 <= self.q <= 1.0):
            raise OutOfRangeError(f"confidences must lie in [0,1], got p={self.p}, q={self.q}")
        if not (0.0 <= self.length <= self.xs.size):
            raise OutOfRangeError(f"length {self.length} outside [0, {self.xs.size}]")

    def valid_block(self, grid: SampleGrid) -> tuple[int, int]:
        """``(start_index, n_valid)``; the length is truncated to whole rows."""
        n = self.xs.size
        end = int(np.clip(round(self.y / grid.spacing), 0, n - 1))
        count = min(int(math.floor(self.length + 1e-9)), end + 1)
        return end - count + 1, count

    def valid_mask(self, grid: SampleGrid) -> np.ndarray:
        start, count = self.valid_block(grid)
        return _block_mask(self.xs.size, start, count)

    @classmethod
    def from_line(cls, x: float, y: float, theta: float, length: float, grid: SampleGrid,
                  **kw) -> "LanePrior":
        """Straight prior through ``(x, y)`` at angle ``theta`` (y up)."""
        tan = math.tan(theta)
        if abs(tan) < 1e-12:
            raise OutOfRangeError("horizontal prior cannot be sampled on rows")
        xs = x + (y - grid.rows) / tan
        return cls(x, y, theta, length, xs, **kw)

    @classmethod
    def from_lane(cls, lane: Lane, grid: SampleGrid, **kw) -> "LanePrior":
        x, y = lane.start_point(grid)
        return cls(x, y, lane.angle(grid), float(lane.valid_length), lane.xs.copy(), **kw)


def _check_len(name: str, arr: np.ndarray, n: int) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape != (n,):
        raise LengthMismatchError(f"{name} has shape {arr.shape}, expected ({n},)")
    return arr


def apply_prior_update(prior: LanePrior, dx: float, dy: float, dtheta: float,
                       dxs) -> LanePrior:
    """Shift the entry point, rotate and add per-row offsets."""
    dxs = _check_len("dxs", dxs, prior.xs.size)
    return replace(prior, x=prior.x + dx, y=prior.y + dy, theta=prior.theta + dtheta,
                   xs=prior.xs + dxs)


def apply_point_update(prior: LanePrior, dxs, dxs_refine) -> LanePrior:
    """Add regression offsets and gated refinement offsets to ``xs``."""
    n = prior.xs.size
    dxs = _check_len("dxs", dxs, n)
    dxs_refine = _check_len("dxs_refine", dxs_refine, n)
    return replace(prior, xs=prior.xs + dxs + dxs_refine)


def interp_matrix(m: int, n: int) -> np.ndarray:
    """(n, m) matrix R with ``R @ v`` the linear resampling of ``v`` to n points."""
    if m < 2 or n < 2:
        raise InvalidDimensionError(f"resampling needs >= 2 points on both sides, got {m}->{n}")
    pos = np.arange(n) * (m - 1) / (n - 1)
    lo = np.minimum(np.floor(pos).astype(int), m - 2)
    frac = pos - lo
    mat = np.zeros((n, m))
    idx = np.arange(n)
    mat[idx, lo] = 1.0 - frac
    mat[idx, lo + 1] += frac
    return mat


def resample_linear(values, target: int) -> np.ndarray:
    """Linear interpolation of ``values`` onto ``target`` equally spaced
    positions spanning the same parameter range.  Works along the last axis."""
    values = np.asarray(values, dtype=np.float64)
    m = values.shape[-1]
    if m == target and m >= 2:
        return values.copy()
    return values @ interp_matrix(m, target).T


def decode_polyline(prior: LanePrior | Lane, grid: SampleGrid) -> np.ndarray:
    """(M, 2) array of ``(x, y)`` image points over the valid rows,
    ordered by increasing y."""
    valid = prior.valid_mask(grid)
    if valid.sum() < 2:
        raise EmptyLaneError("candidate has fewer than 2 valid rows")
    return np.column_stack([prior.xs[valid], grid.rows[valid]])
