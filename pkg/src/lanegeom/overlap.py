"""Row-wise interval IoU between lanes sampled on a shared grid.

Each valid row of a lane is widened into the interval ``[x - e_i, x + e_i]``.
With tilt compensation ``e_i = e * sqrt(1 + k_i**2)`` where ``k_i = dx/dy``
is the local slope, so the interval is the horizontal cross-section of a
band of constant perpendicular width ``2e``.  Rows valid in only one lane
count towards the union but not the intersection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateWidthError, NoValidRowsError
from .geometry import SampleGrid


@dataclass(frozen=True)
class WidthModel:
    half_width: float = 15.0
    tilt_compensated: bool = True

    def __post_init__(self):
        if not self.half_width > 0:
            raise DegenerateWidthError(f"half width must be positive, got {self.half_width}")


def _slopes(xs: np.ndarray, valid: np.ndarray, dy: float):
    """Central-difference dx/dy inside each valid block, one-sided at its
    ends.  Also returns the per-row coefficients on ``x[i-1]`` and
    ``x[i+1]`` and ``x[i]`` so callers can chain gradients."""
    prev_ok = np.zeros_like(valid)
    next_ok = np.zeros_like(valid)
    prev_ok[..., 1:] = valid[..., :-1]
    next_ok[..., :-1] = valid[..., 1:]
    prev_ok &= valid
    next_ok &= valid
    both = prev_ok & next_ok
    only_next = next_ok & ~prev_ok
    only_prev = prev_ok & ~next_ok
    c_prev = np.where(both, -0.5, np.where(only_prev, -1.0, 0.0)) / dy
    c_next = np.where(both, 0.5, np.where(only_next, 1.0, 0.0)) / dy
    c_self = np.where(only_next, -1.0, np.where(only_prev, 1.0, 0.0)) / dy
    x_prev = np.zeros_like(xs)
    x_next = np.zeros_like(xs)
    x_prev[..., 1:] = xs[..., :-1]
    x_next[..., :-1] = xs[..., 1:]
    k = c_prev * x_prev + c_self * xs + c_next * x_next
    return k, (c_prev, c_self, c_next)


def half_widths(xs, valid, width: WidthModel, dy: float) -> np.ndarray:
    xs = np.asarray(xs, dtype=np.float64)
    if not width.tilt_compensated:
        return np.full(xs.shape, width.half_width)
    k, _ = _slopes(xs, np.asarray(valid, dtype=bool), dy)
    return width.half_width * np.sqrt(1.0 + k * k)


def _row_terms(xa, va, ea, xb, vb, eb, signed):
    both = va & vb
    ov = np.minimum(xa + ea, xb + eb) - np.maximum(xa - ea, xb - eb)
    if not signed:
        ov = np.maximum(ov, 0.0)
    ov = np.where(both, ov, 0.0)
    union = np.where(va, 2 * ea, 0.0) + np.where(vb, 2 * eb, 0.0) - ov
    return ov, union


def lane_iou_arrays(xa, va, xb, vb, width: WidthModel, dy: float, signed: bool = False):
    """IoU over the last axis; leading axes broadcast."""
    xa = np.asarray(xa, dtype=np.float64)
    xb = np.asarray(xb, dtype=np.float64)
    va = np.asarray(va, dtype=bool)
    vb = np.asarray(vb, dtype=bool)
    ea = half_widths(xa, va, width, dy)
    eb = half_widths(xb, vb, width, dy)
    ov, union = _row_terms(xa, va, ea, xb, vb, eb, signed)
    total = union.sum(axis=-1)
    if np.any(total <= 0):
        raise NoValidRowsError("no row is valid in either lane")
    return ov.sum(axis=-1) / total


def lane_iou(a, b, width: WidthModel, grid: SampleGrid, signed: bool = False) -> float:
    """IoU of two lanes (``Lane`` or ``LanePrior``) on ``grid``."""
    return float(lane_iou_arrays(a.xs, a.valid_mask(grid), b.xs, b.valid_mask(grid),
                                 width, grid.spacing, signed))


def lane_iou_grad(xa, va, xb, vb, width: WidthModel, dy: float, signed: bool = True):
    """IoU and its gradient with respect to ``xa`` (leading axes broadcast).

    At interval breakpoints the derivative taken is the one seen when the
    row's own coordinate increases.
    """
    xa = np.asarray(xa, dtype=np.float64)
    xb = np.asarray(xb, dtype=np.float64)
    va = np.asarray(va, dtype=bool)
    vb = np.asarray(vb, dtype=bool)
    e = width.half_width
    if width.tilt_compensated:
        k, (c_prev, c_self, c_next) = _slopes(xa, va, dy)
        root = np.sqrt(1.0 + k * k)
        ea = e * root
        dea_dk = e * k / root
    else:
        ea = np.full(xa.shape, e)
        dea_dk = np.zeros(xa.shape)
    eb = half_widths(xb, vb, width, dy)
    both = va & vb
    right_a = xa + ea < xb + eb          # min() takes a's right edge
    left_a = xa - ea >= xb - eb          # max() takes a's left edge
    ov_raw = np.minimum(xa + ea, xb + eb) - np.maximum(xa - ea, xb - eb)
    active = both if signed else both & (ov_raw > 0)
    ov = np.where(active, ov_raw, 0.0)
    union = np.where(va, 2 * ea, 0.0) + np.where(vb, 2 * eb, 0.0) - ov
    inter_sum = ov.sum(axis=-1, keepdims=True)
    union_sum = union.sum(axis=-1, keepdims=True)
    if np.any(union_sum <= 0):
        raise NoValidRowsError("no row is valid in either lane")
    iou = inter_sum / union_sum

    # d ov_i / d xa_i (direct) and d ov_i / d ea_i
    d_ov_dx = np.where(active, right_a.astype(float) - left_a.astype(float), 0.0)
    d_ov_de = np.where(active, right_a.astype(float) + left_a.astype(float), 0.0)
    d_un_dx = -d_ov_dx
    d_un_de = np.where(va, 2.0, 0.0) - d_ov_de
    # dIoU = (dI * U - I * dU) / U^2 per row contribution
    g_x = (d_ov_dx * union_sum - inter_sum * d_un_dx) / union_sum ** 2
    g_e = (d_ov_de * union_sum - inter_sum * d_un_de) / union_sum ** 2
    grad = g_x
    if width.tilt_compensated:
        g_k = g_e * dea_dk
        grad = grad + g_k * c_self
        # k_i reads x_{i-1} and x_{i+1}
        grad[..., :-1] += (g_k * c_prev)[..., 1:]
        grad[..., 1:] += (g_k * c_next)[..., :-1]
    return iou[..., 0], grad


def iou_matrix(priors, gts, width: WidthModel, grid: SampleGrid, return_disjoint: bool = False):
    """(J, K) unsigned IoU between candidates and ground-truth lanes.

    Pairs whose valid row ranges do not overlap get 0; ``return_disjoint``
    additionally returns a boolean matrix flagging them.
    """
    j, k = len(priors), len(gts)
    if j == 0 or k == 0:
        out = np.zeros((j, k))
        return (out, np.zeros((j, k), dtype=bool)) if return_disjoint else out
    xa = np.stack([p.xs for p in priors])
    va = np.stack([p.valid_mask(grid) for p in priors])
    xb = np.stack([g.xs for g in gts])
    vb = np.stack([g.valid_mask(grid) for g in gts])
    out = pairwise_iou(xa, va, xb, vb, width, grid.spacing)
    if return_disjoint:
        disjoint = ~(va[:, None, :] & vb[None, :, :]).any(axis=-1)
        return out, disjoint
    return out


def pairwise_iou(xa, va, xb, vb, width: WidthModel, dy: float, signed: bool = False) -> np.ndarray:
    """(J, K) IoU between row-stacked lanes ``xa`` (J, N) and ``xb`` (K, N)."""
    ea = half_widths(xa, va, width, dy)
    eb = half_widths(xb, vb, width, dy)
    ov, union = _row_terms(xa[:, None], va[:, None], ea[:, None],
                           xb[None], vb[None], eb[None], signed)
    total = union.sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(total > 0, ov.sum(axis=-1) / total, 0.0)
    return out
