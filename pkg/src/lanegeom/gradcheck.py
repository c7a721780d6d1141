"""Randomized finite-difference audit of every analytic gradient.

Configurations that sit within a small margin of a kink (ReLU zero,
smooth-L1 switch, interval edge coincidence, BCE clip) are redrawn, since
central differences are meaningless across a kink.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .losses import (
    bce_grad,
    fidelity_loss_grad,
    finite_diff_check,
    iou_loss_arrays,
    seg_ce_grad,
    smooth_l1_grad,
)
from .overlap import WidthModel, half_widths
from .refine import AglrParams, aglr_backward, aglr_forward

EPS = 1e-6
TOLERANCE = 1e-5
N_ROWS = 72
DY = 320.0 / (N_ROWS - 1)
KINK_MARGIN = 1e-3


@dataclass
class GradcheckReport:
    configs: int
    errors: dict = field(default_factory=dict)     # component -> max relative error

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= TOLERANCE


def _random_lane_pair(rng, width: WidthModel):
    """Smooth GT lane and a jittered prediction with partial validity."""
    rows = np.arange(N_ROWS) * DY
    gt = rng.uniform(200, 600) + rng.uniform(-1.2, 1.2) * (320 - rows) + \
        rng.uniform(-4e-3, 4e-3) * (320 - rows) ** 2
    pred = gt + rng.normal(0, 6) + rng.normal(0, 3) * np.linspace(-1, 1, N_ROWS)
    vb = np.zeros(N_ROWS, dtype=bool)
    va = np.zeros(N_ROWS, dtype=bool)
    s = int(rng.integers(0, 30))
    vb[s:] = True
    s2 = int(rng.integers(0, 40))
    va[s2:s2 + int(rng.integers(8, N_ROWS - s2 + 1))] = True
    return pred, va, gt, vb


def _edges_clear(xa, va, xb, vb, width: WidthModel) -> bool:
    ea = half_widths(xa, va, width, DY)
    eb = half_widths(xb, vb, width, DY)
    both = va & vb
    d_hi = np.abs((xa + ea) - (xb + eb))[both]
    d_lo = np.abs((xa - ea) - (xb - eb))[both]
    return bool(both.any()) and d_hi.min() > KINK_MARGIN and d_lo.min() > KINK_MARGIN


def _check_smooth_l1(rng):
    n = int(rng.integers(1, 20))
    target = rng.normal(0, 2, n)
    while True:
        pred = target + rng.normal(0, 1.5, n)
        if np.all(np.abs(np.abs(pred - target) - 1.0) > KINK_MARGIN):
            break
    return finite_diff_check(lambda x: smooth_l1_grad(x, target), pred, EPS)


def _check_bce(rng):
    n = int(rng.integers(1, 10))
    p = rng.uniform(0.02, 0.98, n)
    t = rng.uniform(0, 1, n)
    return finite_diff_check(lambda x: (float(bce_grad(x, t)[0].sum()), bce_grad(x, t)[1]), p, EPS)


def _check_fidelity(rng):
    n = int(rng.integers(2, 12))
    q_hat = rng.uniform(0.02, 0.98, n)
    q = rng.uniform(0, 1, n)
    labels = rng.integers(0, 2, n)
    pos, neg = np.flatnonzero(labels == 1), np.flatnonzero(labels == 0)
    q[neg] = 0.0
    return finite_diff_check(lambda x: fidelity_loss_grad(x, q, pos, neg), q_hat, EPS)


def _check_seg(rng):
    p, c = int(rng.integers(1, 8)), int(rng.integers(2, 5))
    logits = rng.normal(0, 3, (p, c))
    labels = rng.integers(0, c, p)
    return finite_diff_check(lambda x: seg_ce_grad(x.reshape(p, c), labels), logits, EPS)


def _check_iou(rng):
    width = WidthModel(float(rng.uniform(5, 20)), bool(rng.integers(0, 2)))
    while True:
        xa, va, xb, vb = _random_lane_pair(rng, width)
        if _edges_clear(xa, va, xb, vb, width):
            break

    def fn(x):
        val, g = iou_loss_arrays(x, va, xb, vb, width, DY)
        return float(val), g
    return finite_diff_check(fn, xa, EPS)


def _check_aglr(rng, c_in: int, samples: int, hidden: int = 4):
    """Smooth-L1 plus IoU loss on ``prior + refinement`` w.r.t. all block
    parameters."""
    width = WidthModel(15.0, True)
    while True:
        params = AglrParams.init(c_in, hidden, seed=int(rng.integers(1 << 30)),
                                 gate_bias=float(rng.normal(0, 1)))
        params.conv1_b = rng.normal(0, 0.3, hidden)
        params.off_b = rng.normal(0, 1, 1)
        feats = rng.normal(0, 1, (2, c_in, samples)) * 3.0
        out = aglr_forward(feats, params, N_ROWS)
        z1 = out.cache["z1"]
        pairs = [_random_lane_pair(rng, width) for _ in range(2)]
        prior = np.stack([p[0] for p in pairs])
        va = np.stack([p[1] for p in pairs])
        gt = np.stack([p[2] for p in pairs])
        vb = np.stack([p[3] for p in pairs])
        pred = prior + out.resampled
        both = va & vb
        d = (pred - gt)[both]
        if (np.abs(z1).min() > 1e-4
                and np.all(np.abs(np.abs(d) - 1.0) > KINK_MARGIN)
                and all(_edges_clear(pred[i], va[i], gt[i], vb[i], width) for i in range(2))):
            break

    sel = np.nonzero(both)

    def loss_and_grad_x(x):
        reg, g_reg = smooth_l1_grad(x[sel], gt[sel])
        vals, g_iou = iou_loss_arrays(x, va, gt, vb, width, DY)
        grad_x = g_iou / 2.0
        grad_x[sel] += g_reg
        return reg + float(vals.mean()), grad_x

    def value(vec):
        o = aglr_forward(feats, params.unflatten(vec), N_ROWS, keep_cache=False)
        return loss_and_grad_x(prior + o.resampled)[0]

    _, grad_x = loss_and_grad_x(pred)
    grads, _ = aglr_backward(out, grad_x)
    return finite_diff_check(value, params.flatten(), EPS, grad=grads.flatten())


CHANNELS = (1, 4, 8)
SAMPLES = (4, 8, 36)


def run_gradcheck(n_configs: int = 200, seed: int = 42) -> GradcheckReport:
    """Max relative error per component over ``n_configs`` seeded draws."""
    rng = np.random.default_rng(seed)
    report = GradcheckReport(n_configs)
    checks = {
        "smooth_l1": _check_smooth_l1,
        "bce": _check_bce,
        "fidelity_loss": _check_fidelity,
        "seg_ce": _check_seg,
        "iou_loss": _check_iou,
    }
    for name in list(checks) + ["aglr"]:
        report.errors[name] = 0.0
    for k in range(n_configs):
        for name, fn in checks.items():
            report.errors[name] = max(report.errors[name], fn(rng))
        c_in = CHANNELS[k % 3]
        samples = SAMPLES[(k // 3) % 3]
        report.errors["aglr"] = max(report.errors["aglr"], _check_aglr(rng, c_in, samples))
    return report
