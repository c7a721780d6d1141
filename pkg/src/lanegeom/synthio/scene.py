"""Synthetic road scenes with candidates of controllable quality.

Each scene holds a few ground-truth lanes converging towards a vanishing
point, a handful of jittered candidates per lane, and background
candidates that follow no lane.  Every candidate carries a classification
confidence ``p`` that only partly tracks its true overlap ``q_true`` with
the lane, a noisy fidelity estimate ``q``, and anchor features that encode
its lateral residual for the refinement block to decode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import OutOfRangeError
from ..geometry import Lane, LanePrior, SampleGrid, build_grid, resample_linear
from ..overlap import WidthModel, lane_iou_arrays, pairwise_iou

FAMILIES = ("straight", "arc", "cubic", "s-curve")
FEATURE_SEED = 20240601   # fixed channel projections, shared by every scene
FEATURE_SCALE = 10.0      # residual pixels per unit of feature amplitude


@dataclass(frozen=True)
class SceneSpec:
    n_lanes: int = 4
    family: str = "cubic"
    curvature_range: tuple = (-6e-4, 6e-4)   # 1/pixels
    spacing: float = 170.0
    seed: int = 42
    priors_per_lane: int = 6
    n_background: int = 8
    channels: int = 64
    samples: int = 36

    def __post_init__(self):
        object.__setattr__(self, "curvature_range", tuple(float(v) for v in self.curvature_range))
        if self.n_lanes < 0 or self.priors_per_lane < 0 or self.n_background < 0:
            raise OutOfRangeError("lane and candidate counts must be >= 0")
        if self.family not in FAMILIES:
            raise OutOfRangeError(f"family must be one of {FAMILIES}, got {self.family!r}")
        lo, hi = self.curvature_range
        if lo > hi:
            raise OutOfRangeError("curvature_range must be (low, high) with low <= high")
        if self.channels < 1 or self.samples < 2:
            raise OutOfRangeError("need channels >= 1 and samples >= 2")

    def check_separable(self, width: WidthModel) -> None:
        if not self.spacing > 2 * width.half_width:
            raise OutOfRangeError(
                f"lane spacing {self.spacing} must exceed twice the half width {width.half_width}")


@dataclass(frozen=True)
class NoiseModel:
    sigma_geo: float = 7.0     # pixels, candidate jitter
    sigma_p: float = 0.6       # logits, confidence noise
    sigma_q: float = 0.5       # logits, fidelity-estimate noise
    rho: float = 0.7           # share of p that ignores geometry
    p_gain: float = 7.0        # logistic gain a
    p_center: float = 0.35     # logistic center
    sigma_feat: float = 0.3    # feature noise

    def __post_init__(self):
        for name in ("sigma_geo", "sigma_p", "sigma_q", "sigma_feat"):
            if not getattr(self, name) >= 0:
                raise OutOfRangeError(f"{name} must be >= 0")
        if not 0.0 <= self.rho <= 1.0:
            raise OutOfRangeError("rho must lie in [0, 1]")


@dataclass(eq=False)
class Scene:
    gts: list                   # Lane
    priors: list                # LanePrior
    q_true: np.ndarray          # (J,)
    labels: np.ndarray          # (J,) 1 for lane-spawned candidates
    source: np.ndarray          # (J,) spawning GT index, -1 for background
    residuals: np.ndarray       # (J, N) gt.xs - prior.xs on valid rows, else 0
    features: np.ndarray | None = None   # (J, C, S)
    grid: SampleGrid = field(default_factory=build_grid)


def scene_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    """Generator for one scene, mixing the master seed with the scene index."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index), int(stream)]))


def feature_projection(channels: int) -> np.ndarray:
    return np.random.default_rng(FEATURE_SEED).normal(0.0, 1.0, channels)


def _shape_term(family: str, t: np.ndarray, kappa: float, height: float, rng) -> np.ndarray:
    """Lateral bend as a function of height ``t`` above the bottom row."""
    if family == "straight":
        return np.zeros_like(t)
    if family == "arc":
        return 0.5 * kappa * t * t
    if family == "cubic":
        c3 = rng.uniform(-1.0, 1.0) * abs(kappa) / height
        return 0.5 * kappa * t * t + c3 * t ** 3
    period = rng.uniform(0.8, 1.4) * height
    amp = kappa * period ** 2 / (4 * math.pi ** 2)
    return amp * np.sin(2 * math.pi * t / period)


def _gt_lanes(spec: SceneSpec, grid: SampleGrid, rng) -> list[Lane]:
    h, w = grid.height, grid.width
    rows = grid.rows
    t = h - rows
    kappa = rng.uniform(*spec.curvature_range)
    x_vanish = w / 2 + rng.normal(0.0, 0.05 * w)
    y_vanish = 0.2 * h
    center = w / 2 + rng.normal(0.0, 0.04 * w)
    lanes = []
    for i in range(spec.n_lanes):
        x0 = center + (i - (spec.n_lanes - 1) / 2) * spec.spacing + rng.normal(0.0, 6.0)
        slope = (x_vanish - x0) / (h - y_vanish)
        xs = x0 + slope * t + _shape_term(spec.family, t, kappa, h, rng)
        top = rng.uniform(0.3, 0.5) * h
        start = int(np.searchsorted(rows, top))
        lanes.append(Lane(xs, start, grid.n_points - start))
    return lanes


def _jitter(n_rows: int, sigma: float, rng) -> np.ndarray:
    """Smooth low-order lateral error over ``n_rows`` rows."""
    s = np.linspace(-1.0, 1.0, n_rows)
    a = rng.normal(0.0, sigma, 3) * np.array([1.0, 0.8, 0.5])
    return a[0] + a[1] * s + a[2] * (s * s - 1.0 / 3.0)


def _prior_from(xs: np.ndarray, start: int, length: int, grid: SampleGrid,
                p: float, q: float) -> LanePrior:
    end = start + length - 1
    dx = xs[start] - xs[end]
    dy = grid.rows[end] - grid.rows[start]
    return LanePrior(float(xs[end]), float(grid.rows[end]), math.atan2(dy, dx), float(length),
                     xs, p=p, q=q)


def _background(grid: SampleGrid, rng) -> tuple[np.ndarray, int, int]:
    h, w = grid.height, grid.width
    x0 = rng.uniform(0.05 * w, 0.95 * w)
    x1 = x0 + rng.uniform(-0.5, 0.5) * w
    length = int(rng.integers(grid.n_points // 4, grid.n_points // 2 + 1))
    end = int(rng.integers(grid.n_points * 3 // 4, grid.n_points))
    start = end - length + 1
    xs = x0 + (x1 - x0) * (grid.rows[end] - grid.rows) / h
    return xs, start, length


def _logit(q: np.ndarray) -> np.ndarray:
    q = np.clip(q, 1e-4, 1 - 1e-4)
    return np.log(q / (1.0 - q))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def generate_scene(spec: SceneSpec, grid: SampleGrid | None = None,
                   noise: NoiseModel | None = None, width: WidthModel | None = None,
                   index: int = 0, stream: int = 0, features: bool = True) -> Scene:
    """Build scene ``index`` of the ``spec.seed`` stream deterministically."""
    grid = grid or build_grid()
    noise = noise or NoiseModel()
    width = width or WidthModel()
    spec.check_separable(width)
    rng = scene_rng(spec.seed, index, stream)
    gts = _gt_lanes(spec, grid, rng)

    xs_list, starts, lengths, source = [], [], [], []
    for g, lane in enumerate(gts):
        for _ in range(spec.priors_per_lane):
            xs = lane.xs.copy()
            xs[lane.valid] += _jitter(lane.valid_length, noise.sigma_geo, rng)
            xs_list.append(xs)
            starts.append(lane.start_index)
            lengths.append(lane.valid_length)
            source.append(g)
    for _ in range(spec.n_background):
        xs, start, length = _background(grid, rng)
        xs_list.append(xs)
        starts.append(start)
        lengths.append(length)
        source.append(-1)

    n = grid.n_points
    n_priors = len(xs_list)
    source = np.array(source, dtype=np.int64)
    xa = np.array(xs_list).reshape(n_priors, n)
    va = np.zeros((n_priors, n), dtype=bool)
    for j, (s, l) in enumerate(zip(starts, lengths)):
        va[j, s:s + l] = True

    q_true = np.zeros(n_priors)
    residuals = np.zeros((n_priors, n))
    if gts and n_priors:
        xb = np.stack([g.xs for g in gts])
        vb = np.stack([g.valid for g in gts])
        spawned = source >= 0
        src = source[spawned]
        q_true[spawned] = lane_iou_arrays(xa[spawned], va[spawned], xb[src], vb[src],
                                          width, grid.spacing)
        if (~spawned).any():
            q_true[~spawned] = pairwise_iou(xa[~spawned], va[~spawned], xb, vb,
                                            width, grid.spacing).max(axis=1)
        residuals[spawned] = np.where(va[spawned], xb[src] - xa[spawned], 0.0)

    u = rng.uniform(0.0, 1.0, n_priors)
    mix = (1.0 - noise.rho) * q_true + noise.rho * u
    p = _sigmoid(noise.p_gain * (mix - noise.p_center) + noise.sigma_p * rng.normal(size=n_priors))
    q_hat = _sigmoid(_logit(q_true) + noise.sigma_q * rng.normal(size=n_priors))

    feats = None
    if features:
        proj = feature_projection(spec.channels)
        res_s = resample_linear(residuals, spec.samples) / FEATURE_SCALE
        feats = proj[None, :, None] * res_s[:, None, :]
        feats = feats + noise.sigma_feat * rng.normal(size=feats.shape)

    priors = [_prior_from(xa[j], starts[j], lengths[j], grid, float(p[j]), float(q_hat[j]))
              for j in range(n_priors)]
    return Scene(gts, priors, q_true, (source >= 0).astype(np.int64), source, residuals,
                 feats, grid)


@dataclass(frozen=True)
class Population:
    p: np.ndarray
    q: np.ndarray
    q_true: np.ndarray
    labels: np.ndarray


def population(n_candidates: int, spec: SceneSpec | None = None, noise: NoiseModel | None = None,
               grid: SampleGrid | None = None, width: WidthModel | None = None) -> Population:
    """Pool candidates from consecutive scenes until ``n_candidates`` are
    collected (the last scene is truncated)."""
    spec = spec or SceneSpec()
    if n_candidates < 1:
        raise OutOfRangeError("need at least one candidate")
    per_scene = spec.n_lanes * spec.priors_per_lane + spec.n_background
    if per_scene == 0:
        raise OutOfRangeError("scene spec yields no candidates")
    parts = {k: [] for k in ("p", "q", "q_true", "labels")}
    got, index = 0, 0
    while got < n_candidates:
        sc = generate_scene(spec, grid, noise, width, index=index, features=False)
        parts["p"].append([pr.p for pr in sc.priors])
        parts["q"].append([pr.q for pr in sc.priors])
        parts["q_true"].append(sc.q_true)
        parts["labels"].append(sc.labels)
        got += len(sc.priors)
        index += 1
    cat = {k: np.concatenate([np.asarray(v, dtype=float) for v in vs])[:n_candidates]
           for k, vs in parts.items()}
    return Population(cat["p"], cat["q"], cat["q_true"], cat["labels"].astype(np.int64))
