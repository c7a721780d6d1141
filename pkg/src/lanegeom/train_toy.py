"""Desk-scale training of the refinement block on synthetic scenes.

Per step, the refinement offsets are added to every candidate, candidates
are assigned to ground truth with the dynamic-k rule, and the weighted
objective (regression, IoU, classification, fidelity, segmentation) is
back-propagated through the refinement block.  Classification confidences
are synthetic and there is no segmentation branch, so those two terms are
reported but carry no gradient.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .assign import AssignConfig, cost_matrix, dynamic_assign
from .calibrate import CriConfig
from .errors import NonFiniteError, OutOfRangeError
from .evaluate import EvalConfig, EvalReport, f1_report
from .geometry import build_grid, decode_polyline
from .losses import (
    LossTerms,
    LossWeights,
    bce,
    fidelity_loss_grad,
    iou_loss_arrays,
    smooth_l1_grad,
    total_loss,
)
from .overlap import WidthModel, lane_iou_arrays, pairwise_iou
from .postprocess import PostprocessConfig, run_pipeline
from .refine import AglrParams, ModulationConfig, aglr_backward, aglr_forward, linear_head
from .synthio.scene import NoiseModel, SceneSpec, generate_scene

EVAL_STREAM = 1   # scene stream used for held-out evaluation


@dataclass(frozen=True)
class TrainConfig:
    step_size: float = 0.02
    momentum: float = 0.9
    iterations: int = 1000
    batch_scenes: int = 2
    seed: int = 42
    n_scenes: int = 50
    hidden: int = 32
    train_head: bool = False
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.iterations < 1:
            raise OutOfRangeError("iterations must be >= 1")
        if not self.step_size >= 0:
            raise OutOfRangeError("step_size must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise OutOfRangeError("momentum must lie in [0, 1)")
        if self.batch_scenes < 1 or self.n_scenes < 1:
            raise OutOfRangeError("batch_scenes and n_scenes must be >= 1")


@dataclass
class HeadParams:
    """Toy fidelity head on per-channel mean-square features."""

    w: np.ndarray
    b: float = 0.0


@dataclass
class SceneArrays:
    features: np.ndarray   # (J, C, S)
    xs: np.ndarray         # (J, N)
    valid: np.ndarray      # (J, N)
    p: np.ndarray          # (J,)
    q_hat: np.ndarray      # (J,)
    gt_xs: np.ndarray      # (K, N)
    gt_valid: np.ndarray   # (K, N)
    source: np.ndarray     # (J,)


@dataclass
class TrainState:
    velocity: np.ndarray | None = None
    head_velocity: np.ndarray | None = None
    iteration: int = 0


@dataclass
class StepResult:
    loss: float
    terms: LossTerms
    n_positive: int


def scene_arrays(scene) -> SceneArrays:
    grid = scene.grid
    n = grid.n_points
    gts = scene.gts
    return SceneArrays(
        scene.features,
        np.stack([p.xs for p in scene.priors]),
        np.stack([p.valid_mask(grid) for p in scene.priors]),
        np.array([p.p for p in scene.priors]),
        np.array([p.q for p in scene.priors]),
        np.stack([g.xs for g in gts]) if gts else np.zeros((0, n)),
        np.stack([g.valid for g in gts]) if gts else np.zeros((0, n), dtype=bool),
        scene.source,
    )


def make_scenes(spec: SceneSpec, n_scenes: int, noise: NoiseModel | None = None,
                width: WidthModel | None = None, stream: int = 0, grid=None) -> list:
    return [generate_scene(spec, grid, noise, width, index=i, stream=stream) for i in range(n_scenes)]


def head_features(features: np.ndarray) -> np.ndarray:
    return (features ** 2).mean(axis=-1)


def _objective(params: AglrParams, head: HeadParams | None, batch: list[SceneArrays],
               width: WidthModel, dy: float, weights: LossWeights, assign_cfg: AssignConfig,
               need_grad: bool = True):
    feats = np.concatenate([b.features for b in batch])
    out = aglr_forward(feats, params, batch[0].xs.shape[1], keep_cache=need_grad)
    refined = np.concatenate([b.xs for b in batch]) + out.resampled
    d_refined = np.zeros_like(refined)

    iou_pairs = []
    fid_hat, fid_q, fid_pos, fid_neg = [], [], [], []
    cls_p, cls_y = [], []
    head_in = []
    offset = 0
    for b in batch:
        j = b.xs.shape[0]
        xs = refined[offset:offset + j]
        ious = pairwise_iou(xs, b.valid, b.gt_xs, b.gt_valid, width, dy)
        res = dynamic_assign(cost_matrix(ious, b.p, assign_cfg), ious, assign_cfg)
        for pj in res.positives:
            g = res.matched_gt[int(pj)]
            iou_pairs.append((offset + int(pj), g, b))
        base = len(fid_q)
        fid_q.extend(res.soft_labels)
        fid_pos.extend(base + res.positives)
        fid_neg.extend(base + res.negatives)
        fid_hat.extend(b.q_hat)
        cls_p.extend(b.p)
        cls_y.extend(res.labels)
        if head is not None:
            head_in.append(head_features(b.features))
        offset += j

    reg = iou_term = 0.0
    if iou_pairs:
        idx = np.array([i for i, _, _ in iou_pairs])
        gx = np.stack([b.gt_xs[g] for _, g, b in iou_pairs])
        gv = np.stack([b.gt_valid[g] for _, g, b in iou_pairs])
        pv = np.concatenate([b.valid for b in batch])[idx]
        both = pv & gv
        sel = np.nonzero(both)
        reg, g_reg = smooth_l1_grad(refined[idx][sel], gx[sel])
        d_pos = np.zeros((idx.size, refined.shape[1]))
        d_pos[sel] = weights.w_reg * g_reg
        vals, g_iou = iou_loss_arrays(refined[idx], pv, gx, gv, width, dy)
        iou_term = float(vals.mean())
        d_pos += weights.w_iou * g_iou / idx.size
        np.add.at(d_refined, idx, d_pos)

    cls = float(np.mean(bce(np.array(cls_p), np.array(cls_y, dtype=float))))
    q = np.array(fid_q)
    pos, neg = np.array(fid_pos, dtype=int), np.array(fid_neg, dtype=int)
    head_grad = None
    if head is not None:
        phi = np.concatenate(head_in)
        q_model = linear_head(phi, head.w, head.b, "sigmoid")
        fid, g_q = fidelity_loss_grad(q_model, q, pos, neg)
        dz = weights.w_fid * g_q * q_model * (1.0 - q_model)
        head_grad = np.concatenate([phi.T @ dz, [dz.sum()]])
    else:
        fid, _ = fidelity_loss_grad(np.array(fid_hat), q, pos, neg)
    terms = LossTerms(reg=reg, iou=iou_term, cls=cls, fid=fid, seg=0.0)
    loss = total_loss(terms, weights)
    grads = None
    if need_grad:
        grads, _ = aglr_backward(out, d_refined)
    return loss, terms, grads, head_grad, len(iou_pairs)


def train_step(params: AglrParams, batch: list[SceneArrays], cfg: TrainConfig,
               state: TrainState | None = None, head: HeadParams | None = None,
               width: WidthModel | None = None, dy: float | None = None,
               assign_cfg: AssignConfig | None = None):
    """One momentum descent step; returns ``(params, head, state, StepResult)``
    with the loss measured before the update."""
    width = width or WidthModel()
    dy = dy if dy is not None else build_grid().spacing
    assign_cfg = assign_cfg or AssignConfig()
    state = state or TrainState()
    loss, terms, grads, head_grad, n_pos = _objective(params, head, batch, width, dy,
                                                      cfg.weights, assign_cfg)
    if not np.isfinite(loss):
        raise NonFiniteError(f"non-finite loss at iteration {state.iteration}: {terms}")
    g = grads.flatten()
    mu = cfg.momentum
    vel = g if state.velocity is None else mu * state.velocity + (1.0 - mu) * g
    params = params.unflatten(params.flatten() - cfg.step_size * vel)
    head_vel = None
    if head is not None:
        head_vel = head_grad if state.head_velocity is None else (
            mu * state.head_velocity + (1.0 - mu) * head_grad)
        upd = np.concatenate([head.w, [head.b]]) - cfg.step_size * head_vel
        head = HeadParams(upd[:-1], float(upd[-1]))
    state = TrainState(vel, head_vel, state.iteration + 1)
    return params, head, state, StepResult(loss, terms, n_pos)


def refined_gap(params: AglrParams, arrays: list[SceneArrays], width: WidthModel, dy: float) -> float:
    """Mean ``1 - unsigned IoU`` between each lane-spawned candidate, after
    refinement, and the lane it was spawned from."""
    gaps = []
    for b in arrays:
        spawned = b.source >= 0
        if not spawned.any():
            continue
        out = aglr_forward(b.features[spawned], params, b.xs.shape[1], keep_cache=False)
        src = b.source[spawned]
        iou = lane_iou_arrays(b.xs[spawned] + out.resampled, b.valid[spawned],
                              b.gt_xs[src], b.gt_valid[src], width, dy)
        gaps.append(1.0 - iou)
    return float(np.concatenate(gaps).mean())


@dataclass
class TrainResult:
    params: AglrParams
    head: HeadParams | None
    log: list             # per-iteration dicts
    gap_start: float
    gap_end: float

    @property
    def reduction(self) -> float:
        return 1.0 - self.gap_end / self.gap_start if self.gap_start > 0 else 0.0

    def log_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.log)


def train(cfg: TrainConfig, spec: SceneSpec | None = None, noise: NoiseModel | None = None,
          width: WidthModel | None = None, assign_cfg: AssignConfig | None = None,
          scenes: list | None = None, log_every: int = 1) -> TrainResult:
    spec = spec or SceneSpec(seed=cfg.seed)
    width = width or WidthModel()
    scenes = scenes if scenes is not None else make_scenes(spec, cfg.n_scenes, noise, width)
    arrays = [scene_arrays(s) for s in scenes]
    dy = scenes[0].grid.spacing
    params = AglrParams.init(spec.channels, cfg.hidden, seed=cfg.seed)
    head = HeadParams(np.zeros(spec.channels)) if cfg.train_head else None
    rng = np.random.default_rng(cfg.seed)
    state = TrainState()
    gap_start = refined_gap(params, arrays, width, dy)
    log = []
    order = np.zeros(0, dtype=int)
    for it in range(cfg.iterations):
        if order.size < cfg.batch_scenes:
            order = np.concatenate([order, rng.permutation(len(arrays))])
        pick, order = order[:cfg.batch_scenes], order[cfg.batch_scenes:]
        params, head, state, res = train_step(params, [arrays[i] for i in pick], cfg, state,
                                              head, width, dy, assign_cfg)
        if it % log_every == 0 or it == cfg.iterations - 1:
            log.append({"iteration": it, "loss": res.loss, "reg": res.terms.reg,
                        "iou": res.terms.iou, "cls": res.terms.cls, "fid": res.terms.fid,
                        "seg": res.terms.seg, "positives": res.n_positive})
    gap_end = refined_gap(params, arrays, width, dy)
    return TrainResult(params, head, log, gap_start, gap_end)


ABLATION_ROWS = (
    ("baseline", False, False),
    ("aglr_only", False, True),
    ("lcc_only", True, False),
    ("lcc_aglr", True, True),
)


def attach_offsets(scene, params: AglrParams | None) -> list:
    """Candidates of ``scene`` carrying refinement offsets from ``params``."""
    if params is None:
        return list(scene.priors)
    out = aglr_forward(scene.features, params, scene.grid.n_points, keep_cache=False)
    return [replace(p, refine_offsets=o) for p, o in zip(scene.priors, out.resampled)]


def ablation_run(params: AglrParams | None, scenes: list, width: WidthModel | None = None,
                 post_cfg: PostprocessConfig | None = None, cri_cfg: CriConfig | None = None,
                 mod_cfg: ModulationConfig | None = None, eval_cfg: EvalConfig | None = None,
                 workers: int = 1) -> dict[str, EvalReport]:
    """Evaluate the pipeline under the four score-mode x refinement toggles."""
    width = width or WidthModel()
    post_cfg = post_cfg or PostprocessConfig()
    cri_cfg = cri_cfg or CriConfig()
    mod_cfg = mod_cfg or ModulationConfig()
    eval_cfg = eval_cfg or EvalConfig()
    candidates = [attach_offsets(s, params) for s in scenes]
    gts = [[decode_polyline(g, s.grid) for g in s.gts] for s in scenes]
    reports = {}
    for name, lcc, aglr in ABLATION_ROWS:
        cfg = replace(post_cfg, score_mode="cri" if lcc else "cls_only")
        preds = [[d.points for d in run_pipeline(c, s.grid, width, cfg, cri_cfg, mod_cfg,
                                                 use_refine=aglr)]
                 for c, s in zip(candidates, scenes)]
        reports[name] = f1_report(preds, gts, eval_cfg, workers=workers)
    return reports
