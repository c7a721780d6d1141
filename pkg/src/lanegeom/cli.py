"""Command-line entry point.

Every subcommand honors ``--seed`` and writes a JSON report plus a text
summary when ``--out`` is given.  Wall-clock figures live under a separate
``meta`` key so reports can be compared byte-for-byte once it is removed.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 a checked
acceptance condition failed.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

from .calibrate import cri, pearson
from .errors import ConfigError, ConstantSeriesError, LaneGeomError
from .evaluate import f1_report
from .geometry import decode_polyline
from .gradcheck import TOLERANCE, run_gradcheck
from .postprocess import filter_candidates, nms, refine_prior, Candidate
from .refine import AglrParams
from .synthio.config import Config, config_from_path
from .synthio.formats import (
    format_culane_lines,
    parse_culane_lines,
    read_predictions,
    read_text,
    scene_to_dict,
    write_predictions,
    write_text,
)
from .synthio.scene import generate_scene, population
from .train_toy import EVAL_STREAM, ablation_run, attach_offsets, make_scenes, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3
LINES_SUFFIX = ".lines.txt"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _emit(args, name: str, report: dict, text: str, meta: dict | None = None) -> None:
    print(text, end="")
    if args.out:
        doc = dict(report)
        if meta is not None:
            doc["meta"] = meta
        write_text(Path(args.out) / f"{name}.json", _dump(doc))
        write_text(Path(args.out) / f"{name}.txt", text)


def _scene_spec(cfg: Config, args):
    return replace(cfg.scene, seed=args.seed)


def _stem(i: int) -> str:
    return f"scene_{i:04d}"


# --- subcommands --------------------------------------------------------------

def cmd_synth(args, cfg: Config) -> int:
    out = Path(args.out or "synth_out")
    spec = _scene_spec(cfg, args)
    for i in range(args.scenes):
        sc = generate_scene(spec, noise=cfg.noise, width=cfg.width, index=i, features=False)
        write_text(out / "scenes" / f"{_stem(i)}.json", _dump(scene_to_dict(sc)))
        write_text(out / "gt" / f"{_stem(i)}{LINES_SUFFIX}",
                   format_culane_lines([decode_polyline(g, sc.grid) for g in sc.gts]))
    write_text(out / "manifest.json", _dump({"scenes": args.scenes, "seed": args.seed,
                                             "config": cfg.to_dict()}))
    print(f"wrote {args.scenes} scenes to {out}")
    return EXIT_OK


def cmd_pipeline(args, cfg: Config) -> int:
    from .postprocess import run_pipeline

    out = Path(args.out or "pipeline_out")
    params = AglrParams.from_json(read_text(args.params)) if args.params else None
    post = replace(cfg.postprocess, score_mode=args.mode) if args.mode else cfg.postprocess
    spec = _scene_spec(cfg, args)
    ext = LINES_SUFFIX if args.format == "culane_lines" else ".json"
    n_det = 0
    for i in range(args.scenes):
        sc = generate_scene(spec, noise=cfg.noise, width=cfg.width, index=i, stream=EVAL_STREAM,
                            features=params is not None)
        cands = attach_offsets(sc, params)
        dets = run_pipeline(cands, sc.grid, cfg.width, post, cfg.cri, cfg.modulation,
                            use_refine=not args.no_refine)
        n_det += len(dets)
        write_text(out / "pred" / f"{_stem(i)}{ext}", write_predictions(dets, args.format))
        write_text(out / "gt" / f"{_stem(i)}{LINES_SUFFIX}",
                   format_culane_lines([decode_polyline(g, sc.grid) for g in sc.gts]))
    report = {"scenes": args.scenes, "detections": n_det, "score_mode": post.score_mode,
              "refine": params is not None and not args.no_refine}
    args.out = str(out)
    _emit(args, "pipeline", report, f"{n_det} detections over {args.scenes} scenes\n")
    return EXIT_OK


def _collect(directory: Path) -> dict[str, Path]:
    files = {}
    for p in sorted(directory.iterdir()) if directory.is_dir() else []:
        if p.name.endswith(LINES_SUFFIX):
            files[p.name[:-len(LINES_SUFFIX)]] = p
        elif p.suffix == ".json":
            files[p.stem] = p
    return files


def _load_lanes(path: Path) -> list:
    text = read_text(path)
    if path.name.endswith(LINES_SUFFIX):
        return parse_culane_lines(text, str(path))
    return [d.points for d in read_predictions(text, str(path))]


def cmd_eval(args, cfg: Config) -> int:
    preds, gts = _collect(Path(args.pred)), _collect(Path(args.gt))
    if not preds and not gts:
        print("error: no frames found", file=sys.stderr)
        return EXIT_DATA
    missing = sorted(set(preds) ^ set(gts))
    if missing:
        print("error: missing counterpart for: " + ", ".join(missing), file=sys.stderr)
        return EXIT_DATA
    stems = sorted(preds)
    ecfg = cfg.eval
    if args.thresholds:
        ecfg = replace(ecfg, iou_thresholds=tuple(float(t) for t in args.thresholds.split(",")))
    if args.non_strict:
        ecfg = replace(ecfg, strict=False)
    rep = f1_report([_load_lanes(preds[s]) for s in stems], [_load_lanes(gts[s]) for s in stems],
                    ecfg, workers=args.workers)
    _emit(args, "eval", rep.to_dict(timing=False), rep.to_text(),
          {"wall_time_s": rep.wall_time, "fps": rep.fps})
    return EXIT_OK


def cmd_calib_demo(args, cfg: Config) -> int:
    if args.candidates < 100:
        print("error: need at least 100 candidates", file=sys.stderr)
        return EXIT_CONFIG
    pop = population(args.candidates, _scene_spec(cfg, args), cfg.noise, width=cfg.width)
    fused = cri(pop.p, pop.q, cfg.cri)
    try:
        r_p = pearson(pop.p, pop.q_true)
        r_c = pearson(fused, pop.q_true)
    except ConstantSeriesError as exc:
        print(f"error: degenerate population: {exc}", file=sys.stderr)
        return EXIT_DATA
    report = {"candidates": args.candidates, "seed": args.seed, "pearson_p": r_p,
              "pearson_cri": r_c, "difference": r_c - r_p,
              "passed": bool(r_c - r_p >= 0.10 and r_c >= 0.55)}
    text = (f"pearson(p, q_true)   {r_p:.4f}\npearson(cri, q_true) {r_c:.4f}\n"
            f"difference           {r_c - r_p:+.4f}\n")
    if args.csv:
        rows = ["p,q_hat,q_true,cri,label"] + [
            f"{a:.6f},{b:.6f},{c:.6f},{d:.6f},{int(e)}"
            for a, b, c, d, e in zip(pop.p, pop.q, pop.q_true, fused, pop.labels)]
        write_text(args.csv, "\n".join(rows) + "\n")
    _emit(args, "calib_demo", report, text)
    return EXIT_CHECK if args.check and not report["passed"] else EXIT_OK


def cmd_gradcheck(args, cfg: Config) -> int:
    t0 = time.perf_counter()
    rep = run_gradcheck(args.configs, args.seed)
    report = {"configs": rep.configs, "errors": rep.errors, "max_error": rep.max_error,
              "tolerance": TOLERANCE, "passed": rep.passed}
    text = "".join(f"{k:<14} {v:.3e}\n" for k, v in rep.errors.items())
    text += f"max relative error {rep.max_error:.3e} ({'pass' if rep.passed else 'FAIL'})\n"
    _emit(args, "gradcheck", report, text, {"wall_time_s": time.perf_counter() - t0})
    return EXIT_OK if rep.passed else EXIT_CHECK


def _train_cfg(cfg: Config, args):
    tc = replace(cfg.train, seed=args.seed)
    if getattr(args, "iterations", None):
        tc = replace(tc, iterations=args.iterations)
    if getattr(args, "train_scenes", None):
        tc = replace(tc, n_scenes=args.train_scenes)
    return tc


def cmd_train_toy(args, cfg: Config) -> int:
    tc = _train_cfg(cfg, args)
    t0 = time.perf_counter()
    res = train(tc, _scene_spec(cfg, args), cfg.noise, cfg.width, cfg.assign,
                log_every=args.log_every)
    report = {"iterations": tc.iterations, "scenes": tc.n_scenes, "gap_start": res.gap_start,
              "gap_end": res.gap_end, "reduction": res.reduction,
              "passed": bool(res.reduction >= 0.5)}
    if args.out:
        write_text(Path(args.out) / "params.json", res.params.to_json())
        write_text(Path(args.out) / "train_log.jsonl", res.log_jsonl())
    text = (f"mean (1 - IoU): {res.gap_start:.4f} -> {res.gap_end:.4f} "
            f"({100 * res.reduction:.1f}% reduction)\n")
    _emit(args, "train", report, text, {"wall_time_s": time.perf_counter() - t0})
    return EXIT_CHECK if args.check and not report["passed"] else EXIT_OK


def cmd_ablate(args, cfg: Config) -> int:
    t0 = time.perf_counter()
    if args.params:
        params = AglrParams.from_json(read_text(args.params))
    else:
        params = train(_train_cfg(cfg, args), _scene_spec(cfg, args), cfg.noise, cfg.width,
                       cfg.assign, log_every=10 ** 9).params
    scenes = make_scenes(_scene_spec(cfg, args), args.scenes, cfg.noise, cfg.width,
                         stream=EVAL_STREAM)
    reps = ablation_run(params, scenes, cfg.width, cfg.postprocess, cfg.cri, cfg.modulation,
                        cfg.eval, workers=args.workers)
    f1 = {k: r.f1(0.5) for k, r in reps.items()}
    ordered = (f1["lcc_aglr"] >= f1["lcc_only"] >= f1["baseline"]
               and f1["lcc_aglr"] >= f1["aglr_only"] >= f1["baseline"]
               and f1["lcc_aglr"] > max(f1["lcc_only"], f1["aglr_only"], f1["baseline"]))
    report = {"rows": {k: r.to_dict(timing=False) for k, r in reps.items()},
              "f1_50": f1, "ordering_holds": bool(ordered)}
    text = "".join(f"{k:<10} F1@50 {v:.4f}  F1@75 {reps[k].f1(0.75):.4f}\n" for k, v in f1.items())
    text += f"ordering {'holds' if ordered else 'VIOLATED'}\n"
    _emit(args, "ablate", report, text, {"wall_time_s": time.perf_counter() - t0})
    return EXIT_CHECK if args.check and not ordered else EXIT_OK


def run_bench(cfg: Config, frames: int, seed: int, workers: int = 1) -> dict:
    """Per-stage wall time of filter, modulate, NMS, decode and evaluate."""
    spec = replace(cfg.scene, seed=seed)
    scenes = [generate_scene(spec, noise=cfg.noise, width=cfg.width, index=i,
                             stream=EVAL_STREAM, features=False) for i in range(frames)]
    cands = [[replace(p, refine_offsets=r) for p, r in zip(s.priors, s.residuals)]
             for s in scenes]
    gts = [[decode_polyline(g, s.grid) for g in s.gts] for s in scenes]
    stages = dict.fromkeys(("filter", "modulate", "nms", "decode", "evaluate"), 0.0)
    preds = []
    for sc, cs in zip(scenes, cands):
        t0 = time.perf_counter()
        drawable = [i for i, p in enumerate(cs) if p.valid_block(sc.grid)[1] >= 2]
        kept = filter_candidates([cs[i] for i in drawable], cfg.postprocess, cfg.cri, drawable)
        t1 = time.perf_counter()
        kept = [Candidate(c.index, refine_prior(c.prior, cfg.modulation), c.score) for c in kept]
        t2 = time.perf_counter()
        kept = nms(kept, cfg.width, cfg.postprocess, sc.grid)
        t3 = time.perf_counter()
        preds.append([decode_polyline(c.prior, sc.grid) for c in kept])
        t4 = time.perf_counter()
        for k, dt in zip(("filter", "modulate", "nms", "decode"), (t1 - t0, t2 - t1, t3 - t2, t4 - t3)):
            stages[k] += dt
    # untimed warm-up so a cold JIT cache is not billed as throughput
    f1_report(preds[:1], gts[:1], cfg.eval)
    t0 = time.perf_counter()
    rep = f1_report(preds, gts, cfg.eval, workers=workers)
    stages["evaluate"] = time.perf_counter() - t0
    total = sum(stages.values())
    return {"frames": frames, "stages_s": stages, "total_s": total,
            "fps": frames / total if total > 0 else 0.0, "f1_50": rep.f1(cfg.eval.iou_thresholds[0])}


def cmd_bench(args, cfg: Config) -> int:
    res = run_bench(cfg, args.frames, args.seed, args.workers)
    text = "".join(f"{k:<9} {v * 1000:9.1f} ms\n" for k, v in res["stages_s"].items())
    text += f"total     {res['total_s'] * 1000:9.1f} ms  ({res['fps']:.0f} FPS)\n"
    passed = res["total_s"] <= args.budget
    _emit(args, "bench", {"frames": res["frames"], "f1_50": res["f1_50"]}, text,
          {"stages_s": res["stages_s"], "total_s": res["total_s"], "fps": res["fps"],
           "budget_s": args.budget, "within_budget": passed})
    return EXIT_CHECK if args.check and not passed else EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "eval": cmd_eval,
    "pipeline": cmd_pipeline,
    "calib-demo": cmd_calib_demo,
    "gradcheck": cmd_gradcheck,
    "train-toy": cmd_train_toy,
    "ablate": cmd_ablate,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lanegeom", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="config JSON (default: $LANEGEOM_CONFIG or culane preset)")
        p.add_argument("--lenient", action="store_true", help="warn on unknown config keys")
        p.add_argument("--seed", type=int, default=42)
        p.add_argument("--out", help="output directory")
        return p

    p = add("synth", "generate synthetic scenes")
    p.add_argument("--scenes", type=int, default=10)

    p = add("pipeline", "run post-processing on synthetic scenes")
    p.add_argument("--scenes", type=int, default=10)
    p.add_argument("--params", help="refinement checkpoint JSON")
    p.add_argument("--format", choices=("culane_lines", "json"), default="culane_lines")
    p.add_argument("--mode", choices=("cri", "cls_only"))
    p.add_argument("--no-refine", action="store_true")

    p = add("eval", "evaluate prediction files against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--thresholds", help="comma-separated IoU thresholds")
    p.add_argument("--non-strict", action="store_true", help="count IoU == threshold as a hit")
    p.add_argument("--workers", type=int, default=1)

    p = add("calib-demo", "correlation of scores with true quality")
    p.add_argument("--candidates", type=int, default=5000)
    p.add_argument("--csv", help="write per-candidate scatter data")
    p.add_argument("--check", action="store_true")

    p = add("gradcheck", "finite-difference audit of analytic gradients")
    p.add_argument("--configs", type=int, default=200)

    p = add("train-toy", "fit the refinement block on synthetic scenes")
    p.add_argument("--iterations", type=int)
    p.add_argument("--train-scenes", type=int)
    p.add_argument("--log-every", type=int, default=10)
    p.add_argument("--check", action="store_true")

    p = add("ablate", "score-mode x refinement ablation")
    p.add_argument("--params", help="refinement checkpoint JSON (trained if absent)")
    p.add_argument("--scenes", type=int, default=200)
    p.add_argument("--iterations", type=int)
    p.add_argument("--train-scenes", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--check", action="store_true")

    p = add("bench", "time the post-processing and evaluation stages")
    p.add_argument("--frames", type=int, default=1000)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--budget", type=float, default=5.0, help="seconds")
    p.add_argument("--check", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_path(args.config, args.lenient)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (LaneGeomError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
