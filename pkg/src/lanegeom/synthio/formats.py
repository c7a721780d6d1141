"""Lane text and JSON formats.

Lines text holds one lane per line as whitespace-separated ``x y`` pairs,
written bottom to top with four decimals.  Prediction JSON is
``{"lanes": [{"points": [[x, y], ...], "score": s, "p": p, "q": q}]}``.
"""

from __future__ import annotations

import json
import warnings
from pathlib import Path

import numpy as np

from ..errors import EmptyLaneError, ParseError
from ..geometry import Lane, LanePrior, SampleGrid, decode_polyline
from ..postprocess import Detection

# half a unit in the fourth decimal, with slack for binary representation
Y_QUANTUM = 5.001e-5


def parse_culane_lines(text: str, source: str = "") -> list[np.ndarray]:
    """Raw ``(M, 2)`` point arrays, one per non-blank line.

    Lanes with fewer than two points are skipped with a warning.
    """
    lanes = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) % 2:
            raise ParseError(f"odd number of coordinates ({len(tokens)})", lineno, source)
        try:
            vals = np.array([float(t) for t in tokens])
        except ValueError as exc:
            raise ParseError(str(exc), lineno, source) from None
        if not np.all(np.isfinite(vals)):
            raise ParseError("non-finite coordinate", lineno, source)
        pts = vals.reshape(-1, 2)
        if pts.shape[0] < 2:
            warnings.warn(f"{source or 'input'}:{lineno}: lane with {pts.shape[0]} point skipped")
            continue
        lanes.append(pts)
    return lanes


def _snap_rows(pts: np.ndarray, grid: SampleGrid) -> np.ndarray:
    """Move y values that match a grid row to within the written precision
    onto that row, so 4-decimal rounding of y is not amplified by the slope."""
    rows = np.asarray(grid.rows)
    k = np.clip(np.searchsorted(rows, pts[:, 1]), 1, rows.size - 1)
    near = np.where(np.abs(rows[k - 1] - pts[:, 1]) < np.abs(rows[k] - pts[:, 1]), k - 1, k)
    hit = np.abs(rows[near] - pts[:, 1]) <= Y_QUANTUM
    out = pts.copy()
    out[hit, 1] = rows[near[hit]]
    return out


def read_culane_lines(text: str, grid: SampleGrid, source: str = "") -> list[Lane]:
    """Lanes resampled onto ``grid`` rows by linear interpolation in y."""
    out = []
    for k, pts in enumerate(parse_culane_lines(text, source)):
        pts = _snap_rows(pts, grid)
        try:
            out.append(Lane.from_points(pts, grid))
        except EmptyLaneError as exc:
            warnings.warn(f"{source or 'input'}: lane {k} skipped: {exc}")
    return out


def _fmt(v: float) -> str:
    return f"{v:.4f}"


def format_culane_lines(polylines) -> str:
    """Lines text for ``(M, 2)`` point arrays, points ordered bottom to top."""
    lines = []
    for pts in polylines:
        pts = np.asarray(getattr(pts, "points", pts), dtype=np.float64).reshape(-1, 2)
        order = np.argsort(-pts[:, 1], kind="stable")
        lines.append(" ".join(f"{_fmt(x)} {_fmt(y)}" for x, y in pts[order]))
    return "".join(line + "\n" for line in lines)


def lane_points(lane: Lane | LanePrior, grid: SampleGrid) -> np.ndarray:
    return decode_polyline(lane, grid)


def write_predictions(detections, fmt: str = "json") -> str:
    if fmt == "culane_lines":
        return format_culane_lines([d.points for d in detections])
    if fmt == "json":
        lanes = [{"points": np.asarray(d.points, dtype=float).tolist(), "score": float(d.score),
                  "p": float(d.p), "q": float(d.q)} for d in detections]
        return json.dumps({"lanes": lanes}, sort_keys=True) + "\n"
    raise ValueError(f"unknown prediction format {fmt!r}")


def read_predictions(text: str, source: str = "") -> list[Detection]:
    try:
        doc = json.loads(text)
        return [Detection(np.asarray(l["points"], dtype=np.float64).reshape(-1, 2),
                          float(l["score"]), float(l["p"]), float(l["q"]))
                for l in doc["lanes"]]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad prediction JSON: {exc}", getattr(exc, "lineno", None), source) from None


def scene_to_dict(scene) -> dict:
    grid = scene.grid
    return {
        "grid": {"height": grid.height, "width": grid.width, "n_points": grid.n_points},
        "gts": [lane_points(g, grid).tolist() for g in scene.gts],
        "priors": [{"x": pr.x, "y": pr.y, "theta": pr.theta, "length": pr.length,
                    "xs": pr.xs.tolist(), "p": pr.p, "q": pr.q,
                    "q_true": float(qt), "label": int(lb)}
                   for pr, qt, lb in zip(scene.priors, scene.q_true, scene.labels)],
    }


def write_text(path, text: str) -> None:
    """Write ``text``, creating parent directories; errors name the path."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def read_text(path) -> str:
    path = Path(path)
    try:
        return path.read_text()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror or exc}") from exc
