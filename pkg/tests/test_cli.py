import json
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from lanegeom.calibrate import pearson
from lanegeom.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, main

FIXTURE = Path(__file__).parent / "fixtures" / "eval"


def tree(root: Path) -> dict:
    """Relative path -> content, with wall-clock metadata removed."""
    out = {}
    for p in sorted(root.rglob("*")):
        if not p.is_file():
            continue
        text = p.read_text()
        if p.suffix == ".json":
            doc = json.loads(text)
            if isinstance(doc, dict):
                doc.pop("meta", None)
            text = json.dumps(doc, sort_keys=True)
        out[str(p.relative_to(root))] = text
    return out


def run(*argv) -> int:
    return main([str(a) for a in argv])


def test_synth_is_reproducible(tmp_path):
    assert run("synth", "--scenes", 10, "--seed", 7, "--out", tmp_path / "a") == EXIT_OK
    assert run("synth", "--scenes", 10, "--seed", 7, "--out", tmp_path / "b") == EXIT_OK
    a, b = tree(tmp_path / "a"), tree(tmp_path / "b")
    assert len([k for k in a if k.startswith("gt")]) == 10
    assert a == b
    # byte-level, not just semantic
    for rel in a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_eval_golden_fixture(tmp_path):
    assert run("eval", "--pred", FIXTURE / "pred", "--gt", FIXTURE / "gt", "--out", tmp_path) == 0
    doc = json.loads((tmp_path / "eval.json").read_text())
    assert "wall_time_s" in doc.pop("meta")
    produced = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    assert produced == (FIXTURE / "golden.json").read_text()


def test_eval_self_is_perfect(tmp_path, capsys):
    assert run("eval", "--pred", FIXTURE / "gt", "--gt", FIXTURE / "gt", "--out", tmp_path) == 0
    doc = json.loads((tmp_path / "eval.json").read_text())
    assert all(v["f1"] == 1.0 for v in doc["thresholds"].values())
    assert "frames: 8" in capsys.readouterr().out


def test_eval_thresholds_flag(tmp_path):
    assert run("eval", "--pred", FIXTURE / "pred", "--gt", FIXTURE / "gt",
               "--thresholds", "0.3,0.6", "--out", tmp_path) == 0
    assert sorted(json.loads((tmp_path / "eval.json").read_text())["thresholds"]) == ["0.30", "0.60"]


def test_eval_empty_dirs(tmp_path, capsys):
    (tmp_path / "p").mkdir()
    (tmp_path / "g").mkdir()
    assert run("eval", "--pred", tmp_path / "p", "--gt", tmp_path / "g") == EXIT_DATA
    assert "no frames found" in capsys.readouterr().err


def test_eval_missing_counterpart(tmp_path, capsys):
    gt = tmp_path / "gt"
    shutil.copytree(FIXTURE / "gt", gt)
    (gt / "scene_0003.lines.txt").unlink()
    assert run("eval", "--pred", FIXTURE / "pred", "--gt", gt) == EXIT_DATA
    assert "scene_0003" in capsys.readouterr().err


def test_eval_parse_error_names_file_and_line(tmp_path, capsys):
    gt = tmp_path / "gt"
    shutil.copytree(FIXTURE / "gt", gt)
    with open(gt / "scene_0002.lines.txt", "a") as fh:
        fh.write("1 2 3\n")
    assert run("eval", "--pred", FIXTURE / "pred", "--gt", gt) == EXIT_DATA
    err = capsys.readouterr().err
    assert "scene_0002.lines.txt:5" in err


def test_eval_workers_agree(tmp_path):
    assert run("eval", "--pred", FIXTURE / "pred", "--gt", FIXTURE / "gt", "--out", tmp_path / "1") == 0
    assert run("eval", "--pred", FIXTURE / "pred", "--gt", FIXTURE / "gt", "--workers", 2,
               "--out", tmp_path / "2") == 0
    assert tree(tmp_path / "1") == tree(tmp_path / "2")


@pytest.mark.parametrize("fmt", ["culane_lines", "json"])
def test_pipeline_reproducible_and_evaluable(tmp_path, fmt):
    for d in ("a", "b"):
        assert run("pipeline", "--scenes", 4, "--format", fmt, "--out", tmp_path / d) == 0
    assert tree(tmp_path / "a") == tree(tmp_path / "b")
    assert run("eval", "--pred", tmp_path / "a" / "pred", "--gt", tmp_path / "a" / "gt") == 0


def test_calib_demo_csv(tmp_path):
    csv = tmp_path / "scatter.csv"
    assert run("calib-demo", "--candidates", 500, "--csv", csv, "--out", tmp_path) == 0
    lines = csv.read_text().splitlines()
    assert len(lines) == 501 and lines[0] == "p,q_hat,q_true,cri,label"
    rep = json.loads((tmp_path / "calib_demo.json").read_text())
    assert rep["difference"] == pytest.approx(rep["pearson_cri"] - rep["pearson_p"])


def test_calib_demo_noiseless_ranks_agree(tmp_path, monkeypatch):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"preset": "culane",
                               "noise": {"sigma_p": 0.0, "sigma_q": 0.0, "rho": 0.0}}))
    monkeypatch.setenv("LANEGEOM_CONFIG", str(cfg))
    csv = tmp_path / "s.csv"
    assert run("calib-demo", "--candidates", 300, "--csv", csv) == 0
    data = np.loadtxt(csv, delimiter=",", skiprows=1)
    rank = lambda v: np.argsort(np.argsort(v, kind="stable"), kind="stable")
    q_rank = rank(data[:, 2])
    assert pearson(rank(data[:, 0]), q_rank) == pytest.approx(1.0)
    assert pearson(rank(data[:, 3]), q_rank) == pytest.approx(1.0)


def test_calib_demo_too_few_candidates():
    assert run("calib-demo", "--candidates", 50) == EXIT_CONFIG


def test_gradcheck_command(tmp_path, capsys):
    assert run("gradcheck", "--configs", 3, "--out", tmp_path) == 0
    rep = json.loads((tmp_path / "gradcheck.json").read_text())
    assert rep["passed"] and rep["max_error"] <= 1e-5
    assert "max relative error" in capsys.readouterr().out


def test_train_toy_and_ablate_reproducible(tmp_path):
    args = ["--iterations", 3, "--train-scenes", 3]
    for d in ("a", "b"):
        assert run("train-toy", *args, "--log-every", 1, "--out", tmp_path / d) == 0
    assert tree(tmp_path / "a") == tree(tmp_path / "b")
    assert len((tmp_path / "a" / "train_log.jsonl").read_text().splitlines()) == 3
    for d in ("c", "e"):
        assert run("ablate", "--params", tmp_path / "a" / "params.json", "--scenes", 5,
                   "--out", tmp_path / d) == 0
    assert tree(tmp_path / "c") == tree(tmp_path / "e")
    rows = json.loads((tmp_path / "c" / "ablate.json").read_text())["f1_50"]
    assert set(rows) == {"baseline", "aglr_only", "lcc_only", "lcc_aglr"}


def test_bench_reports_stages(tmp_path):
    assert run("bench", "--frames", 20, "--out", tmp_path) == 0
    doc = json.loads((tmp_path / "bench.json").read_text())
    assert set(doc["meta"]["stages_s"]) == {"filter", "modulate", "nms", "decode", "evaluate"}
    assert doc["meta"]["fps"] > 0 and doc["frames"] == 20


def test_config_error_exit_code(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"preset": "culane", "postprocess": {"top_k": "x"}}))
    assert run("synth", "--scenes", 1, "--config", cfg, "--out", tmp_path / "o") == EXIT_CONFIG
    assert "postprocess.top_k" in capsys.readouterr().err


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--no-such-flag"])
    assert exc.value.code == EXIT_CONFIG
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == EXIT_CONFIG


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "lanegeom", "synth", "--scenes", "1",
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "manifest.json").exists()
