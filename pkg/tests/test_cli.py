import json
import subprocess
import sys

import numpy as np
import pytest

from atlascrop.cli import EXIT_OK, EXIT_PROCESSING, EXIT_USAGE, dispatch
from atlascrop.io import read_volume
from atlascrop.regions import load_region


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "cfg.json"
    cfg.write_text(json.dumps({"orientations": [[1, True]], "lesion_structure": "kidneys"}))
    assert dispatch(["phantom", "--seed", "70", "--count", "2", "--config", str(cfg), "--out-dir", str(d / "cases"), "--atlas-out", str(d / "atlas")]) == EXIT_OK
    return d


def _status(capsys):
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


def test_phantom_outputs(work):
    truth = json.loads((work / "cases" / "case_70_truth.json").read_text())
    assert (truth["truth"]["k_rot"], truth["truth"]["flip_z"]) == (1, True)
    assert (work / "atlas" / "manifest.json").exists()
    seg = read_volume(work / "cases" / "case_71_seg.nii.gz")
    assert seg.voxels.max() == 19


def test_register_and_eval(work, tmp_path, capsys):
    case = work / "cases"
    args = ["register", "--moving", str(case / "case_70_seg.nii.gz"), "--atlas", str(work / "atlas"), "--out", str(tmp_path / "t.json"), "--report", str(tmp_path / "r.json")]
    assert dispatch(args) == EXIT_OK
    assert _status(capsys)["status"] == "ok"
    tf = json.loads((tmp_path / "t.json").read_text())
    assert (tf["k_rot"], tf["flip_z"]) == (1, True)
    assert "loss_trace" in json.loads((tmp_path / "r.json").read_text())
    args = ["eval", "--moving-seg", str(case / "case_70_seg.nii.gz"), "--roi", str(case / "case_70_roi.nii.gz"), "--atlas", str(work / "atlas"),
            "--region", "kidneys", "--transform", str(tmp_path / "t.json"), "--truth", str(case / "case_70_truth.json"), "--task", "kidneys", "--out", str(tmp_path / "e.json")]
    assert dispatch(args) == EXIT_OK
    out = json.loads((tmp_path / "e.json").read_text())
    assert out["case"]["orientation_correct"] is True
    assert out["case"]["preserved_pct"] > 99
    assert {r["row"] for r in out["rows"]} >= {"preserved foreground", "correct orientation"}


def test_crop(work, tmp_path, capsys):
    case = work / "cases"
    args = ["crop", "--image", str(case / "case_71_image.nii.gz"), "--moving-seg", str(case / "case_71_seg.nii.gz"), "--atlas", str(work / "atlas"),
            "--region", "liver", "--out-dir", str(tmp_path / "crops"), "--format", "native"]
    assert dispatch(args) == EXIT_OK
    status = _status(capsys)
    assert len(status["outputs"]["crops"]) == 1
    report = json.loads((tmp_path / "crops" / "report.json").read_text())
    assert report["region"] == "liver" and report["boxes"][0]["status"] == "ok"
    crop = read_volume(tmp_path / "crops" / "crop_0.vol")
    assert np.any(crop.data == 40 + 10 * 15)


def test_infer_region(work, tmp_path):
    case = work / "cases"
    pairs = [{"seg_path": str(case / f"case_{s}_seg.nii.gz"), "roi_path": str(case / f"case_{s}_roi.nii.gz")} for s in (70, 71)]
    (tmp_path / "pairs.json").write_text(json.dumps(pairs))
    args = ["infer-region", "--pairs", str(tmp_path / "pairs.json"), "--atlas", str(work / "atlas"), "--name", "kidneys",
            "--out", str(tmp_path / "k.json"), "--report", str(tmp_path / "kr.json")]
    assert dispatch(args) == EXIT_OK
    region = load_region(tmp_path / "k.json")
    assert region.n_examples == 2 and len(region.boxes) >= 1
    assert json.loads((tmp_path / "kr.json").read_text())["failures"] == []


def test_build_atlas(work, tmp_path):
    case = work / "cases"
    (tmp_path / "cohort.json").write_text(json.dumps({"scans": [str(case / "case_70_seg.nii.gz")] * 2}))
    assert dispatch(["build-atlas", "--cohort", str(tmp_path / "cohort.json"), "--out", str(tmp_path / "a")]) == EXIT_OK
    rep = json.loads((tmp_path / "a" / "build_report.json").read_text())
    assert rep["rejected"] == [] and len(rep["valid"]) == 2


def test_exit_codes(work, tmp_path, capsys):
    assert dispatch(["--help"]) == EXIT_OK
    assert dispatch(["crop", "--help"]) == EXIT_OK
    assert dispatch(["register", "--bogus"]) == EXIT_USAGE
    assert dispatch([]) == EXIT_USAGE
    assert dispatch(["build-atlas", "--scans", "a", "--out", "b", "--jobs", "0"]) == EXIT_USAGE
    capsys.readouterr()
    args = ["register", "--moving", str(tmp_path / "missing.nii"), "--atlas", str(work / "atlas"), "--out", str(tmp_path / "t.json")]
    assert dispatch(args) == EXIT_PROCESSING
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "FileNotFoundError"
    assert dispatch(["crop", "--image", "x", "--moving-seg", "y", "--atlas", str(tmp_path), "--region", "liver", "--out-dir", str(tmp_path)]) == EXIT_PROCESSING


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "atlascrop", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("register", "crop", "build-atlas", "infer-region", "phantom", "eval"):
        assert cmd in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "atlascrop", "phantom", "--nope"], capture_output=True, text=True)
    assert proc.returncode == 1
