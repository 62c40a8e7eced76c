import json

import numpy as np
import pytest

from lcmm_subtypes.cli import main
from helpers import run_pipeline


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    return root, run_pipeline(root)


def test_pipeline_outputs(pipeline):
    root, digests = pipeline
    assert set(digests["simulate"]) >= {"trajectories.csv", "covariates.csv", "events.csv"}
    assert set(digests["fit"]) == {"fit.json", "memberships.csv"}
    assert set(digests["report"]) == {"summary.txt", "trajectory_plot.csv", "km_plot.csv"}
    summary = (root / "rep" / "summary.txt").read_text()
    assert "entropy" in summary.lower()
    assert "Fast progressors" in summary
    head = (root / "rep" / "trajectory_plot.csv").read_text().splitlines()[0]
    assert head == "cluster,time,value"
    for stage in ("sim", "fit", "val", "char", "rep"):
        m = json.loads((root / stage / "manifest.json").read_text())
        assert m["status"] == "ok" and m["version"]


def test_inputs_unchanged(pipeline):
    root, digests = pipeline
    m = json.loads((root / "char" / "manifest.json").read_text())
    from lcmm_subtypes.cli import sha256
    for path, digest in m["inputs"].items():
        assert sha256(path) == digest


def test_deterministic_rerun(pipeline, tmp_path):
    _, first = pipeline
    assert run_pipeline(tmp_path) == first


def test_single_class_has_no_entropy(pipeline, tmp_path):
    root, _ = pipeline
    assert main(["fit", "--data", str(root / "sim"), "--classes", "1", "--starts", "1",
                 "--out", str(tmp_path / "f")]) == 0
    assert main(["report", "--run", str(tmp_path / "f"), "--out", str(tmp_path / "r")]) == 0
    text = (tmp_path / "r" / "summary.txt").read_text()
    assert "entropy" not in text.lower()
    assert text.startswith("classes: 1\n")


def _err(capsys):
    line = capsys.readouterr().err.strip().splitlines()[-1]
    return json.loads(line)


def test_missing_input_is_usage_error(tmp_path, capsys):
    code = main(["fit", "--trajectories", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "o")])
    assert code == 2
    assert _err(capsys)["exit_code"] == 2
    m = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert m["status"] == "error" and m["error"]["exit_code"] == 2


def test_bad_data_exit_code(tmp_path, capsys):
    f = tmp_path / "t.csv"
    f.write_text("eye_id,subject_id,time_years,value\na,s,0,x\n")
    assert main(["fit", "--trajectories", str(f), "--out", str(tmp_path / "o")]) == 3
    assert _err(capsys)["error"] == "data"


def test_numerical_failure_exit_code(pipeline, tmp_path, capsys, monkeypatch):
    root, _ = pipeline
    from lcmm_subtypes import cli
    from lcmm_subtypes.estimator import FitError

    def boom(*a, **k):
        raise FitError("all starts failed", [])

    monkeypatch.setattr(cli, "fit", boom)
    assert main(["fit", "--data", str(root / "sim"), "--classes", "2", "--out", str(tmp_path / "o")]) == 4
    assert _err(capsys)["exit_code"] == 4


def test_version_mismatch(pipeline, tmp_path, capsys):
    root, _ = pipeline
    d = json.loads((root / "fit" / "fit.json").read_text())
    d["version"] = "0.0.0-other"
    run = tmp_path / "run"
    run.mkdir()
    (run / "fit.json").write_text(json.dumps(d))
    assert main(["report", "--run", str(run), "--out", str(tmp_path / "r")]) == 2
    assert "version" in _err(capsys)["message"].lower()
