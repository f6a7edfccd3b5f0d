import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from conftest import make_volume
from petfuse.cli import main
from petfuse.nifti import read_nifti, write_nifti
from petfuse.pipeline import PipelineConfig, PatchParams
from petfuse.tta import TtaPolicy
from petfuse.volume import Kind


@pytest.fixture
def small_case(tmp_path):
    assert main(["phantom", "--out", str(tmp_path / "ph"), "--size", "24", "--folds", "3"]) == 0
    cfg = PipelineConfig.load(tmp_path / "ph" / "config.json")
    # keep the tests quick: small patches and two mirror variants
    cfg = cfg.with_(patch=PatchParams(patch_size=(16, 16, 16)), tta=TtaPolicy(voxel_budget=1))
    cfg.save(tmp_path / "ph" / "config.json")
    return tmp_path / "ph"


def test_phantom_writes_config(small_case):
    cfg = json.loads((small_case / "config.json").read_text())
    assert cfg["schema"] == 1
    assert [f["kind"] for f in cfg["folds"]] == ["ORACLE"] * 3
    assert [f["seed"] for f in cfg["folds"]] == [0, 1, 2]
    for key in ("ct", "pet", "gt"):
        assert (small_case / f"phantom_{key}.nii.gz").exists()


def test_run(small_case, capsys):
    assert main(["run", "--config", str(small_case / "config.json"), "--workers", "2"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["status"] == "OK" and out["dice"] >= 0.9
    assert (small_case / "run" / "consensus.nii.gz").exists()


def test_run_output_override(small_case, tmp_path, capsys):
    out_dir = tmp_path / "elsewhere"
    assert main(["run", "--config", str(small_case / "config.json"), "--output", str(out_dir)]) == 0
    assert (out_dir / "report.json").exists()


def test_batch_exit_codes(small_case, tmp_path, capsys):
    m = tmp_path / "m.csv"
    with open(m, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case_id", "ct", "pet", "gt"])
        w.writerow(["a", small_case / "phantom_ct.nii.gz", small_case / "phantom_pet.nii.gz",
                    small_case / "phantom_gt.nii.gz"])
    args = ["batch", "--manifest", str(m), "--config", str(small_case / "config.json"),
            "--output", str(tmp_path / "b")]
    assert main(args) == 0
    assert json.loads(capsys.readouterr().out)["n_ok"] == 1
    with open(m, "a", newline="") as fh:
        csv.writer(fh).writerow(["bad", tmp_path / "nope.nii.gz", "x", ""])
    assert main(args) == 3


def test_fuse_methods(tmp_path, capsys):
    rng = np.random.default_rng(0)
    truth = rng.random((6, 6, 6)) < 0.4
    paths = []
    for k in range(3):
        noisy = truth ^ (rng.random(truth.shape) < 0.05)
        p = tmp_path / f"m{k}.nii.gz"
        write_nifti(make_volume(noisy, kind=Kind.LABEL), p)
        paths.append(str(p))
    for method in ("staple", "majority", "mean"):
        out = tmp_path / f"{method}.nii.gz"
        rep = tmp_path / f"{method}.json"
        assert main(["fuse", *paths, "--method", method, "--out", str(out), "--report", str(rep)]) == 0
        fused = read_nifti(out)
        assert fused.kind is Kind.LABEL
        assert json.loads(rep.read_text())["method"] == method.upper()
    staple_rep = json.loads((tmp_path / "staple.json").read_text())
    assert staple_rep["converged"] and len(staple_rep["p"]) == 3
    capsys.readouterr()


def test_fuse_grid_mismatch_exit_3(tmp_path, capsys):
    write_nifti(make_volume(np.zeros((2, 2, 2)), kind=Kind.LABEL), tmp_path / "a.nii")
    write_nifti(make_volume(np.zeros((3, 2, 2)), kind=Kind.LABEL), tmp_path / "b.nii")
    code = main(["fuse", str(tmp_path / "a.nii"), str(tmp_path / "b.nii"), "--out", str(tmp_path / "o.nii")])
    assert code == 3
    assert "GRID_MISMATCH" in capsys.readouterr().err


def test_metrics(tmp_path, capsys):
    a = np.zeros((4, 4, 4))
    b = np.zeros((4, 4, 4))
    a[0, 0, :] = 1
    b[0, 0, 2:] = 1
    b[1, 0, :2] = 1
    write_nifti(make_volume(a, kind=Kind.LABEL), tmp_path / "p.nii")
    write_nifti(make_volume(b, kind=Kind.LABEL), tmp_path / "g.nii")
    assert main(["metrics", "--pred", str(tmp_path / "p.nii"), "--gt", str(tmp_path / "g.nii"),
                 "--csv", str(tmp_path / "m.csv")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["cases"][0]["dice"] == 0.5
    assert out["mean"]["dice"] == 0.5
    rows = list(csv.DictReader((tmp_path / "m.csv").read_text().splitlines()))
    assert [r["case_id"] for r in rows] == ["case", "mean"]

    (tmp_path / "list.csv").write_text("case_id,pred,gt\nx,p.nii,g.nii\ny,g.nii,g.nii\n")
    assert main(["metrics", "--manifest", str(tmp_path / "list.csv"), "--format", "csv"]) == 0
    text = capsys.readouterr().out
    assert text.splitlines()[0] == "case_id,dice,fp_volume_ml,fn_volume_ml"
    assert text.splitlines()[-1].startswith("mean,0.75")


def test_metrics_needs_inputs(capsys):
    assert main(["metrics"]) == 2


def test_preprocess(small_case, tmp_path, capsys):
    assert main(["preprocess", "--config", str(small_case / "config.json"),
                 "--output", str(tmp_path / "pp")]) == 0
    out = json.loads(capsys.readouterr().out)
    ct = read_nifti(tmp_path / "pp" / "ct_preprocessed.nii.gz")
    assert list(ct.dims) == out["preprocessed_dims"]
    assert read_nifti(tmp_path / "pp" / "body_mask.nii.gz").kind is Kind.LABEL


def test_config_error_exit_2(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"schema": 99}))
    assert main(["run", "--config", str(tmp_path / "c.json")]) == 2
    assert "config error" in capsys.readouterr().err
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == 2


def test_runtime_error_exit_3(tmp_path, capsys):
    air = make_volume(np.full((8, 8, 8), -1000.0))
    write_nifti(air, tmp_path / "ct.nii.gz")
    write_nifti(make_volume(np.zeros((8, 8, 8)), kind=Kind.PET), tmp_path / "pet.nii.gz")
    PipelineConfig(input_ct="ct.nii.gz", input_pet="pet.nii.gz").save(tmp_path / "c.json")
    cfg = json.loads((tmp_path / "c.json").read_text())
    cfg["output_dir"] = "out"
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert main(["run", "--config", str(tmp_path / "c.json")]) == 3
    assert "EMPTY_MASK" in capsys.readouterr().err


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "petfuse", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "petfuse" in proc.stdout
