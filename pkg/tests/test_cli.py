"""End-to-end command-line behavior on a small synthetic scene."""

import json
import subprocess
import sys

import numpy as np
import pytest

from fusformer.autograd import Tensor
from fusformer.cli import load_sample_dir, run
from fusformer.data import read_cube, upsample_bicubic, write_cube
from fusformer.metrics import report, report_from_json
from fusformer.model import FusformerConfig, param_count, predictor
from fusformer.data import FusionSample, tile_infer
from fusformer.train import load_checkpoint

SMALL_CONFIG = {
    "hsi_bands": 5,
    "msi_bands": 3,
    "embed_dim": 8,
    "heads": 2,
    "mlp_hidden": 12,
    "seed": 3,
    "steps": 2,
    "batch": 2,
    "patch": 8,
    "ratio": 4,
    "log_every": 1,
}


@pytest.fixture()
def small_config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(SMALL_CONFIG))
    return path


@pytest.fixture()
def scene_dir(tmp_path):
    out = tmp_path / "scene"
    assert run(["simulate", "--gt", "synth:5,16,16,5", "--out", str(out)]) == 0
    return out


def test_params_prints_default_count(capsys):
    assert run(["params"]) == 0
    printed = capsys.readouterr().out.strip()
    assert printed == str(param_count(FusformerConfig()))


def test_params_with_config(capsys, small_config):
    assert run(["params", "--config", str(small_config)]) == 0
    printed = capsys.readouterr().out.strip()
    model_cfg = FusformerConfig(hsi_bands=5, msi_bands=3, embed_dim=8, heads=2, mlp_hidden=12)
    assert printed == str(param_count(model_cfg))


def test_usage_errors_exit_2():
    assert run([]) == 2
    assert run(["frobnicate"]) == 2
    assert run(["simulate"]) == 2  # missing required arguments


def test_operational_errors_exit_1(tmp_path, capsys):
    assert run(["eval", "--pred", str(tmp_path / "nope.hsc"),
                "--gt", str(tmp_path / "nope.hsc"), "--ratio", "4",
                "--out", str(tmp_path / "r.json")]) == 1
    assert "error:" in capsys.readouterr().err

    bad_cfg = tmp_path / "bad.json"
    bad_cfg.write_text('{"steps": 1, "warp_factor": 9}')
    assert run(["params", "--config", str(bad_cfg)]) == 1

    not_json_obj = tmp_path / "list.json"
    not_json_obj.write_text("[1, 2]")
    assert run(["params", "--config", str(not_json_obj)]) == 1


def test_simulate_writes_scene_and_manifest(scene_dir):
    for name in ("gt.hsc", "lr.hsc", "msi.hsc", "up.hsc", "manifest.json"):
        assert (scene_dir / name).is_file()
    gt = read_cube(scene_dir / "gt.hsc")
    lr = read_cube(scene_dir / "lr.hsc")
    msi = read_cube(scene_dir / "msi.hsc")
    assert gt.shape == (16, 16, 5)
    assert lr.shape == (4, 4, 5)
    assert msi.shape == (16, 16, 3)

    manifest = json.loads((scene_dir / "manifest.json").read_text())
    assert manifest["command"] == "simulate"
    assert manifest["seed"] == 5
    assert manifest["config"]["ratio"] == 4
    assert manifest["wall_time_s"] >= 0
    assert set(manifest["outputs"]) == {"gt.hsc", "lr.hsc", "msi.hsc", "up.hsc"}

    sample = load_sample_dir(scene_dir)
    assert sample.ratio == 4
    np.testing.assert_array_equal(sample.up, upsample_bicubic(lr, 4))


def test_load_sample_dir_reports_missing_files(scene_dir):
    (scene_dir / "up.hsc").unlink()
    with pytest.raises(ValueError, match="up.hsc"):
        load_sample_dir(scene_dir)


def test_eval_of_ground_truth_against_itself(scene_dir, tmp_path):
    out = tmp_path / "self.json"
    assert run(["eval", "--pred", str(scene_dir / "gt.hsc"),
                "--gt", str(scene_dir / "gt.hsc"), "--ratio", "4",
                "--out", str(out)]) == 0
    obj = json.loads(out.read_text())
    assert obj["psnr"] == "inf"
    # sam's arccos sees a cosine one ULP shy of 1, so it is tiny, not zero
    assert 0.0 <= obj["sam"] <= 1e-6
    assert obj["ergas"] == 0.0
    assert obj["ssim"] == 1.0
    assert all(v == "inf" for v in obj["per_band_psnr"])
    assert (tmp_path / "self.json.manifest.json").is_file()


def test_train_infer_eval_pipeline(scene_dir, small_config, tmp_path):
    ckpt_path = tmp_path / "model.ckpt"
    assert run(["train", "--data", str(scene_dir), "--config", str(small_config),
                "--out", str(ckpt_path)]) == 0
    assert ckpt_path.is_file()
    manifest = json.loads((tmp_path / "model.ckpt.manifest.json").read_text())
    assert manifest["command"] == "train"
    assert manifest["config"]["train"]["steps"] == 2
    assert manifest["outputs"]["checkpoint"] == str(ckpt_path)

    fused_path = tmp_path / "fused.hsc"
    assert run(["infer", "--ckpt", str(ckpt_path), "--lr", str(scene_dir / "lr.hsc"),
                "--msi", str(scene_dir / "msi.hsc"), "--tile", "8", "--overlap", "4",
                "--out", str(fused_path)]) == 0
    fused = read_cube(fused_path)
    assert fused.shape == (16, 16, 5)

    # the CLI path and the library path must agree bit for bit
    ckpt = load_checkpoint(ckpt_path)
    lr = read_cube(scene_dir / "lr.hsc")
    msi = read_cube(scene_dir / "msi.hsc")
    sample = FusionSample(gt=None, lr=lr, msi=msi, up=upsample_bicubic(lr, 4), ratio=4)
    params = {n: Tensor(a) for n, a in ckpt.params.items()}
    want = tile_infer(predictor(params, ckpt.model_cfg), sample, 8, 4)
    np.testing.assert_array_equal(fused, want)

    report_path = tmp_path / "fused_report.json"
    assert run(["eval", "--pred", str(fused_path), "--gt", str(scene_dir / "gt.hsc"),
                "--ratio", "4", "--out", str(report_path)]) == 0
    got = report_from_json(report_path.read_text())
    assert got == report(fused, read_cube(scene_dir / "gt.hsc"), 4)


def test_train_resume_flag_continues(scene_dir, small_config, tmp_path):
    ckpt_path = tmp_path / "model.ckpt"
    assert run(["train", "--data", str(scene_dir), "--config", str(small_config),
                "--out", str(ckpt_path)]) == 0
    assert load_checkpoint(ckpt_path).step == 2

    longer = dict(SMALL_CONFIG, steps=4)
    longer_cfg = tmp_path / "longer.json"
    longer_cfg.write_text(json.dumps(longer))
    out2 = tmp_path / "resumed.ckpt"
    assert run(["train", "--data", str(scene_dir), "--config", str(longer_cfg),
                "--resume", str(ckpt_path), "--out", str(out2)]) == 0
    assert load_checkpoint(out2).step == 4


def test_residual_dump(scene_dir, tmp_path):
    pred = read_cube(scene_dir / "up.hsc")
    gt = read_cube(scene_dir / "gt.hsc")
    out = tmp_path / "report.json"
    rdir = tmp_path / "residual"
    assert run(["eval", "--pred", str(scene_dir / "up.hsc"),
                "--gt", str(scene_dir / "gt.hsc"), "--ratio", "4",
                "--out", str(out), "--residual", str(rdir)]) == 0
    err = read_cube(rdir / "residual.hsc")
    np.testing.assert_array_equal(
        err, np.abs(pred.astype(np.float64) - gt.astype(np.float64)).astype(np.float32)
    )
    assert (rdir / "residual.pgm").read_bytes().startswith(b"P5\n16 16\n255\n")


def test_check_suites_exit_zero():
    assert run(["check", "--oracle"]) == 0
    assert run(["check", "--perm"]) == 0


def test_module_entry_point_subprocess():
    proc = subprocess.run(
        [sys.executable, "-m", "fusformer.cli", "params"],
        capture_output=True, text=True, timeout=120,
    )
    assert proc.returncode == 0
    assert proc.stdout.strip() == str(param_count(FusformerConfig()))
