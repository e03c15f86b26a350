import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from grrecon.cli import main
from grrecon.core import read_sinogram, read_volume
from grrecon.gaussians import load_cloud


@pytest.fixture
def config(tmp_path):
    cfg = {"seed": 2, "phantom": {"two_ellipsoid": 10}, "drf": 2.0,
           "geometry": {"n_angles": 20, "det_spacing_mm": 1.0, "n_det": "auto",
                        "randoms": 0.0, "scatter": 0.0},
           "gr": {"fit": {"iterations": 12, "init_count": 80},
                  "density": {"interval": 5, "max_gaussians": 200}},
           "diffusion": {"T": 20},
           "chunking": {"chunk_len": 6, "overlap": 2}}
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg))
    return p


def test_stage_by_stage(tmp_path, config):
    assert main(["phantom", "--config", str(config), "--out", str(tmp_path / "gt")]) == 0
    gt = read_volume(tmp_path / "gt")
    assert gt.grid.dims == (10, 10, 10)

    assert main(["project", "--config", str(config), "--volume", str(tmp_path / "gt.json"),
                 "--out", str(tmp_path / "y"), "--drf", "3", "--seed", "9"]) == 0
    y = read_sinogram(tmp_path / "y")
    assert y.shape == (20, 15, 10)

    assert main(["gr-fit", "--config", str(config), "--sinogram", str(tmp_path / "y.json"),
                 "--out", str(tmp_path / "gr"), "--trace", str(tmp_path / "trace.csv"),
                 "--checkpoint-interval", "5", "--checkpoint-dir", str(tmp_path / "ck")]) == 0
    assert read_volume(tmp_path / "gr").grid.dims == (10, 10, 10)
    rows = list(csv.DictReader(open(tmp_path / "trace.csv")))
    assert len(rows) == 12 and list(rows[0]) == ["iter", "data_loss", "tv_loss", "total",
                                                 "n_gaussians"]
    assert sorted(p.name for p in (tmp_path / "ck").glob("*.json")) == [
        "cloud_000005.json", "cloud_000010.json"]
    assert load_cloud(tmp_path / "ck" / "cloud_000010").n > 0

    assert main(["metrics", "--test", str(tmp_path / "gr.json"), "--reference",
                 str(tmp_path / "gt.json"), "--out", str(tmp_path / "m.csv")]) == 0
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "label,psnr_db,ssim,mse" and len(lines) == 4


def test_diffuse_with_prior_and_guidance(tmp_path, config):
    main(["phantom", "--config", str(config), "--out", str(tmp_path / "gt")])
    prior = {"components": [{"weight": 0.5, "mean": "gt", "variance": 0.05},
                            {"weight": 0.5, "mean": 0.0, "variance": 0.5}]}
    (tmp_path / "prior.json").write_text(json.dumps(prior))
    args = ["diffuse", "--config", str(config), "--T", "30", "--kind", "linear",
            "--prior", str(tmp_path / "prior.json"), "--volume", f"gt={tmp_path / 'gt.json'}",
            "--chains", "3", "--seed", "4", "--out", str(tmp_path / "chains")]
    assert main(args) == 0
    a = [read_volume(tmp_path / "chains" / f"chain_{k:03d}").data for k in range(3)]
    assert not np.array_equal(a[0], a[1])
    assert main(args[:-1] + [str(tmp_path / "chains2"), "--guide", "gt"]) == 0
    b = read_volume(tmp_path / "chains2" / "chain_000").data
    assert not np.array_equal(a[0], b)


def test_pipeline_subcommand(tmp_path, config):
    out = tmp_path / "run"
    assert main(["pipeline", "--config", str(config), "--out", str(out), "--seed", "3"]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["config"]["seed"] == 3 and report["failed_stage"] is None


def test_failure_exit_code_and_stage_name(tmp_path, config, capsys):
    cfg = json.loads(config.read_text())
    cfg["diffusion"]["denoiser_path"] = "net.bin"
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(cfg))
    assert main(["pipeline", "--config", str(bad), "--out", str(tmp_path / "o")]) != 0
    assert "stage diffuse" in capsys.readouterr().err
    assert main(["gr-fit", "--sinogram", str(tmp_path / "missing.json"),
                 "--out", str(tmp_path / "x")]) != 0
    assert "stage gr-fit" in capsys.readouterr().err


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "grrecon.cli", "phantom", "--out",
                           str(tmp_path / "gt")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert read_volume(tmp_path / "gt").grid.dims == (32, 32, 32)
    proc = subprocess.run([sys.executable, "-m", "grrecon.cli", "bogus"], capture_output=True)
    assert proc.returncode != 0
