import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grrecon.core import Grid, Volume, compute_metrics, read_volume
from grrecon.diffusion import GmmDenoiser, GmmPrior, build_schedule, sample
from grrecon.guidance import GuidanceConfig, GuidanceHook
from grrecon.pipeline import (PipelineConfig, PipelineError, blend_chunks, blend_weights,
                              chunk_layout, chunk_volume, denormalize, normalize, read_pgm,
                              run_pipeline, write_pgm)


# ---------------------------------------------------------------- chunking

def test_chunk_examples():
    assert chunk_layout(96, 96, 16) == [(0, 96)]
    assert [a for a, _ in chunk_layout(176, 96, 16)] == [0, 80]
    assert chunk_layout(40, 96, 16) == [(0, 40)]
    assert chunk_layout(200, 96, 16) == [(0, 96), (80, 176), (104, 200)]
    with pytest.raises(ValueError):
        chunk_layout(100, 16, 16)


@settings(max_examples=200, deadline=None)
@given(nz=st.integers(1, 300), cl=st.integers(2, 100), data=st.data())
def test_layout_covers_and_weights_partition_unity(nz, cl, data):
    ov = data.draw(st.integers(0, cl - 1))
    layout = chunk_layout(nz, cl, ov)
    covered = np.zeros(nz, dtype=bool)
    for k, (a, b) in enumerate(layout):
        covered[a:b] = True
        assert b - a == min(cl, nz)
        if 0 < k < len(layout) - 1:
            assert a - layout[k - 1][0] == cl - ov
    assert covered.all() and layout[-1][1] == nz
    w = blend_weights(layout, nz)
    np.testing.assert_allclose(w.sum(axis=0), 1.0, rtol=0, atol=1e-12)
    assert w.min() >= 0


def test_blend_constant_and_identity():
    c = np.full((4, 3, 50), 2.75)
    chunks, layout = chunk_volume(c, 16, 5)
    np.testing.assert_array_equal(blend_chunks(chunks, layout), c)
    v = np.random.default_rng(0).standard_normal((5, 4, 61))
    chunks, layout = chunk_volume(Volume(Grid(v.shape), v), 20, 7)
    out = blend_chunks(chunks, layout)
    assert np.abs(out - v).max() <= 1e-6 * np.abs(v).max()


def test_blend_cross_fade_closed_form():
    layout = chunk_layout(26, 16, 6)
    assert layout == [(0, 16), (10, 26)]
    a = np.zeros((1, 1, 16))
    b = np.full((1, 1, 16), 3.0)
    out = blend_chunks([a, b], layout)[0, 0]
    i = np.arange(6)
    np.testing.assert_allclose(out[10:16], 3.0 * (i + 1) / 7)
    np.testing.assert_array_equal(out[:10], 0.0)
    np.testing.assert_array_equal(out[16:], 3.0)


def test_blend_errors():
    layout = chunk_layout(30, 16, 4)
    with pytest.raises(ValueError):
        blend_chunks([np.zeros((1, 1, 16))], layout)
    with pytest.raises(ValueError):
        blend_chunks([np.zeros((1, 1, 16)), np.zeros((1, 1, 15))], layout)
    with pytest.raises(ValueError):
        blend_weights([(2, 10)], 10)
    with pytest.raises(ValueError):
        blend_weights([(0, 4), (6, 10)], 10)


def test_normalization_inverts():
    x = np.random.default_rng(1).random((3, 3, 3)) * 5
    n = normalize(x, x.max())
    assert n.max() == pytest.approx(1.0) and n.min() >= -1
    np.testing.assert_allclose(denormalize(n, x.max()), x, rtol=1e-14)


def test_pgm_round_trip(tmp_path):
    img = np.linspace(0, 2, 12).reshape(3, 4)
    write_pgm(tmp_path / "a.pgm", img, 2.0)
    px = read_pgm(tmp_path / "a.pgm")
    assert px.shape == (4, 3) and px.max() == 255 and px.min() == 0


# ---------------------------------------------------------------- config

def test_config_validation():
    with pytest.raises(ValueError):
        PipelineConfig(chunking={"chunk_len": 8, "overlap": 8})
    with pytest.raises(ValueError):
        PipelineConfig(drf=0.5)
    with pytest.raises(ValueError):
        PipelineConfig.from_dict({"seeds": 1})
    with pytest.raises(ValueError):
        PipelineConfig(guidance={"window": [0.9, 0.1]})
    with pytest.raises(ValueError):
        PipelineConfig(phantom={"two_ellipsoid": 8}, input_volume="x.json")


def small_config(**kw):
    d = dict(seed=4, phantom={"two_ellipsoid": 12}, drf=4.0,
             geometry={"n_angles": 24, "det_spacing_mm": 1.0, "n_det": "auto",
                       "randoms": 0.1, "scatter": 0.1},
             gr={"fit": {"iterations": 40, "init_count": 200},
                 "density": {"interval": 15, "max_gaussians": 400}},
             diffusion={"T": 60},
             chunking={"chunk_len": 8, "overlap": 3})
    d.update(kw)
    return PipelineConfig(**d)


@pytest.fixture(scope="module")
def two_runs(tmp_path_factory):
    a_dir = tmp_path_factory.mktemp("run_a")
    b_dir = tmp_path_factory.mktemp("run_b")
    a = run_pipeline(small_config(output_dir=str(a_dir)))
    b = run_pipeline(small_config(output_dir=str(b_dir)))
    return a, b, a_dir, b_dir


def test_all_stages_and_files(two_runs):
    rep, _, out, _ = two_runs
    assert rep.stages == ["phantom", "project", "gr_fit", "normalize", "diffuse", "blend",
                          "denormalize", "metrics", "write"]
    report = json.loads((out / "report.json").read_text())
    assert report["failed_stage"] is None
    assert "stand-in" in report["geometry_note"]
    assert report["chunks"] == [[0, 8], [4, 12]]
    assert report["normalization"]["ref_max"] > 0
    rows = list(csv.reader(open(out / "metrics.csv")))
    assert rows[0] == ["label", "psnr_db", "ssim", "mse"]
    assert len(rows) - 1 == 3 * 3
    trace = list(csv.DictReader(open(out / "gr_trace.csv")))
    assert len(trace) == 40 and set(trace[0]) == {"iter", "data_loss", "tv_loss", "total",
                                                  "n_gaussians"}
    for name in ("ground_truth", "low_dose", "gr", "final"):
        assert read_volume(out / name).grid.dims == (12, 12, 12)
        for view in ("axial", "coronal", "sagittal"):
            assert read_pgm(out / f"{name}_{view}.pgm").size == 144
    g = report["guidance"]
    assert g["window_steps"] == [24, 36]
    assert all(c["n_active_steps"] == 13 for c in g["chunks"])
    assert len(report["surrogate"]) == 2


def test_rerun_is_identical(two_runs):
    a, b, a_dir, b_dir = two_runs
    ja = json.loads((a_dir / "report.json").read_text())
    jb = json.loads((b_dir / "report.json").read_text())
    ja.pop("timings_s"), jb.pop("timings_s")
    assert ja == jb
    for name in ("gr", "final", "low_dose"):
        assert (a_dir / f"{name}.raw").read_bytes() == (b_dir / f"{name}.raw").read_bytes()
        np.testing.assert_array_equal(a.volumes[name].data, b.volumes[name].data)


def test_report_metrics_match_standalone(two_runs):
    rep, _, out, _ = two_runs
    gr, gt = read_volume(out / "gr"), read_volume(out / "ground_truth")
    for view, axis in (("axial", 2), ("coronal", 1), ("sagittal", 0)):
        assert rep.metrics["gr"][view] == compute_metrics(gr, gt, axis)


def test_guidance_disabled_changes_only_diffusion(two_runs):
    guided = two_runs[0]
    off = run_pipeline(small_config(guidance={"window": [0.0, 0.0]}))
    np.testing.assert_array_equal(off.volumes["gr"].data, guided.volumes["gr"].data)
    assert not np.array_equal(off.volumes["final"].data, guided.volumes["final"].data)
    assert all(c["n_active_steps"] == 0 for c in off.guidance["chunks"])
    assert off.surrogate == []


def test_trajectories_split_at_first_guided_step():
    s = build_schedule(100)
    rng = np.random.default_rng(2)
    ref = rng.standard_normal((4, 4, 4)) * 0.5
    den = GmmDenoiser(GmmPrior([1.0], [ref], [0.3]), s)
    traj = {}
    for name, window in (("off", (0.0, 0.0)), ("on", (0.4, 0.6))):
        states = {}
        hook = GuidanceHook(ref, GuidanceConfig(window=window), s)
        sample(den, s, ref.shape, 5, guidance=hook, record=lambda t, x: states.__setitem__(t, x.copy()))
        traj[name] = states
    for t in range(100, 0, -1):
        same = np.array_equal(traj["off"][t], traj["on"][t])
        assert same == (t > 60), t


def test_smoke_drf1_noiseless_T1():
    rep = run_pipeline(small_config(drf=1.0, noiseless=True, diffusion={"T": 1},
                                    chunking={"chunk_len": 96, "overlap": 16}))
    assert set(rep.metrics) == {"low_dose", "gr", "final"}
    assert all(len(v) == 3 for v in rep.metrics.values())
    assert rep.chunks == [(0, 12)]


def test_failure_reports_stage_and_partial_report(tmp_path):
    cfg = small_config(diffusion={"T": 10, "denoiser_path": "weights.bin"},
                       output_dir=str(tmp_path))
    with pytest.raises(PipelineError) as info:
        run_pipeline(cfg)
    assert info.value.stage == "diffuse"
    assert info.value.report.stages == ["phantom", "project", "gr_fit", "normalize"]
    partial = json.loads((tmp_path / "report.json").read_text())
    assert partial["failed_stage"] == "diffuse"


def test_input_volume_path(tmp_path):
    from grrecon.core import create_phantom, two_ellipsoid_phantom, write_volume
    write_volume(tmp_path / "gt", create_phantom(two_ellipsoid_phantom(10)))
    rep = run_pipeline(small_config(phantom=None, input_volume=str(tmp_path / "gt.json"),
                                    diffusion={"T": 5}, gr={"fit": {"iterations": 3,
                                                                    "init_count": 50}}))
    assert rep.volumes["final"].grid.dims == (10, 10, 10)
    with pytest.raises(PipelineError) as info:
        run_pipeline(small_config(phantom=None, input_volume=str(tmp_path / "missing.json")))
    assert info.value.stage == "phantom"
