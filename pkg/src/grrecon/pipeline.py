"""End-to-end reconstruction: phantom -> projections -> GR fit -> guided diffusion -> report.

Sampling runs chunk by chunk along the axial axis; chunks overlap and are
merged with a linear cross-fade whose weights sum to one at every slice.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import (Grid, Metrics, PhantomSpec, Sinogram, Volume, apply_dose_reduction,
                   compute_metrics, create_phantom, read_volume, two_ellipsoid_phantom,
                   write_metrics_csv, write_volume)
from .diffusion import GmmDenoiser, GmmPrior, build_schedule, load_external_denoiser, sample
from .fit import (DensityControlConfig, FitConfig, LossConfig, fit_gr,
                  normalized_back_projection)
from .guidance import GuidanceConfig, GuidanceHook, surrogate_check, window_bounds
from .projector import ForwardModel, forward_project_array

log = logging.getLogger(__name__)

VIEWS = {"axial": 2, "coronal": 1, "sagittal": 0}
TRACE_FIELDS = ["iter", "data_loss", "tv_loss", "total", "n_gaussians"]


# ------------------------------------------------------------------ config

@dataclass
class PipelineConfig:
    seed: int = 0
    # either a phantom description or a path to a volume file; {"two_ellipsoid": n} is a shortcut
    phantom: dict | None = None
    input_volume: str | None = None
    geometry: dict = field(default_factory=lambda: {
        "n_angles": 60, "det_spacing_mm": 1.0, "n_det": "auto", "randoms": 0.0, "scatter": 0.0})
    drf: float = 1.0
    noiseless: bool = False
    gr: dict = field(default_factory=dict)
    diffusion: dict = field(default_factory=dict)
    guidance: dict = field(default_factory=dict)
    chunking: dict = field(default_factory=lambda: {"chunk_len": 96, "overlap": 16})
    deterministic: bool = True
    output_dir: str | None = None

    def __post_init__(self):
        if self.phantom is not None and self.input_volume is not None:
            raise ValueError("give either phantom or input_volume, not both")
        if self.drf < 1:
            raise ValueError(f"drf must be >= 1, got {self.drf}")
        cl, ov = self.chunk_len, self.overlap
        if not cl > ov >= 0:
            raise ValueError(f"chunking needs chunk_len > overlap >= 0, got {cl}, {ov}")
        unknown = set(self.gr) - {"loss", "density", "fit"}
        if unknown:
            raise ValueError(f"unknown gr blocks {sorted(unknown)}")
        # fail early on malformed blocks
        self.loss_config(), self.density_config(), self.fit_config(), self.guidance_config()

    @property
    def chunk_len(self) -> int:
        return int(self.chunking.get("chunk_len", 96))

    @property
    def overlap(self) -> int:
        return int(self.chunking.get("overlap", 16))

    def loss_config(self) -> LossConfig:
        return LossConfig(**self.gr.get("loss", {}))

    def density_config(self) -> DensityControlConfig:
        return DensityControlConfig(**self.gr.get("density", {}))

    def fit_config(self) -> FitConfig:
        d = {"seed": self.seed, "deterministic": self.deterministic}
        d.update(self.gr.get("fit", {}))
        return FitConfig(**d)

    def guidance_config(self) -> GuidanceConfig:
        return GuidanceConfig.from_dict(self.guidance)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown pipeline config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------ chunking

def chunk_layout(nz: int, chunk_len: int, overlap: int) -> list[tuple[int, int]]:
    """``(start, stop)`` slice ranges; the last chunk is anchored to the final slice."""
    if chunk_len <= overlap:
        raise ValueError(f"chunk_len ({chunk_len}) must exceed overlap ({overlap})")
    if overlap < 0 or nz < 1:
        raise ValueError("overlap must be >= 0 and nz >= 1")
    if nz <= chunk_len:
        return [(0, nz)]
    stride = chunk_len - overlap
    starts = list(range(0, nz - chunk_len, stride))
    starts.append(nz - chunk_len)
    return [(s, s + chunk_len) for s in starts]


def chunk_volume(vol, chunk_len: int, overlap: int) -> tuple[list[np.ndarray], list[tuple[int, int]]]:
    data = vol.data if isinstance(vol, Volume) else np.asarray(vol)
    layout = chunk_layout(data.shape[-1], chunk_len, overlap)
    return [data[..., a:b] for a, b in layout], layout


def _ramps(layout: list[tuple[int, int]], nz: int):
    """Per chunk: (overlap start, overlap stop, fade-in weights over the overlap)."""
    if not layout or layout[0][0] != 0 or layout[-1][1] != nz:
        raise ValueError("layout does not cover the volume")
    reach = 0
    for a, b in layout:
        if not (0 <= a <= reach and reach <= b <= nz and a < b):
            raise ValueError(f"bad chunk range {(a, b)}")
        n = max(0, reach - a)
        yield a, a + n, np.arange(1, n + 1) / (n + 1)
        reach = max(reach, b)


def blend_weights(layout: list[tuple[int, int]], nz: int) -> np.ndarray:
    """Effective per-chunk axial weights, shape (n_chunks, nz); they sum to 1 at every slice.

    Chunk ``k`` fades in across its overlap with what precedes it as
    ``(i + 1) / (L + 1)``, and earlier chunks fade out by the complement.
    """
    w = np.zeros((len(layout), nz))
    for k, ((a, b), (o0, o1, ramp)) in enumerate(zip(layout, _ramps(layout, nz))):
        w[:k, o0:o1] *= 1.0 - ramp
        w[:k, o1:b] = 0.0
        w[k, a:b] = 1.0
        w[k, o0:o1] = ramp
    return w


def blend_chunks(chunks: list[np.ndarray], layout: list[tuple[int, int]]) -> np.ndarray:
    """Linear cross-fade along the last axis; consistent chunks reproduce their source."""
    if len(chunks) != len(layout):
        raise ValueError(f"{len(chunks)} chunks for a layout of {len(layout)}")
    nz = layout[-1][1]
    out = None
    for c, (a, b), (o0, o1, ramp) in zip(chunks, layout, _ramps(layout, nz)):
        c = np.asarray(c, dtype=np.float64)
        if c.shape[-1] != b - a:
            raise ValueError(f"chunk of depth {c.shape[-1]} does not fit range {(a, b)}")
        if out is None:
            out = np.zeros(c.shape[:-1] + (nz,))
        # lerp toward the new chunk: exact wherever the two already agree
        cur = out[..., o0:o1]
        out[..., o0:o1] = cur + ramp * (c[..., :o1 - o0] - cur)
        out[..., o1:b] = c[..., o1 - a:]
    return out


# ------------------------------------------------------------------ normalization

def normalize(x: np.ndarray, ref_max: float) -> np.ndarray:
    return 2.0 * np.asarray(x, dtype=np.float64) / ref_max - 1.0


def denormalize(x: np.ndarray, ref_max: float) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) + 1.0) * (ref_max / 2.0)


# ------------------------------------------------------------------ report

@dataclass
class ReconReport:
    config: dict
    stages: list[str] = field(default_factory=list)
    metrics: dict[str, dict[str, Metrics]] = field(default_factory=dict)
    gr_trace: list[dict] = field(default_factory=list)
    normalization: dict = field(default_factory=dict)
    chunks: list[tuple[int, int]] = field(default_factory=list)
    guidance: dict = field(default_factory=dict)
    surrogate: list[dict] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)
    failed_stage: str | None = None
    error: str | None = None
    volumes: dict[str, Volume] = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            # no scanner model is implemented; the projector geometry is synthetic
            "geometry_note": "stacked parallel-beam stand-in, not a scanner geometry",
            "stages": list(self.stages),
            "failed_stage": self.failed_stage,
            "error": self.error,
            "metrics": {s: {v: _jsonable(asdict(m)) for v, m in views.items()}
                        for s, views in self.metrics.items()},
            "normalization": self.normalization,
            "chunks": [list(c) for c in self.chunks],
            "guidance": self.guidance,
            "surrogate": [_jsonable(s) for s in self.surrogate],
            "gr_final": _jsonable(self.gr_trace[-1]) if self.gr_trace else None,
            "timings_s": self.timings,
        }


def _jsonable(d: dict) -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, float) and not math.isfinite(v):
            v = "inf" if v > 0 else ("-inf" if v < 0 else "nan")
        out[k] = v
    return out


class PipelineError(RuntimeError):
    def __init__(self, stage: str, report: ReconReport, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.report = report


# ------------------------------------------------------------------ stages

def _ground_truth(cfg: PipelineConfig) -> Volume:
    if cfg.input_volume is not None:
        return read_volume(cfg.input_volume)
    ph = cfg.phantom
    if ph is None:
        return create_phantom(two_ellipsoid_phantom(32))
    if "two_ellipsoid" in ph:
        return create_phantom(two_ellipsoid_phantom(int(ph["two_ellipsoid"])))
    return create_phantom(PhantomSpec.from_dict(ph))


def forward_model_from(geometry: dict, grid: Grid) -> ForwardModel:
    g = dict(geometry)
    n_det = g.get("n_det", "auto")
    return ForwardModel.default_for(
        grid, n_angles=int(g.get("n_angles", 60)),
        n_det=None if n_det in (None, "auto") else int(n_det),
        det_spacing=g.get("det_spacing_mm"),
        randoms=float(g.get("randoms", 0.0)), scatter=float(g.get("scatter", 0.0)))


def measure(truth: Volume, model: ForwardModel, drf: float, seed: int,
            noiseless: bool = False) -> Sinogram:
    """Expected counts ``P x + r + s``, thinned to the reduced dose unless ``noiseless``."""
    mean = forward_project_array(truth.data, model, truth.grid) + model.background
    sino = model.empty_sinogram().like(mean)
    return sino if noiseless else apply_dose_reduction(sino, drf, seed)


def derive_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([int(seed), *keys]).generate_state(1)[0])


def _build_prior(dcfg: dict, volumes: dict[str, np.ndarray]) -> GmmPrior:
    spec = dcfg.get("prior") or {"components": [{"weight": 1.0, "mean": "gr", "variance": 0.05}]}
    return GmmPrior.from_dict(spec, volumes)


def _metrics_for(vol: Volume, truth: Volume) -> dict[str, Metrics]:
    # computed on float32 copies so the numbers agree with the written files
    t = Volume(vol.grid, vol.data.astype(np.float32).astype(np.float64))
    r = Volume(truth.grid, truth.data.astype(np.float32).astype(np.float64))
    return {view: compute_metrics(t, r, axis) for view, axis in VIEWS.items()}


def run_pipeline(cfg: PipelineConfig) -> ReconReport:
    """Run every stage in order; a failure raises ``PipelineError`` carrying the partial report."""
    conf = cfg.to_dict()
    conf.pop("output_dir")
    rep = ReconReport(config=conf)
    state: dict = {}

    def stage(name, fn):
        t0 = time.perf_counter()
        try:
            fn()
        except Exception as exc:
            rep.failed_stage = name
            rep.error = f"{type(exc).__name__}: {exc}"
            if cfg.output_dir:
                try:
                    emit_report(rep, cfg.output_dir)
                except Exception:
                    log.exception("could not write partial report")
            raise PipelineError(name, rep, exc) from exc
        rep.timings[name] = time.perf_counter() - t0
        rep.stages.append(name)

    def s_phantom():
        state["truth"] = _ground_truth(cfg)
        rep.volumes["ground_truth"] = state["truth"]

    def s_project():
        truth = state["truth"]
        model = forward_model_from(cfg.geometry, truth.grid)
        state["model"] = model
        state["y"] = measure(truth, model, cfg.drf, derive_seed(cfg.seed, 2), cfg.noiseless)
        rep.volumes["low_dose"] = normalized_back_projection(state["y"], model, truth.grid)

    def s_fit():
        res = fit_gr(state["y"], state["model"], state["truth"].grid, cfg.loss_config(),
                     cfg.density_config(), cfg.fit_config())
        rep.volumes["gr"] = res.volume
        rep.gr_trace = res.trace

    def s_normalize():
        ref_max = float(rep.volumes["gr"].data.max())
        if not ref_max > 0:
            raise ValueError("GR reconstruction is identically zero; cannot normalize")
        rep.normalization = {"mode": "ref_max", "ref_max": ref_max,
                             "forward": "x_n = 2 x / ref_max - 1"}
        state["x_gr_n"] = normalize(rep.volumes["gr"].data, ref_max)
        state["x_gt_n"] = normalize(state["truth"].data, ref_max)

    def s_diffuse():
        dcfg = cfg.diffusion
        schedule = build_schedule(int(dcfg.get("T", 1000)), dcfg.get("kind", "linear"),
                                  float(dcfg.get("beta_start", 1e-4)),
                                  float(dcfg.get("beta_end", 0.02)))
        gcfg = cfg.guidance_config()
        if dcfg.get("denoiser_path"):
            denoiser_for = lambda sl: load_external_denoiser(dcfg["denoiser_path"])
        else:
            prior = _build_prior(dcfg, {"gr": state["x_gr_n"], "ground_truth": state["x_gt_n"]})
            denoiser_for = lambda sl: GmmDenoiser(prior.crop(sl), schedule)
        x_gr, x_gt = state["x_gr_n"], state["x_gt_n"]
        gap = float(np.max(np.abs(x_gt - x_gr)))
        xi = gcfg.xi if gcfg.xi is not None else (2.0 * gap if gap > 0 else 1e-6)
        lo, hi = window_bounds(schedule.T, gcfg)
        rep.guidance = {"window_steps": [lo, hi], "eta": gcfg.eta, "omega": gcfg.omega,
                        "scale_with_beta": gcfg.scale_with_beta, "xi": xi, "chunks": []}
        rep.chunks = chunk_layout(x_gr.shape[2], cfg.chunk_len, cfg.overlap)
        samples = []
        for k, (a, b) in enumerate(rep.chunks):
            sl = (slice(None), slice(None), slice(a, b))
            hook = GuidanceHook(x_gr[sl], gcfg, schedule)
            entry = {}

            def record(t, x, _hook=hook, _entry=entry):
                # state right after the first guided step, for the surrogate check
                if _hook.active_steps and "t" not in _entry:
                    _entry["t"], _entry["x"] = t, x.copy()

            x0 = sample(denoiser_for(sl), schedule, (x_gr.shape[0], x_gr.shape[1], b - a),
                        derive_seed(cfg.seed, 5, k), guidance=hook, record=record)
            samples.append(x0)
            steps = hook.active_steps
            rep.guidance["chunks"].append({
                "chunk": k, "range": [a, b], "n_active_steps": len(steps),
                "first_active": steps[0] if steps else None,
                "last_active": steps[-1] if steps else None})
            if entry:
                sr = surrogate_check(entry["x"], x_gr[sl], x_gt[sl], xi).to_dict()
                rep.surrogate.append({"chunk": k, "t": entry["t"], **sr})
        state["samples"] = samples

    def s_blend():
        state["x0_n"] = blend_chunks(state["samples"], rep.chunks)

    def s_denormalize():
        x0 = denormalize(state["x0_n"], rep.normalization["ref_max"])
        rep.volumes["final"] = Volume(state["truth"].grid, x0)

    def s_metrics():
        truth = rep.volumes["ground_truth"]
        for name in ("low_dose", "gr", "final"):
            if name in rep.volumes:
                rep.metrics[name] = _metrics_for(rep.volumes[name], truth)

    stage("phantom", s_phantom)
    stage("project", s_project)
    stage("gr_fit", s_fit)
    stage("normalize", s_normalize)
    stage("diffuse", s_diffuse)
    stage("blend", s_blend)
    stage("denormalize", s_denormalize)
    stage("metrics", s_metrics)
    if cfg.output_dir:
        stage("write", lambda: emit_report(rep, cfg.output_dir))
    return rep


# ------------------------------------------------------------------ output

def write_pgm(path, image: np.ndarray, vmax: float) -> None:
    """8-bit binary graymap, values mapped linearly from [0, vmax]."""
    im = np.asarray(image, dtype=np.float64)
    scale = 255.0 / vmax if vmax > 0 else 0.0
    px = np.clip(np.rint(im * scale), 0, 255).astype(np.uint8)
    # rows top to bottom = second image axis, columns = first
    px = px.T[::-1]
    h, w = px.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + px.tobytes())


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    parts = buf.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path} is not a binary graymap")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError("only 8-bit graymaps are supported")
    data = parts[4] if len(parts) > 4 else b""
    if len(data) != w * h:
        raise ValueError(f"graymap payload of {len(data)} bytes, expected {w * h}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


def center_slice(data: np.ndarray, axis: int) -> np.ndarray:
    return np.take(data, data.shape[axis] // 2, axis=axis)


def emit_report(rep: ReconReport, outdir) -> Path:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n")
    rows = [(f"{stage}_{view}", m) for stage, views in rep.metrics.items()
            for view, m in views.items()]
    write_metrics_csv(out / "metrics.csv", rows)
    with open(out / "gr_trace.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_FIELDS)
        w.writeheader()
        for row in rep.gr_trace:
            w.writerow({k: row[k] for k in TRACE_FIELDS})
    truth = rep.volumes.get("ground_truth")
    vmax = float(truth.data.max()) if truth is not None else 1.0
    for name, vol in rep.volumes.items():
        write_volume(out / name, vol)
        for view, axis in VIEWS.items():
            write_pgm(out / f"{name}_{view}.pgm", center_slice(vol.data, axis), vmax)
    return out
