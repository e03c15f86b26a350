"""``grrecon`` command line: one subcommand per pipeline stage plus the full run."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings
from pathlib import Path

from .core import (Grid, Volume, compute_metrics, read_sinogram, read_volume, write_metrics_csv,
                   write_sinogram, write_volume)
from .diffusion import GmmDenoiser, GmmPrior, build_schedule, load_external_denoiser, sample
from .fit import fit_gr
from .gaussians import save_cloud
from .guidance import GuidanceHook
from .pipeline import (TRACE_FIELDS, VIEWS, PipelineConfig, PipelineError, _ground_truth,
                       forward_model_from, measure, run_pipeline)
from .projector import ForwardModel


def _load_config(args) -> PipelineConfig:
    d = json.loads(Path(args.config).read_text()) if args.config else {}
    if getattr(args, "seed", None) is not None:
        d["seed"] = args.seed
    if getattr(args, "drf", None) is not None:
        d["drf"] = args.drf
    return PipelineConfig.from_dict(d)


def cmd_phantom(args) -> None:
    cfg = _load_config(args)
    write_volume(args.out, _ground_truth(cfg))


def cmd_project(args) -> None:
    cfg = _load_config(args)
    vol = read_volume(args.volume)
    model = forward_model_from(cfg.geometry, vol.grid)
    noiseless = cfg.noiseless or args.noiseless
    write_sinogram(args.out, measure(vol, model, cfg.drf, cfg.seed, noiseless))


def cmd_gr_fit(args) -> None:
    cfg = _load_config(args)
    y = read_sinogram(args.sinogram)
    g = cfg.geometry
    model = ForwardModel.from_sinogram(y, float(g.get("randoms", 0.0)), float(g.get("scatter", 0.0)))
    if args.dims:
        grid = Grid(tuple(args.dims), (y.det_spacing,) * 3)
    else:
        n = y.n_slices
        grid = Grid((n, n, n), (y.det_spacing,) * 3)
    callback = None
    if args.checkpoint_interval:
        ckdir = Path(args.checkpoint_dir or Path(args.out).parent / "checkpoints")

        def checkpoint(it, cloud):
            if it % args.checkpoint_interval == 0:
                save_cloud(ckdir / f"cloud_{it:06d}", cloud)

        callback = checkpoint

    res = fit_gr(y, model, grid, cfg.loss_config(), cfg.density_config(), cfg.fit_config(),
                 callback=callback)
    write_volume(args.out, res.volume)
    if args.trace:
        with open(args.trace, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=TRACE_FIELDS)
            w.writeheader()
            for row in res.trace:
                w.writerow({k: row[k] for k in TRACE_FIELDS})


def cmd_diffuse(args) -> None:
    cfg = _load_config(args)
    d = dict(cfg.diffusion)
    for key in ("T", "kind"):
        if getattr(args, key) is not None:
            d[key] = getattr(args, key)
    schedule = build_schedule(int(d.get("T", 1000)), d.get("kind", "linear"),
                              float(d.get("beta_start", 1e-4)), float(d.get("beta_end", 0.02)))
    volumes = {}
    grid = None
    for item in args.volume or []:
        name, _, path = item.partition("=")
        vol = read_volume(path)
        volumes[name], grid = vol.data, vol.grid
    if args.dims:
        grid = Grid(tuple(args.dims))
    if grid is None:
        raise ValueError("need --dims or at least one --volume to fix the grid")
    if d.get("denoiser_path"):
        denoiser = load_external_denoiser(d["denoiser_path"])
    else:
        spec = json.loads(Path(args.prior).read_text()) if args.prior else d.get("prior")
        if spec is None:
            raise ValueError("no prior given (--prior or diffusion.prior in the config)")
        denoiser = GmmDenoiser(GmmPrior.from_dict(spec, volumes), schedule)
    hook = None
    if args.guide:
        hook = GuidanceHook(volumes[args.guide], cfg.guidance_config(), schedule)
    seeds = [cfg.seed + k for k in range(args.chains)]
    x = sample(denoiser, schedule, (args.chains,) + grid.dims, seeds, guidance=hook)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k in range(args.chains):
        write_volume(out / f"chain_{k:03d}", Volume(grid, x[k]))


def cmd_pipeline(args) -> None:
    cfg = _load_config(args)
    cfg.output_dir = args.out or cfg.output_dir or "grrecon_out"
    run_pipeline(cfg)


def cmd_metrics(args) -> None:
    test, ref = read_volume(args.test), read_volume(args.reference)
    rows = [(view, compute_metrics(test, ref, axis)) for view, axis in VIEWS.items()]
    if args.out:
        write_metrics_csv(args.out, rows)
    else:
        print("label,psnr_db,ssim,mse")
        for label, m in rows:
            print(m.csv_row(label))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="grrecon", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", help="pipeline JSON config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=name != "pipeline" and name != "metrics")
        sp.set_defaults(func=fn)
        return sp

    add("phantom", cmd_phantom, "write the ground-truth phantom volume")
    sp = add("project", cmd_project, "forward-project a volume and apply dose reduction")
    sp.add_argument("--volume", required=True)
    sp.add_argument("--drf", type=float)
    sp.add_argument("--noiseless", action="store_true")

    sp = add("gr-fit", cmd_gr_fit, "fit a Gaussian representation to a sinogram")
    sp.add_argument("--sinogram", required=True)
    sp.add_argument("--dims", type=int, nargs=3, help="grid dims (default n_slices cubed)")
    sp.add_argument("--trace", help="loss trace CSV")
    sp.add_argument("--checkpoint-interval", type=int, default=0)
    sp.add_argument("--checkpoint-dir")

    sp = add("diffuse", cmd_diffuse, "run guided or unguided diffusion sampling")
    sp.add_argument("--T", type=int)
    sp.add_argument("--kind")
    sp.add_argument("--prior", help="GMM prior JSON")
    sp.add_argument("--volume", action="append", help="name=path, referenced by prior means")
    sp.add_argument("--guide", help="name of a --volume to guide toward")
    sp.add_argument("--dims", type=int, nargs=3)
    sp.add_argument("--chains", type=int, default=1)

    sp = add("pipeline", cmd_pipeline, "run the full reconstruction")
    sp.add_argument("--drf", type=float)

    sp = add("metrics", cmd_metrics, "PSNR/SSIM/MSE of a volume against a reference")
    sp.add_argument("--test", required=True)
    sp.add_argument("--reference", required=True)
    return p


def main(argv=None) -> int:
    # numba's notice about an old TBB build is noise for command-line users
    warnings.filterwarnings("ignore", message="The TBB threading layer")
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except PipelineError as exc:
        print(f"grrecon: stage {exc.stage} failed: {exc.__cause__}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"grrecon: stage {args.command} failed: {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
