"""Gaussian-representation reconstruction refined by guided diffusion sampling."""

from .core import (FormatError, Grid, Metrics, PhantomSpec, Sinogram, Volume,
                   apply_dose_reduction, compute_metrics, create_phantom, read_sinogram,
                   read_volume, two_ellipsoid_phantom, write_sinogram, write_volume)
from .diffusion import DiffusionSchedule, GmmDenoiser, GmmPrior, build_schedule, sample
from .fit import DensityControlConfig, FitConfig, LossConfig, fit_gr
from .gaussians import GaussianCloud, rasterize, rasterize_backward
from .guidance import GuidanceConfig, guided_correction, surrogate_check
from .pipeline import PipelineConfig, ReconReport, run_pipeline
from .projector import ForwardModel, back_project, forward_project

__all__ = [
    "FormatError", "Grid", "Metrics", "PhantomSpec", "Sinogram", "Volume", "apply_dose_reduction",
    "compute_metrics", "create_phantom", "read_sinogram", "read_volume", "two_ellipsoid_phantom",
    "write_sinogram", "write_volume", "DiffusionSchedule", "GmmDenoiser", "GmmPrior",
    "build_schedule", "sample", "DensityControlConfig", "FitConfig", "LossConfig", "fit_gr",
    "GaussianCloud", "rasterize", "rasterize_backward", "GuidanceConfig", "guided_correction",
    "surrogate_check", "PipelineConfig", "ReconReport", "run_pipeline", "ForwardModel",
    "back_project", "forward_project",
]
__version__ = "0.1.0"
