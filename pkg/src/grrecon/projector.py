"""Matched forward/back projector for stacked 2D parallel-beam geometry.

Every axial slice shares one 2D system matrix built with Joseph-style
sampling: a ray is sampled once per voxel row (or column) along its dominant
axis, linearly interpolated between the two neighbouring voxels, and weighted
by the physical step length. The back projector is the transpose of that
matrix, so the pair passes the dot-product test to rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import sparse

from .core import Grid, Sinogram, Volume


@dataclass
class ForwardModel:
    """Acquisition geometry plus the additive randoms and scatter expectations."""

    angles: np.ndarray
    n_det: int
    n_slices: int
    det_spacing: float = 1.0
    randoms: float | np.ndarray = 0.0
    scatter: float | np.ndarray = 0.0

    def __post_init__(self):
        self.angles = np.asarray(self.angles, dtype=np.float64).ravel()
        if self.angles.size < 1 or self.n_det < 1 or self.n_slices < 1:
            raise ValueError("geometry counts must be >= 1")
        if self.det_spacing <= 0:
            raise ValueError("detector spacing must be > 0")
        for name in ("randoms", "scatter"):
            v = np.asarray(getattr(self, name), dtype=np.float64)
            if np.any(v < 0):
                raise ValueError(f"{name} must be nonnegative")
            if v.ndim and v.shape != self.shape:
                raise ValueError(f"{name} must be scalar or shaped {self.shape}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.angles.size, int(self.n_det), int(self.n_slices))

    @property
    def background(self) -> np.ndarray | float:
        """r + s, broadcastable against sinogram data."""
        return np.asarray(self.randoms, dtype=np.float64) + np.asarray(self.scatter, dtype=np.float64)

    @classmethod
    def default_for(cls, grid: Grid, n_angles: int = 60, n_det: int | None = None,
                    det_spacing: float | None = None, randoms=0.0, scatter=0.0) -> "ForwardModel":
        if n_det is None:
            n_det = math.ceil(1.5 * max(grid.dims[0], grid.dims[1]))
        if det_spacing is None:
            det_spacing = grid.voxel_size[0]
        angles = np.arange(n_angles) * (np.pi / n_angles)
        return cls(angles, n_det, grid.dims[2], det_spacing, randoms, scatter)

    @classmethod
    def from_sinogram(cls, sino: Sinogram, randoms=0.0, scatter=0.0) -> "ForwardModel":
        return cls(sino.angles, sino.n_det, sino.n_slices, sino.det_spacing, randoms, scatter)

    def empty_sinogram(self) -> Sinogram:
        return Sinogram(self.angles, self.n_det, self.n_slices, self.det_spacing)


def _check(model: ForwardModel, grid: Grid) -> None:
    if model.n_slices != grid.dims[2]:
        raise ValueError(
            f"geometry has {model.n_slices} slices but grid has nz={grid.dims[2]}")


@lru_cache(maxsize=16)
def _slice_matrix(angles: tuple[float, ...], n_det: int, det_spacing: float,
                  nx: int, ny: int, sx: float, sy: float) -> sparse.csr_matrix:
    rows, cols, vals = [], [], []
    det = (np.arange(n_det) - (n_det - 1) / 2.0) * det_spacing
    cx, cy = (nx - 1) / 2.0, (ny - 1) / 2.0
    for a, theta in enumerate(angles):
        c, s = math.cos(theta), math.sin(theta)
        ray_ids = a * n_det + np.arange(n_det)
        # ray: p(t) = u*(c, s) + t*(-s, c); step along whichever index axis it crosses fastest
        if abs(c) / sy >= abs(s) / sx:
            yj = (np.arange(ny) - cy) * sy
            t = (yj[None, :] - det[:, None] * s) / c
            fi = (det[:, None] * c - t * s) / sx + cx
            step = sy / abs(c)
            lo = np.floor(fi).astype(np.int64)
            frac = fi - lo
            jj = np.broadcast_to(np.arange(ny), fi.shape)
            for idx, w in ((lo, 1.0 - frac), (lo + 1, frac)):
                ok = (idx >= 0) & (idx < nx) & (w > 0)
                rows.append(np.broadcast_to(ray_ids[:, None], fi.shape)[ok])
                cols.append(idx[ok] * ny + jj[ok])
                vals.append(w[ok] * step)
        else:
            xi = (np.arange(nx) - cx) * sx
            t = (det[:, None] * c - xi[None, :]) / s
            fj = (det[:, None] * s + t * c) / sy + cy
            step = sx / abs(s)
            lo = np.floor(fj).astype(np.int64)
            frac = fj - lo
            ii = np.broadcast_to(np.arange(nx), fj.shape)
            for idx, w in ((lo, 1.0 - frac), (lo + 1, frac)):
                ok = (idx >= 0) & (idx < ny) & (w > 0)
                rows.append(np.broadcast_to(ray_ids[:, None], fj.shape)[ok])
                cols.append(ii[ok] * ny + idx[ok])
                vals.append(w[ok] * step)
    mat = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(len(angles) * n_det, nx * ny)).tocsr()
    mat.sum_duplicates()
    return mat


def system_matrix(model: ForwardModel, grid: Grid) -> sparse.csr_matrix:
    """The per-slice 2D system matrix, rows = (angle, bin), cols = (x, y) C-order."""
    return _slice_matrix(tuple(float(a) for a in model.angles), int(model.n_det),
                         float(model.det_spacing), grid.dims[0], grid.dims[1],
                         grid.voxel_size[0], grid.voxel_size[1])


def forward_project_array(data: np.ndarray, model: ForwardModel, grid: Grid) -> np.ndarray:
    _check(model, grid)
    nx, ny, nz = grid.dims
    a = system_matrix(model, grid)
    out = a @ np.asarray(data, dtype=np.float64).reshape(nx * ny, nz)
    return out.reshape(model.shape)


def back_project_array(data: np.ndarray, model: ForwardModel, grid: Grid) -> np.ndarray:
    # csr.T is csc; the transposed product walks each column in stored order, so the
    # summation order is fixed and the result is reproducible
    _check(model, grid)
    nx, ny, nz = grid.dims
    a = system_matrix(model, grid)
    out = a.T @ np.asarray(data, dtype=np.float64).reshape(-1, nz)
    return out.reshape(grid.dims)


def forward_project(volume: Volume, model: ForwardModel) -> Sinogram:
    """Line integrals of every axial slice; randoms and scatter are not added here."""
    data = np.asarray(volume.data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise ValueError("volume contains non-finite values")
    return model.empty_sinogram().like(forward_project_array(data, model, volume.grid))


def back_project(sino: Sinogram, model: ForwardModel, grid: Grid) -> Volume:
    if sino.shape != model.shape:
        raise ValueError(f"sinogram shape {sino.shape} does not match geometry {model.shape}")
    return Volume(grid, back_project_array(sino.data, model, grid))
