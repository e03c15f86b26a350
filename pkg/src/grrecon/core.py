"""Voxel grids, volumes, sinograms, phantoms, dose reduction, metrics and file IO.

Arrays are indexed ``[x, y, z]`` in memory; on disk they are written x-fastest
(volumes) or detector-fastest (sinograms) as little-endian float32.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

_MAX_VOXELS = 2**31 - 1


class FormatError(ValueError):
    """Raised when a sidecar header and its raw payload disagree."""


@dataclass(frozen=True)
class Grid:
    dims: tuple[int, int, int]
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        vs = tuple(float(v) for v in self.voxel_size)
        org = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or len(vs) != 3 or len(org) != 3:
            raise ValueError("grid fields must be 3-vectors")
        if min(dims) < 1:
            raise ValueError(f"grid dims must be >= 1, got {dims}")
        if min(vs) <= 0:
            raise ValueError(f"voxel size must be > 0, got {vs}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "voxel_size", vs)
        object.__setattr__(self, "origin", org)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.dims

    @property
    def size(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    def centers_mm(self, axis: int) -> np.ndarray:
        """World coordinates of voxel centers along one axis."""
        return self.origin[axis] + self.voxel_size[axis] * np.arange(self.dims[axis])


@dataclass
class Volume:
    grid: Grid
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.shape != self.grid.dims:
            if self.data.size != self.grid.size:
                raise ValueError(
                    f"volume data has {self.data.size} values, grid needs {self.grid.size}"
                )
            self.data = self.data.reshape(self.grid.dims, order="F")

    def like(self, data: np.ndarray) -> "Volume":
        return Volume(self.grid, data)


@dataclass
class Sinogram:
    """Stacked 2D parallel-beam sinograms, ``data[angle, detector, slice]``."""

    angles: np.ndarray
    n_det: int
    n_slices: int
    det_spacing: float
    data: np.ndarray = None

    def __post_init__(self):
        self.angles = np.asarray(self.angles, dtype=np.float64).ravel()
        self.n_det = int(self.n_det)
        self.n_slices = int(self.n_slices)
        self.det_spacing = float(self.det_spacing)
        if self.angles.size < 1 or self.n_det < 1 or self.n_slices < 1:
            raise ValueError("sinogram counts must all be >= 1")
        if self.det_spacing <= 0:
            raise ValueError("detector spacing must be > 0")
        if self.data is None:
            self.data = np.zeros(self.shape)
        self.data = np.asarray(self.data)
        if self.data.shape != self.shape:
            if self.data.size != self.angles.size * self.n_det * self.n_slices:
                raise ValueError(
                    f"sinogram data has {self.data.size} values, geometry needs "
                    f"{self.angles.size * self.n_det * self.n_slices}"
                )
            self.data = self.data.reshape(self.shape)

    @property
    def n_angles(self) -> int:
        return self.angles.size

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n_angles, self.n_det, self.n_slices)

    def like(self, data: np.ndarray) -> "Sinogram":
        return Sinogram(self.angles, self.n_det, self.n_slices, self.det_spacing, data)


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple[float, float, float]
    semi_axes: tuple[float, float, float]
    intensity: float

    def __post_init__(self):
        if min(self.semi_axes) <= 0:
            raise ValueError(f"semi-axes must be > 0, got {self.semi_axes}")


@dataclass
class PhantomSpec:
    grid: Grid
    shapes: list[Ellipsoid] = field(default_factory=list)
    background: float = 0.0

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        g = d["grid"]
        grid = Grid(tuple(g["dims"]), tuple(g.get("voxel_size_mm", (1.0, 1.0, 1.0))),
                    tuple(g.get("origin_mm", (0.0, 0.0, 0.0))))
        shapes = [Ellipsoid(tuple(s["center_mm"]), tuple(s["semi_axes_mm"]), float(s["intensity"]))
                  for s in d.get("shapes", [])]
        return cls(grid, shapes, float(d.get("background", 0.0)))


@dataclass(frozen=True)
class Metrics:
    psnr: float
    ssim: float
    mse: float

    def csv_row(self, label: str) -> str:
        return f"{label},{_fmt(self.psnr)},{_fmt(self.ssim)},{_fmt(self.mse)}"


def _fmt(v: float) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(float(v))


def create_phantom(spec: PhantomSpec) -> Volume:
    grid = spec.grid
    if grid.size > _MAX_VOXELS:
        raise OverflowError(f"phantom of {grid.size} voxels exceeds the addressable size")
    x, y, z = np.meshgrid(grid.centers_mm(0), grid.centers_mm(1), grid.centers_mm(2),
                          indexing="ij")
    data = np.full(grid.dims, float(spec.background))
    for e in spec.shapes:
        r2 = (((x - e.center[0]) / e.semi_axes[0]) ** 2
              + ((y - e.center[1]) / e.semi_axes[1]) ** 2
              + ((z - e.center[2]) / e.semi_axes[2]) ** 2)
        data[r2 <= 1.0] += e.intensity
    if data.min() < 0:
        raise ValueError("phantom has negative voxels; check background and intensities")
    return Volume(grid, data)


def two_ellipsoid_phantom(n: int = 32) -> PhantomSpec:
    """Desk oracle: a large warm ellipsoid containing a smaller hot one."""
    grid = Grid((n, n, n))
    c = (n - 1) / 2.0
    return PhantomSpec(grid, [
        Ellipsoid((c, c, c), (0.36 * n, 0.28 * n, 0.34 * n), 1.0),
        Ellipsoid((c + 0.12 * n, c - 0.06 * n, c + 0.05 * n), (0.1 * n, 0.09 * n, 0.12 * n), 2.0),
    ])


def apply_dose_reduction(sino: Sinogram, drf: float, seed: int) -> Sinogram:
    """Thin counts by ``drf`` and rescale: each bin becomes ``drf * Poisson(y / drf)``."""
    if drf < 1:
        raise ValueError(f"dose reduction factor must be >= 1, got {drf}")
    y = np.asarray(sino.data, dtype=np.float64)
    if np.any(y < 0) or not np.all(np.isfinite(y)):
        raise ValueError("sinogram bins must be finite and nonnegative")
    rng = np.random.default_rng(seed)
    return sino.like(drf * rng.poisson(y / drf).astype(np.float64))


def _ssim_slice(a: np.ndarray, b: np.ndarray, data_range: float,
                sigma: float = 1.5, win: int = 11, k1: float = 0.01, k2: float = 0.03) -> float:
    radius = (win - 1) // 2
    filt = lambda im: ndimage.gaussian_filter(im, sigma, mode="reflect", truncate=radius / sigma)
    # population (biased) local moments, as in the original SSIM definition
    mu_a, mu_b = filt(a), filt(b)
    s_aa = filt(a * a) - mu_a * mu_a
    s_bb = filt(b * b) - mu_b * mu_b
    s_ab = filt(a * b) - mu_a * mu_b
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    smap = ((2 * mu_a * mu_b + c1) * (2 * s_ab + c2)) / (
        (mu_a**2 + mu_b**2 + c1) * (s_aa + s_bb + c2))
    if min(a.shape) > 2 * radius:
        smap = smap[radius:-radius, radius:-radius]
    return float(smap.mean())


def ssim_along(test: np.ndarray, reference: np.ndarray, axis: int, data_range: float) -> float:
    """Mean 2D SSIM over the slices orthogonal to ``axis``."""
    t = np.moveaxis(np.asarray(test, dtype=np.float64), axis, 0)
    r = np.moveaxis(np.asarray(reference, dtype=np.float64), axis, 0)
    return float(np.mean([_ssim_slice(ts, rs, data_range) for ts, rs in zip(t, r)]))


def compute_metrics(test: Volume, reference: Volume, axis: int = 2) -> Metrics:
    """PSNR (peak = max of reference), mean-slice SSIM and MSE.

    ``axis`` selects the slicing direction for SSIM; 2 (axial) is the default.
    """
    if test.grid.dims != reference.grid.dims:
        raise ValueError(f"grid mismatch: {test.grid.dims} vs {reference.grid.dims}")
    t = np.asarray(test.data, dtype=np.float64)
    r = np.asarray(reference.data, dtype=np.float64)
    peak = float(r.max())
    if peak <= 0:
        raise ValueError("reference has no positive peak; PSNR is undefined")
    mse = float(np.mean((t - r) ** 2))
    psnr = math.inf if mse == 0 else 10.0 * math.log10(peak**2 / mse)
    return Metrics(psnr=psnr, ssim=ssim_along(t, r, axis, peak), mse=mse)


# ---------------------------------------------------------------- file IO

def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    return p.with_suffix(".json"), p.with_suffix(".raw")


def _read_payload(raw: Path, header: dict, expected: int) -> np.ndarray:
    if header.get("dtype") != "f32le":
        raise FormatError(f"unknown dtype tag {header.get('dtype')!r}")
    buf = raw.read_bytes()
    if len(buf) != 4 * expected:
        raise FormatError(
            f"{raw.name}: payload holds {len(buf) / 4:g} scalars, header declares {expected}")
    return np.frombuffer(buf, dtype="<f4").copy()


def write_volume(path, volume: Volume) -> Path:
    js, raw = _paths(path)
    js.parent.mkdir(parents=True, exist_ok=True)
    g = volume.grid
    header = {"dims": list(g.dims), "voxel_size_mm": list(g.voxel_size),
              "origin_mm": list(g.origin), "dtype": "f32le", "order": "x-fastest"}
    js.write_text(json.dumps(header, indent=2))
    raw.write_bytes(np.asarray(volume.data, dtype="<f4").ravel(order="F").tobytes())
    return js


def read_volume(path) -> Volume:
    js, raw = _paths(path)
    h = json.loads(js.read_text())
    if h.get("order", "x-fastest") != "x-fastest":
        raise FormatError(f"unsupported order {h['order']!r}")
    grid = Grid(tuple(h["dims"]), tuple(h["voxel_size_mm"]), tuple(h["origin_mm"]))
    flat = _read_payload(raw, h, grid.size)
    return Volume(grid, flat.reshape(grid.dims, order="F"))


def write_sinogram(path, sino: Sinogram) -> Path:
    js, raw = _paths(path)
    js.parent.mkdir(parents=True, exist_ok=True)
    header = {"n_angles": sino.n_angles, "n_det": sino.n_det, "n_slices": sino.n_slices,
              "angles_rad": [float(a) for a in sino.angles], "det_spacing_mm": sino.det_spacing,
              "dtype": "f32le", "order": "det-fastest"}
    js.write_text(json.dumps(header, indent=2))
    # (angle, det, slice) -> slice-major, then angle, detector fastest
    raw.write_bytes(np.asarray(sino.data, dtype="<f4").transpose(2, 0, 1).ravel().tobytes())
    return js


def read_sinogram(path) -> Sinogram:
    js, raw = _paths(path)
    h = json.loads(js.read_text())
    if h.get("order", "det-fastest") != "det-fastest":
        raise FormatError(f"unsupported order {h['order']!r}")
    na, nd, ns = int(h["n_angles"]), int(h["n_det"]), int(h["n_slices"])
    if len(h["angles_rad"]) != na:
        raise FormatError("angles_rad length disagrees with n_angles")
    flat = _read_payload(raw, h, na * nd * ns)
    data = flat.reshape(ns, na, nd).transpose(1, 2, 0)
    return Sinogram(np.asarray(h["angles_rad"]), nd, ns, float(h["det_spacing_mm"]),
                    np.ascontiguousarray(data))


def write_metrics_csv(path, rows: list[tuple[str, Metrics]]) -> None:
    lines = ["label,psnr_db,ssim,mse"] + [m.csv_row(label) for label, m in rows]
    Path(path).write_text("\n".join(lines) + "\n")
