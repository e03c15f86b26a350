"""Discretized isotropic 3D Gaussians: rasterization and its analytic backward pass.

A Gaussian with center ``mu`` (continuous voxel coordinates), std ``sigma``
(voxels) and intensity ``I`` adds ``I * exp(-D2 / 2)`` to every voxel of a
``K**3`` box anchored at ``floor(mu)``. The squared distance is assembled from
four precomputable terms,

    D2 = S_BB - S_Bd - S_dB + S_dd,

where ``B`` are the integer box offsets and ``d = mu - floor(mu)``. With an
isotropic covariance every term is a dot product scaled by ``1 / sigma**2``,
so each term is a sum over axes and the kernels evaluate the exponential as
a product of three per-axis tables of length K.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .core import Grid, Volume


@dataclass
class GaussianCloud:
    centers: np.ndarray
    sigmas: np.ndarray
    intensities: np.ndarray
    support: int = 11
    # consecutive density-control checks with a negligible intensity gradient
    low_grad_streak: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64).reshape(-1, 3)
        n = self.centers.shape[0]
        self.sigmas = np.asarray(self.sigmas, dtype=np.float64).reshape(n)
        self.intensities = np.asarray(self.intensities, dtype=np.float64).reshape(n)
        if self.low_grad_streak is None:
            self.low_grad_streak = np.zeros(n, dtype=np.int64)
        self.low_grad_streak = np.asarray(self.low_grad_streak, dtype=np.int64).reshape(n)
        if self.support < 3 or self.support % 2 == 0:
            raise ValueError(f"support must be odd and >= 3, got {self.support}")
        if not np.all(np.isfinite(self.centers)):
            raise ValueError("Gaussian centers must be finite")
        if np.any(self.sigmas <= 0):
            raise ValueError("Gaussian sigmas must be > 0")
        if np.any(self.intensities < 0):
            raise ValueError("Gaussian intensities must be >= 0")

    @property
    def n(self) -> int:
        return self.centers.shape[0]

    def subset(self, idx) -> "GaussianCloud":
        return GaussianCloud(self.centers[idx], self.sigmas[idx], self.intensities[idx],
                             self.support, self.low_grad_streak[idx])

    def concat(self, other: "GaussianCloud") -> "GaussianCloud":
        return GaussianCloud(np.concatenate([self.centers, other.centers]),
                             np.concatenate([self.sigmas, other.sigmas]),
                             np.concatenate([self.intensities, other.intensities]),
                             self.support,
                             np.concatenate([self.low_grad_streak, other.low_grad_streak]))

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(self.centers.copy(), self.sigmas.copy(), self.intensities.copy(),
                             self.support, self.low_grad_streak.copy())


@dataclass
class ParamGrads:
    """Per-Gaussian gradients of a scalar loss."""

    mu: np.ndarray
    sigma: np.ndarray
    intensity: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "ParamGrads":
        return cls(np.zeros((n, 3)), np.zeros(n), np.zeros(n))


# ------------------------------------------------------------------ geometry

def decompose_center(mu) -> tuple[np.ndarray, np.ndarray]:
    """Split centers into integer anchors and fractional offsets in [0, 1)."""
    mu = np.asarray(mu, dtype=np.float64)
    if not np.all(np.isfinite(mu)):
        raise ValueError("center must be finite")
    fl = np.floor(mu)
    delta = mu - fl
    # a tiny negative coordinate rounds to delta == 1; move it to the next cell
    wrap = delta >= 1.0
    fl = np.where(wrap, fl + 1.0, fl)
    delta = np.where(wrap, 0.0, delta)
    return fl.astype(np.int64), delta


def box_offsets(k: int) -> np.ndarray:
    """All ``k**3`` integer offsets of the support box, shape (k**3, 3)."""
    h = (k - 1) // 2
    r = np.arange(-h, h + 1)
    return np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)


def mahalanobis_sq(offsets: np.ndarray, delta: np.ndarray, sigma: float) -> np.ndarray:
    """Squared distance of every box offset from the fractional center offset.

    Uses the four-term decomposition with ``C^-1 = I / sigma**2``.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    b = np.asarray(offsets, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(delta, dtype=np.float64).reshape(3)
    inv = 1.0 / (sigma * sigma)
    s_bb = inv * np.einsum("ij,ij->i", b, b)
    s_bd = inv * (b @ d)
    s_db = inv * (d @ b.T)
    s_dd = inv * float(d @ d)
    return s_bb - s_bd - s_db + s_dd


# ------------------------------------------------------------------ kernels

@numba.njit(cache=True)
def _axis_weights(h, d, inv, out):
    # the four S terms summed along one axis; exp(-D2/2) factorizes over axes
    s_dd = inv * d * d
    for k in range(2 * h + 1):
        b = k - h
        s_bb = inv * b * b
        s_bd = inv * b * d
        s_db = s_bd  # C^-1 is symmetric
        out[k] = np.exp(-0.5 * (s_bb - s_bd - s_db + s_dd))


@numba.njit(cache=True)
def _splat_one(g, centers, sigmas, intens, h, out, wx, wy, wz):
    nx, ny, nz = out.shape
    fx = np.floor(centers[g, 0])
    fy = np.floor(centers[g, 1])
    fz = np.floor(centers[g, 2])
    inv = 1.0 / (sigmas[g] * sigmas[g])
    _axis_weights(h, centers[g, 0] - fx, inv, wx)
    _axis_weights(h, centers[g, 1] - fy, inv, wy)
    _axis_weights(h, centers[g, 2] - fz, inv, wz)
    amp = intens[g]
    ax, ay, az = int(fx) - h, int(fy) - h, int(fz) - h
    k = 2 * h + 1
    for i in range(max(0, -ax), min(k, nx - ax)):
        ci = amp * wx[i]
        for j in range(max(0, -ay), min(k, ny - ay)):
            cij = ci * wy[j]
            for l in range(max(0, -az), min(k, nz - az)):
                out[ax + i, ay + j, az + l] += cij * wz[l]


@numba.njit(cache=True)
def _rasterize_serial(centers, sigmas, intens, h, out):
    k = 2 * h + 1
    wx, wy, wz = np.empty(k), np.empty(k), np.empty(k)
    for g in range(centers.shape[0]):
        _splat_one(g, centers, sigmas, intens, h, out, wx, wy, wz)


@numba.njit(cache=True, parallel=True)
def _rasterize_sharded(centers, sigmas, intens, h, shards):
    n = centers.shape[0]
    n_shards = shards.shape[0]
    per = (n + n_shards - 1) // n_shards
    k = 2 * h + 1
    for s in numba.prange(n_shards):
        wx, wy, wz = np.empty(k), np.empty(k), np.empty(k)
        for g in range(s * per, min(n, (s + 1) * per)):
            _splat_one(g, centers, sigmas, intens, h, shards[s], wx, wy, wz)


@numba.njit(cache=True, parallel=True)
def _backward(centers, sigmas, intens, h, upstream, g_mu, g_sigma, g_int):
    nx, ny, nz = upstream.shape
    k = 2 * h + 1
    for g in numba.prange(centers.shape[0]):
        wx, wy, wz = np.empty(k), np.empty(k), np.empty(k)
        fx = np.floor(centers[g, 0])
        fy = np.floor(centers[g, 1])
        fz = np.floor(centers[g, 2])
        dx = centers[g, 0] - fx
        dy = centers[g, 1] - fy
        dz = centers[g, 2] - fz
        sig = sigmas[g]
        inv = 1.0 / (sig * sig)
        _axis_weights(h, dx, inv, wx)
        _axis_weights(h, dy, inv, wy)
        _axis_weights(h, dz, inv, wz)
        ax, ay, az = int(fx) - h, int(fy) - h, int(fz) - h
        acc_i = 0.0
        acc_x = 0.0
        acc_y = 0.0
        acc_z = 0.0
        acc_s = 0.0
        for i in range(max(0, -ax), min(k, nx - ax)):
            rx = i - h - dx
            for j in range(max(0, -ay), min(k, ny - ay)):
                ry = j - h - dy
                wxy = wx[i] * wy[j]
                for l in range(max(0, -az), min(k, nz - az)):
                    up = upstream[ax + i, ay + j, az + l]
                    if up == 0.0:
                        continue
                    rz = l - h - dz
                    w = up * wxy * wz[l]
                    acc_i += w
                    acc_x += w * rx
                    acc_y += w * ry
                    acc_z += w * rz
                    acc_s += w * (rx * rx + ry * ry + rz * rz)
        # d(lambda)/d(mu) = I w (v - mu) / sigma^2 ; d/d(sigma) = I w |v - mu|^2 / sigma^3
        c = intens[g] * inv
        g_int[g] = acc_i
        g_mu[g, 0] = c * acc_x
        g_mu[g, 1] = c * acc_y
        g_mu[g, 2] = c * acc_z
        g_sigma[g] = c * acc_s / sig


def rasterize_array(cloud: GaussianCloud, dims, deterministic: bool = True,
                    n_shards: int | None = None) -> np.ndarray:
    h = (cloud.support - 1) // 2
    out = np.zeros(tuple(dims))
    if cloud.n == 0:
        return out
    if deterministic:
        # serial Gaussian order == every voxel sums its contributions by Gaussian index
        _rasterize_serial(cloud.centers, cloud.sigmas, cloud.intensities, h, out)
        return out
    n_shards = n_shards or numba.get_num_threads()
    shards = np.zeros((n_shards,) + tuple(dims))
    _rasterize_sharded(cloud.centers, cloud.sigmas, cloud.intensities, h, shards)
    return shards.sum(axis=0)


def rasterize(cloud: GaussianCloud, grid: Grid, deterministic: bool = True) -> Volume:
    """Sum of all truncated Gaussian footprints; the result is not clamped."""
    return Volume(grid, rasterize_array(cloud, grid.dims, deterministic))


def rasterize_backward_array(cloud: GaussianCloud, upstream: np.ndarray) -> ParamGrads:
    up = np.ascontiguousarray(upstream, dtype=np.float64)
    grads = ParamGrads.zeros(cloud.n)
    if cloud.n:
        _backward(cloud.centers, cloud.sigmas, cloud.intensities, (cloud.support - 1) // 2, up,
                  grads.mu, grads.sigma, grads.intensity)
    return grads


def rasterize_backward(cloud: GaussianCloud, grid: Grid, upstream: Volume) -> ParamGrads:
    """Chain ``dL/dlambda`` through the rasterizer to (mu, sigma, I) per Gaussian."""
    if upstream.grid.dims != grid.dims:
        raise ValueError(f"upstream grid {upstream.grid.dims} does not match {grid.dims}")
    return rasterize_backward_array(cloud, upstream.data)


# ------------------------------------------------------------------ checkpoints

def save_cloud(path, cloud: GaussianCloud) -> Path:
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    p.parent.mkdir(parents=True, exist_ok=True)
    p.with_suffix(".json").write_text(json.dumps({"n": cloud.n, "support_k": cloud.support}))
    table = np.column_stack([cloud.centers, cloud.sigmas, cloud.intensities])
    p.with_suffix(".raw").write_bytes(table.astype("<f4").tobytes())
    return p.with_suffix(".json")


def load_cloud(path) -> GaussianCloud:
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    h = json.loads(p.with_suffix(".json").read_text())
    buf = p.with_suffix(".raw").read_bytes()
    n = int(h["n"])
    if len(buf) != n * 5 * 4:
        raise ValueError(f"cloud payload holds {len(buf) // 4} scalars, header implies {n * 5}")
    t = np.frombuffer(buf, dtype="<f4").astype(np.float64).reshape(n, 5)
    return GaussianCloud(t[:, :3], t[:, 3], t[:, 4], int(h["support_k"]))
