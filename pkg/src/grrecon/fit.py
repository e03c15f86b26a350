"""Fit a Gaussian cloud to sinogram data.

The objective is ``lambda1 * data + lambda2 * tv`` evaluated on the rasterized
volume, where the data term compares the forward projection (plus randoms and
scatter) with the measured counts. Both terms are normalized per element
(sinogram bin, voxel) so thresholds and step sizes do not depend on the grid
size. Parameters are updated with Adam; sigma lives in log space.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import Grid, Sinogram, Volume
from .gaussians import GaussianCloud, ParamGrads, rasterize_array, rasterize_backward_array
from .projector import ForwardModel, back_project_array, forward_project_array

log = logging.getLogger(__name__)


@dataclass
class LossConfig:
    lambda1: float = 1.0
    lambda2: float = 1e-3
    data_mode: str = "poisson-nll"
    poisson_floor: float = 1e-6
    tv_epsilon: float = 1e-3

    def __post_init__(self):
        if self.lambda1 <= 0 or self.lambda2 < 0:
            raise ValueError("need lambda1 > 0 and lambda2 >= 0")
        if self.poisson_floor <= 0 or self.tv_epsilon <= 0:
            raise ValueError("floors must be > 0")
        if self.data_mode not in ("poisson-nll", "weighted-least-squares"):
            raise ValueError(f"unknown data_mode {self.data_mode!r}")


@dataclass
class DensityControlConfig:
    tau_prune: float = 1e-7
    tau_clone: float = 2e-4
    tau_split: float = 0.01
    interval: int = 100
    persistence: int = 3
    max_gaussians: int = 5000
    split_sigma_factor: float = 1 / 1.6
    enabled: bool = True

    def __post_init__(self):
        if min(self.tau_prune, self.tau_clone, self.tau_split) <= 0:
            raise ValueError("density-control thresholds must be > 0")
        if self.interval < 1 or self.persistence < 1 or self.max_gaussians < 1:
            raise ValueError("interval, persistence and max_gaussians must be >= 1")
        if not 0 < self.split_sigma_factor < 1:
            raise ValueError("split_sigma_factor must lie in (0, 1)")


@dataclass
class FitConfig:
    iterations: int = 3000
    init_count: int = 2000
    seed: int = 0
    lr_mu: float = 2e-3
    lr_log_sigma: float = 5e-3
    lr_intensity: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-12
    sigma_init: float = 1.5
    intensity_min: float = 1e-3
    support: int = 11
    deterministic: bool = True

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.init_count < 1:
            raise ValueError("init_count must be >= 1")
        self.betas = tuple(self.betas)


# ------------------------------------------------------------------ losses

def data_loss_array(y_hat: np.ndarray, y: np.ndarray, background, cfg: LossConfig):
    """Data term and its gradient with respect to ``y_hat``.

    The Poisson mode returns the deviance ``sum(m - y + y log(y / m))``, i.e. the
    negative log-likelihood shifted by its saturated value so that it is zero
    when ``m == y``; the gradient ``1 - y / m`` is unchanged by the shift.
    """
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch {y_hat.shape} vs {y.shape}")
    if np.any(y < 0):
        raise ValueError("measured counts must be nonnegative")
    expect = y_hat + background
    if cfg.data_mode == "weighted-least-squares":
        w = 1.0 / np.maximum(y, 1.0)
        r = expect - y
        return float(0.5 * np.sum(w * r * r)), w * r
    m = np.maximum(expect, cfg.poisson_floor)
    with np.errstate(divide="ignore", invalid="ignore"):
        ylog = np.where(y > 0, y * np.log(y / m), 0.0)
    loss = float(np.sum(m - y + ylog))
    grad = np.where(expect >= cfg.poisson_floor, 1.0 - y / m, 0.0)
    return loss, grad


def data_loss(y_hat: Sinogram, y: Sinogram, model: ForwardModel, cfg: LossConfig):
    loss, grad = data_loss_array(y_hat.data, y.data, model.background, cfg)
    return loss, y_hat.like(grad)


def tv_loss_array(x: np.ndarray, eps: float):
    """Charbonnier-smoothed anisotropic TV over forward differences on all axes."""
    x = np.asarray(x, dtype=np.float64)
    loss = 0.0
    grad = np.zeros_like(x)
    for ax in range(x.ndim):
        if x.shape[ax] < 2:
            continue
        d = np.diff(x, axis=ax)
        s = np.sqrt(d * d + eps * eps)
        loss += float(np.sum(s - eps))
        q = d / s
        lead = [slice(None)] * x.ndim
        tail = [slice(None)] * x.ndim
        lead[ax] = slice(1, None)
        tail[ax] = slice(None, -1)
        grad[tuple(lead)] += q
        grad[tuple(tail)] -= q
    return loss, grad


def tv_loss(vol: Volume, cfg: LossConfig):
    loss, grad = tv_loss_array(vol.data, cfg.tv_epsilon)
    return loss, vol.like(grad)


@dataclass
class Objective:
    total: float
    data: float
    tv: float
    grads: ParamGrads
    volume: np.ndarray


def objective(cloud: GaussianCloud, y: np.ndarray, model: ForwardModel, grid: Grid,
              cfg: LossConfig, deterministic: bool = True) -> Objective:
    """Per-element-normalized objective and its gradient w.r.t. (mu, sigma, I)."""
    lam = rasterize_array(cloud, grid.dims, deterministic)
    active = lam > 0
    y_hat = forward_project_array(np.where(active, lam, 0.0), model, grid)
    n_bins, n_vox = y_hat.size, lam.size
    d_loss, d_grad = data_loss_array(y_hat, y, model.background, cfg)
    t_loss, t_grad = tv_loss_array(lam, cfg.tv_epsilon)
    d_loss /= n_bins
    t_loss /= n_vox
    upstream = (cfg.lambda1 / n_bins) * back_project_array(d_grad, model, grid) * active
    upstream += (cfg.lambda2 / n_vox) * t_grad
    grads = rasterize_backward_array(cloud, upstream)
    total = cfg.lambda1 * d_loss + cfg.lambda2 * t_loss
    return Objective(total, d_loss, t_loss, grads, lam)


# ------------------------------------------------------------------ init

def init_cloud(sino: Sinogram, model: ForwardModel, grid: Grid, cfg: FitConfig) -> GaussianCloud:
    """Importance-sample centers from the clamped back-projection of the data."""
    if grid.size < 1:
        raise ValueError("empty grid")
    rng = np.random.default_rng(cfg.seed)
    y = np.asarray(sino.data, dtype=np.float64)
    if not np.all(np.isfinite(y)):
        raise ValueError("sinogram contains non-finite counts")
    weights = np.maximum(back_project_array(y, model, grid), 0.0).ravel()
    total = weights.sum()
    if total > 0:
        idx = rng.choice(grid.size, size=cfg.init_count, p=weights / total)
    else:
        log.info("back-projection is empty; placing Gaussians uniformly")
        idx = rng.integers(0, grid.size, size=cfg.init_count)
    vox = np.column_stack(np.unravel_index(idx, grid.dims)).astype(np.float64)
    centers = vox + rng.uniform(-0.5, 0.5, size=vox.shape)
    sigmas = np.full(cfg.init_count, cfg.sigma_init)
    cloud = GaussianCloud(centers, sigmas, np.ones(cfg.init_count), cfg.support)

    signal = np.maximum(y - model.background, 0.0).mean()
    scale = cfg.intensity_min
    if signal > 0:
        unit = forward_project_array(rasterize_array(cloud, grid.dims), model, grid).mean()
        if unit > 0:
            scale = max(signal / unit, cfg.intensity_min)
    cloud.intensities[:] = scale
    return cloud


# ------------------------------------------------------------------ density control

def _density_control(cloud: GaussianCloud, grads: ParamGrads, cfg: DensityControlConfig,
                     grid: Grid):
    """Prune, then split, then clone. Returns (cloud, source index per output, counts)."""
    n0 = cloud.n
    source = np.arange(n0)
    low = np.abs(grads.intensity) < cfg.tau_prune
    streak = np.where(low, cloud.low_grad_streak + 1, 0)
    keep = streak < cfg.persistence
    cloud = GaussianCloud(cloud.centers[keep], cloud.sigmas[keep], cloud.intensities[keep],
                          cloud.support, streak[keep])
    g_mu = grads.mu[keep]
    source = source[keep]
    n_pruned = int(n0 - keep.sum())

    diag = math.sqrt(sum(d * d for d in grid.dims))
    split_req = np.flatnonzero(cloud.sigmas > cfg.tau_split * diag)
    gnorm = np.linalg.norm(g_mu, axis=1)
    clone_req = np.flatnonzero(gnorm > cfg.tau_clone)
    clone_req = np.setdiff1d(clone_req, split_req)

    room = cfg.max_gaussians - cloud.n
    split = split_req[:max(room, 0)]
    room -= split.size
    clone = clone_req[:max(room, 0)]
    dropped = (split_req.size - split.size) + (clone_req.size - clone.size)
    if dropped:
        log.info("density control: cap %d reached, dropped %d split/clone requests",
                 cfg.max_gaussians, dropped)

    new_c, new_s, new_i, new_src = [], [], [], []
    if split.size:
        axis = np.argmax(np.abs(g_mu[split]), axis=1)
        off = np.zeros((split.size, 3))
        off[np.arange(split.size), axis] = 0.5 * cloud.sigmas[split]
        for sign in (1.0, -1.0):
            new_c.append(cloud.centers[split] + sign * off)
            new_s.append(cloud.sigmas[split] * cfg.split_sigma_factor)
            new_i.append(cloud.intensities[split] * 0.5)
            new_src.append(np.full(split.size, -1))
    if clone.size:
        direction = -g_mu[clone] / gnorm[clone, None]
        new_c.append(cloud.centers[clone] + cloud.sigmas[clone, None] * direction)
        new_s.append(cloud.sigmas[clone])
        new_i.append(cloud.intensities[clone])
        new_src.append(np.full(clone.size, -1))

    survivors = np.ones(cloud.n, dtype=bool)
    survivors[split] = False
    out = cloud.subset(survivors)
    source = source[survivors]
    if new_c:
        n_new = sum(len(s) for s in new_s)
        out = out.concat(GaussianCloud(np.concatenate(new_c), np.concatenate(new_s),
                                       np.concatenate(new_i), cloud.support,
                                       np.zeros(n_new, dtype=np.int64)))
        source = np.concatenate([source] + new_src)
    counts = {"pruned": n_pruned, "split": int(split.size), "cloned": int(clone.size),
              "dropped": int(dropped)}
    return out, source, counts


def density_control_step(cloud: GaussianCloud, grads: ParamGrads, cfg: DensityControlConfig,
                         grid: Grid) -> GaussianCloud:
    """One adaptive density control pass driven by interval-averaged gradients.

    Pruning removes Gaussians whose ``|dL/dI|`` has stayed below ``tau_prune``
    for ``persistence`` consecutive calls. Gaussians with sigma above
    ``tau_split`` times the grid diagonal split in two along the axis of the
    largest positional gradient. Gaussians with ``|dL/dmu| > tau_clone`` are
    copied one sigma along the descent direction. New Gaussians beyond
    ``max_gaussians`` are dropped, never raised.
    """
    return _density_control(cloud, grads, cfg, grid)[0]


# ------------------------------------------------------------------ fit loop

class _Adam:
    def __init__(self, shapes: dict[str, tuple], lrs: dict[str, float], betas, eps):
        self.m = {k: np.zeros(s) for k, s in shapes.items()}
        self.v = {k: np.zeros(s) for k, s in shapes.items()}
        self.t = {k: np.zeros(s[0], dtype=np.int64) for k, s in shapes.items()}
        self.lrs, self.betas, self.eps = lrs, betas, eps

    def step(self, key: str, param: np.ndarray, grad: np.ndarray) -> np.ndarray:
        b1, b2 = self.betas
        m, v, t = self.m[key], self.v[key], self.t[key]
        m *= b1
        m += (1 - b1) * grad
        v *= b2
        v += (1 - b2) * grad * grad
        t += 1
        shape = (-1,) + (1,) * (param.ndim - 1)
        mhat = m / (1 - b1 ** t).reshape(shape)
        vhat = v / (1 - b2 ** t).reshape(shape)
        return param - self.lrs[key] * mhat / (np.sqrt(vhat) + self.eps)

    def remap(self, source: np.ndarray) -> None:
        """Carry moments for surviving Gaussians; fresh ones start from zero."""
        old = source >= 0
        for store in (self.m, self.v, self.t):
            for k, arr in store.items():
                new = np.zeros((source.size,) + arr.shape[1:], dtype=arr.dtype)
                new[old] = arr[source[old]]
                store[k] = new


@dataclass
class FitResult:
    volume: Volume
    cloud: GaussianCloud
    trace: list[dict] = field(default_factory=list)

    def __iter__(self):
        # unpacks as (x_gr, trace)
        return iter((self.volume, self.trace))


def fit_gr(y: Sinogram, model: ForwardModel, grid: Grid, loss_cfg: LossConfig | None = None,
           dc_cfg: DensityControlConfig | None = None, fit_cfg: FitConfig | None = None,
           cloud: GaussianCloud | None = None,
           callback: Callable[[int, GaussianCloud], None] | None = None) -> FitResult:
    """Optimize a Gaussian cloud against ``y`` and return the clamped rasterization."""
    loss_cfg = loss_cfg or LossConfig()
    dc_cfg = dc_cfg or DensityControlConfig()
    fit_cfg = fit_cfg or FitConfig()
    if y.shape != model.shape:
        raise ValueError(f"sinogram shape {y.shape} does not match geometry {model.shape}")
    if cloud is None:
        cloud = init_cloud(y, model, grid, fit_cfg)
    cloud = cloud.copy()
    yd = np.asarray(y.data, dtype=np.float64)
    det = fit_cfg.deterministic

    mu = cloud.centers.copy()
    log_sigma = np.log(cloud.sigmas)
    inten = cloud.intensities.copy()
    adam = _Adam({"mu": mu.shape, "log_sigma": log_sigma.shape, "intensity": inten.shape},
                 {"mu": fit_cfg.lr_mu, "log_sigma": fit_cfg.lr_log_sigma,
                  "intensity": fit_cfg.lr_intensity}, fit_cfg.betas, fit_cfg.adam_eps)
    acc = ParamGrads.zeros(cloud.n)
    n_acc = 0
    trace: list[dict] = []

    for it in range(fit_cfg.iterations):
        cloud = GaussianCloud(mu, np.exp(log_sigma), inten, cloud.support, cloud.low_grad_streak)
        obj = objective(cloud, yd, model, grid, loss_cfg, det)
        if not math.isfinite(obj.total):
            raise FloatingPointError(f"GR fit diverged at iteration {it}")
        trace.append({"iter": it, "data_loss": obj.data, "tv_loss": obj.tv,
                      "total": obj.total, "n_gaussians": cloud.n})
        g = obj.grads
        acc.mu += g.mu
        acc.sigma += g.sigma
        acc.intensity += g.intensity
        n_acc += 1

        mu = adam.step("mu", mu, g.mu)
        log_sigma = adam.step("log_sigma", log_sigma, g.sigma * cloud.sigmas)
        inten = np.maximum(adam.step("intensity", inten, g.intensity), 0.0)

        if dc_cfg.enabled and (it + 1) % dc_cfg.interval == 0 and it + 1 < fit_cfg.iterations:
            cloud = GaussianCloud(mu, np.exp(log_sigma), inten, cloud.support,
                                  cloud.low_grad_streak)
            avg = ParamGrads(acc.mu / n_acc, acc.sigma / n_acc, acc.intensity / n_acc)
            cloud, source, counts = _density_control(cloud, avg, dc_cfg, grid)
            log.debug("iteration %d density control: %s -> %d Gaussians", it + 1, counts, cloud.n)
            adam.remap(source)
            mu, log_sigma, inten = cloud.centers.copy(), np.log(cloud.sigmas), cloud.intensities.copy()
            acc = ParamGrads.zeros(cloud.n)
            n_acc = 0
        if callback is not None:
            callback(it + 1, GaussianCloud(mu, np.exp(log_sigma), inten, cloud.support))

    cloud = GaussianCloud(mu, np.exp(log_sigma), inten, cloud.support, cloud.low_grad_streak)
    lam = np.maximum(rasterize_array(cloud, grid.dims, det), 0.0)
    return FitResult(Volume(grid, lam), cloud, trace)


def normalized_back_projection(y: Sinogram, model: ForwardModel, grid: Grid) -> Volume:
    """Unfiltered back-projection scaled so its projection matches the data total."""
    yd = np.maximum(np.asarray(y.data, dtype=np.float64) - model.background, 0.0)
    bp = back_project_array(yd, model, grid)
    proj = forward_project_array(bp, model, grid).sum()
    scale = yd.sum() / proj if proj > 0 else 0.0
    return Volume(grid, bp * scale)
