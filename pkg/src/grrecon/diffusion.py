"""DDPM schedule, forward noising, ancestral reverse steps and an exact GMM denoiser.

Steps are 1-based: ``t = 1..T``, and schedule arrays are indexed ``t - 1``.
States are plain float64 arrays; any leading dimensions are treated as a batch
of independent chains.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Protocol

import numba
import numpy as np
from scipy.special import logsumexp


@dataclass(frozen=True)
class DiffusionSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    @property
    def T(self) -> int:
        return self.beta.size

    def check_step(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"step {t} outside [1, {self.T}]")


def build_schedule(T: int = 1000, kind: str = "linear", beta_start: float = 1e-4,
                   beta_end: float = 0.02) -> DiffusionSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if kind != "linear":
        raise ValueError(f"unknown schedule kind {kind!r}")
    beta = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([beta_start])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return DiffusionSchedule(beta, alpha, alpha_bar, np.sqrt(beta))


def q_sample(x0: np.ndarray, t: int, eps: np.ndarray, schedule: DiffusionSchedule) -> np.ndarray:
    schedule.check_step(t)
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch {x0.shape} vs {eps.shape}")
    ab = schedule.alpha_bar[t - 1]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


class Denoiser(Protocol):
    def __call__(self, x_t: np.ndarray, t: int) -> np.ndarray: ...


def _reverse_mean(x_t, t, eps, schedule: DiffusionSchedule):
    i = t - 1
    coef = schedule.beta[i] / np.sqrt(1.0 - schedule.alpha_bar[i])
    return (x_t - coef * eps) / np.sqrt(schedule.alpha[i])


def reverse_step(x_t: np.ndarray, t: int, denoiser: Denoiser, schedule: DiffusionSchedule,
                 rng: np.random.Generator | int | None = None) -> np.ndarray:
    """One ancestral step ``x_t -> x_{t-1}``; the last step (t = 1) adds no noise.

    ``rng`` may be a Generator (advanced in place) or an integer seed.
    """
    schedule.check_step(t)
    x_t = np.asarray(x_t, dtype=np.float64)
    eps = np.asarray(denoiser(x_t, t), dtype=np.float64)
    if eps.shape != x_t.shape:
        raise ValueError(f"denoiser returned shape {eps.shape}, expected {x_t.shape}")
    mean = _reverse_mean(x_t, t, eps, schedule)
    if t == 1 or rng is None:
        return mean
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return mean + schedule.sigma[t - 1] * rng.standard_normal(x_t.shape)


@dataclass
class GmmPrior:
    """Per-voxel Gaussian mixture: ``sum_k w_k N(m_k, s2_k)`` independently at each voxel."""

    weights: np.ndarray
    means: list
    variances: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).ravel()
        self.variances = np.asarray(self.variances, dtype=np.float64).ravel()
        self.means = [np.asarray(m, dtype=np.float64) for m in self.means]
        k = self.weights.size
        if len(self.means) != k or self.variances.size != k:
            raise ValueError("weights, means and variances must have one entry per component")
        if np.any(self.weights <= 0) or not np.isclose(self.weights.sum(), 1.0):
            raise ValueError("mixture weights must be positive and sum to 1")
        if np.any(self.variances <= 0):
            raise ValueError("component variances must be > 0")

    @classmethod
    def from_dict(cls, d: dict, volumes: dict[str, np.ndarray] | None = None) -> "GmmPrior":
        """Build from ``{"components": [{"weight", "mean", "variance"}, ...]}``.

        A string mean names an entry of ``volumes`` (for example ``"ground_truth"``).
        """
        comps = d["components"]
        means = []
        for c in comps:
            m = c["mean"]
            if isinstance(m, str):
                if not volumes or m not in volumes:
                    raise KeyError(f"prior mean refers to unknown volume {m!r}")
                m = volumes[m]
            means.append(m)
        return cls([c["weight"] for c in comps], means, [c["variance"] for c in comps])

    def crop(self, sl) -> "GmmPrior":
        """Restrict volume-shaped means to a sub-block (for chunked sampling)."""
        return GmmPrior(self.weights, [m[sl] if m.ndim == 3 else m for m in self.means],
                        self.variances)

    def log_marginal(self, x_t: np.ndarray, t: int, schedule: DiffusionSchedule) -> np.ndarray:
        """Per-voxel log density of ``x_t`` under the noised mixture."""
        ab = schedule.alpha_bar[t - 1]
        terms = []
        for w, m, s2 in zip(self.weights, self.means, self.variances):
            v = ab * s2 + 1.0 - ab
            r = x_t - np.sqrt(ab) * m
            terms.append(np.log(w) - 0.5 * np.log(2 * np.pi * v) - 0.5 * r * r / v)
        return logsumexp(np.stack(terms), axis=0)


@numba.njit(cache=True)
def _gmm_eps_kernel(x, means, log_w, var_t, sqrt_ab, sqrt_1mab, out):
    k = means.shape[0]
    m = means.shape[1]
    logit = np.empty(k)
    slope = np.empty(k)
    for b in range(x.shape[0]):
        for i in range(m):
            xv = x[b, i]
            top = -np.inf
            for c in range(k):
                r = xv - sqrt_ab * means[c, i]
                logit[c] = log_w[c] - 0.5 * r * r / var_t[c]
                slope[c] = -r / var_t[c]
                if logit[c] > top:
                    top = logit[c]
            num = 0.0
            den = 0.0
            for c in range(k):
                e = np.exp(logit[c] - top)
                num += e * slope[c]
                den += e
            out[b, i] = -sqrt_1mab * num / den


def gmm_denoiser_eps(x_t: np.ndarray, t: int, prior: GmmPrior,
                     schedule: DiffusionSchedule) -> np.ndarray:
    """Exact noise prediction ``-sqrt(1 - abar_t) * score`` for a GMM prior.

    Responsibilities are normalized with a running max (log-sum-exp).
    """
    schedule.check_step(t)
    x_t = np.asarray(x_t, dtype=np.float64)
    ab = schedule.alpha_bar[t - 1]
    var_t = ab * prior.variances + 1.0 - ab
    if np.any(var_t <= 0):
        raise FloatingPointError(f"degenerate marginal variance at step {t}")
    vshape = x_t.shape[-3:] if x_t.ndim >= 3 else x_t.shape
    means = np.stack([np.broadcast_to(m, vshape) for m in prior.means]).reshape(len(prior.means), -1)
    xb = np.ascontiguousarray(x_t).reshape(-1, means.shape[1])
    out = np.empty_like(xb)
    log_w = np.log(prior.weights) - 0.5 * np.log(var_t)
    _gmm_eps_kernel(xb, np.ascontiguousarray(means), log_w, var_t, math.sqrt(ab),
                    math.sqrt(1.0 - ab), out)
    return out.reshape(x_t.shape)


class GmmDenoiser:
    """Bind a prior and schedule into the ``(x_t, t) -> eps`` denoiser contract."""

    def __init__(self, prior: GmmPrior, schedule: DiffusionSchedule):
        self.prior = prior
        self.schedule = schedule

    def __call__(self, x_t: np.ndarray, t: int) -> np.ndarray:
        return gmm_denoiser_eps(x_t, t, self.prior, self.schedule)


def load_external_denoiser(path) -> Denoiser:
    raise NotImplementedError(
        f"external denoiser weights ({path}) are not supported yet; use a GMM prior")


Hook = Callable[[np.ndarray, int], np.ndarray]


def sample(denoiser: Denoiser, schedule: DiffusionSchedule, shape, seed,
           guidance: Hook | None = None, record: Callable[[int, np.ndarray], None] | None = None
           ) -> np.ndarray:
    """Ancestral sampling from pure noise down to ``x_0``.

    ``shape`` is a grid shape (optionally with leading batch axes). ``seed`` is
    an int, or a sequence of ints, one per chain along the first axis; chains
    with equal seeds see identical noise regardless of batching. ``guidance``
    is called as ``hook(x_{t-1}, t)`` after every step and its return value is
    added to the state.
    """
    shape = tuple(shape.dims) if hasattr(shape, "dims") else tuple(shape)
    if np.ndim(seed) == 0:
        rngs = [np.random.default_rng(seed)]
        chain_shape = shape
    else:
        rngs = [np.random.default_rng(s) for s in seed]
        if shape[0] != len(rngs):
            raise ValueError("one seed per chain along the leading axis is required")
        chain_shape = shape[1:]

    def noise():
        if len(rngs) == 1 and np.ndim(seed) == 0:
            return rngs[0].standard_normal(chain_shape)
        return np.stack([r.standard_normal(chain_shape) for r in rngs])

    x = noise()
    for t in range(schedule.T, 0, -1):
        eps = np.asarray(denoiser(x, t), dtype=np.float64)
        if eps.shape != x.shape:
            raise ValueError(f"denoiser returned shape {eps.shape}, expected {x.shape}")
        x = _reverse_mean(x, t, eps, schedule)
        if t > 1:
            x = x + schedule.sigma[t - 1] * noise()
        if guidance is not None:
            x = x + guidance(x, t)
        if record is not None:
            record(t, x)
    return x

