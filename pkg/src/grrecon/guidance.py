"""Fine and coarse l1 guidance toward a reference volume, plus the sign-surrogate check.

All functions act on the last three axes, so a batch of chains can be guided
at once against a single reference.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .diffusion import DiffusionSchedule


@dataclass
class GuidanceConfig:
    eta: float = 0.5
    omega: float = 0.5
    # variances of the blur kernels (std = sqrt(variance))
    kernel_sigmas: list[float] = field(default_factory=lambda: [1.0, 2.0, 4.0])
    kernel_size: int = 3
    delta_weights: list[float] | None = None
    window: tuple[float, float] = (0.4, 0.6)
    xi: float | None = None
    scale_with_beta: bool = True

    def __post_init__(self):
        self.window = tuple(float(w) for w in self.window)
        lo, hi = self.window
        # start == end is accepted; (0, 0) switches guidance off
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError(f"window must satisfy 0 <= start <= end <= 1, got {self.window}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.eta < 0 or self.omega < 0:
            raise ValueError("eta and omega must be >= 0")
        if not self.kernel_sigmas or min(self.kernel_sigmas) <= 0:
            raise ValueError("kernel variances must be > 0")
        if self.delta_weights is None:
            n = len(self.kernel_sigmas)
            self.delta_weights = [1.0 / n] * n
        d = np.asarray(self.delta_weights, dtype=np.float64)
        if d.size != len(self.kernel_sigmas) or np.any(d <= 0) or not math.isclose(d.sum(), 1.0):
            raise ValueError("delta_weights must be positive, one per kernel, and sum to 1")

    @classmethod
    def from_dict(cls, d: dict) -> "GuidanceConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["window"] = list(self.window)
        return out


def _sign(x: np.ndarray) -> np.ndarray:
    # sign(0) = 0: a volume equal to its reference is a fixed point
    return np.sign(x)


def _check_shapes(a, b) -> None:
    if np.shape(a)[-3:] != np.shape(b)[-3:]:
        raise ValueError(f"grid mismatch {np.shape(a)} vs {np.shape(b)}")


def fine_grad(x_pred: np.ndarray, x_gr: np.ndarray, eta: float) -> np.ndarray:
    """``-eta * sign(x_pred - x_gr)``, the l1 subgradient step toward the reference."""
    _check_shapes(x_pred, x_gr)
    return -eta * _sign(np.asarray(x_pred, dtype=np.float64) - x_gr)


def gaussian_kernel(sigma: float, size: int) -> np.ndarray:
    if size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {size}")
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (r / sigma) ** 2)
    return k / k.sum()


def gaussian_blur3d(vol: np.ndarray, sigma: float, size: int) -> np.ndarray:
    """Separable blur over the last three axes with reflective borders."""
    k = gaussian_kernel(sigma, size)
    out = np.asarray(vol, dtype=np.float64)
    for ax in (-3, -2, -1):
        out = ndimage.correlate1d(out, k, axis=ax, mode="reflect")
    return out


def coarse_grad(x_pred: np.ndarray, x_gr: np.ndarray, cfg: GuidanceConfig,
                omega: float | None = None) -> np.ndarray:
    """Gradient step on ``sum_s delta_s |G_s * (x_pred - x_gr)|_1``.

    The blur is its own adjoint in the interior; at the border the reflective
    padding makes this an approximation.
    """
    _check_shapes(x_pred, x_gr)
    omega = cfg.omega if omega is None else omega
    diff = np.asarray(x_pred, dtype=np.float64) - x_gr
    out = np.zeros(np.broadcast_shapes(diff.shape, np.shape(x_gr)))
    for var, delta in zip(cfg.kernel_sigmas, cfg.delta_weights):
        std = math.sqrt(var)
        out += delta * gaussian_blur3d(_sign(gaussian_blur3d(diff, std, cfg.kernel_size)),
                                       std, cfg.kernel_size)
    return -omega * out


def window_bounds(T: int, cfg: GuidanceConfig) -> tuple[int, int]:
    return round(cfg.window[0] * T), round(cfg.window[1] * T)


def in_window(t: int, T: int, cfg: GuidanceConfig) -> bool:
    lo, hi = window_bounds(T, cfg)
    return lo <= t <= hi


def step_strengths(t: int, cfg: GuidanceConfig, schedule: DiffusionSchedule) -> tuple[float, float]:
    scale = math.sqrt(schedule.beta[t - 1]) if cfg.scale_with_beta else 1.0
    return cfg.eta * scale, cfg.omega * scale


def guided_correction(x_next: np.ndarray, t: int, x_gr: np.ndarray, cfg: GuidanceConfig,
                      schedule: DiffusionSchedule) -> np.ndarray:
    """Additive correction for the freshly updated state ``x_{t-1}`` (zero off-window)."""
    _check_shapes(x_next, x_gr)
    x_next = np.asarray(x_next, dtype=np.float64)
    if not in_window(t, schedule.T, cfg):
        return np.zeros_like(x_next)
    eta, omega = step_strengths(t, cfg, schedule)
    out = np.zeros_like(x_next)
    if eta > 0:
        out += fine_grad(x_next, x_gr, eta)
    if omega > 0:
        out += coarse_grad(x_next, x_gr, cfg, omega)
    return out


class GuidanceHook:
    """Callable for ``diffusion.sample``; remembers the steps at which it fired."""

    def __init__(self, x_gr: np.ndarray, cfg: GuidanceConfig, schedule: DiffusionSchedule):
        self.x_gr = np.asarray(x_gr, dtype=np.float64)
        self.cfg = cfg
        self.schedule = schedule
        self.active_steps: list[int] = []

    def __call__(self, x_next: np.ndarray, t: int) -> np.ndarray:
        if in_window(t, self.schedule.T, self.cfg):
            self.active_steps.append(t)
        return guided_correction(x_next, t, self.x_gr, self.cfg, self.schedule)


@dataclass
class SurrogateReport:
    xi: float
    reference_gap_inf: float
    precondition_ok: bool
    n_voxels: int
    qualifying_fraction: float
    sign_agreement: float | None
    sign_agreement_all: float
    gradient_cosine: float
    global_gap_inf: float
    global_gap_rms: float
    global_condition_inf: bool
    global_condition_rms: bool
    applicable: bool

    def to_dict(self) -> dict:
        return asdict(self)


def _strict_sign(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, 1.0, -1.0)


def surrogate_check(x_t: np.ndarray, x_gr: np.ndarray, x_gt: np.ndarray, xi: float) -> SurrogateReport:
    """Compare l1 subgradients toward the reference and toward the true volume.

    Voxels with ``|x_t - x_gt| > xi`` form the qualifying set; when the
    reference is within ``xi`` of the truth everywhere, the two subgradients
    must agree in sign on that set. A violated precondition or an empty set
    is reported, not raised.
    """
    _check_shapes(x_t, x_gr)
    _check_shapes(x_t, x_gt)
    x_t = np.asarray(x_t, dtype=np.float64)
    d = np.asarray(x_gt, dtype=np.float64) - x_gr
    d_t = np.asarray(x_gt, dtype=np.float64) - x_t
    g_ref = _strict_sign(x_t - x_gr)
    g_true = _strict_sign(x_t - x_gt)
    agree = g_ref == g_true
    qual = np.abs(d_t) > xi
    n_q = int(qual.sum())
    gap_inf = float(np.max(np.abs(d_t)))
    gap_rms = float(np.sqrt(np.mean(d_t * d_t)))
    return SurrogateReport(
        xi=float(xi),
        reference_gap_inf=float(np.max(np.abs(d))),
        precondition_ok=bool(np.max(np.abs(d)) < xi),
        n_voxels=int(x_t.size),
        qualifying_fraction=n_q / x_t.size,
        sign_agreement=float(agree[qual].mean()) if n_q else None,
        sign_agreement_all=float(agree.mean()),
        gradient_cosine=float(np.sum(g_ref * g_true) / x_t.size),
        global_gap_inf=gap_inf,
        global_gap_rms=gap_rms,
        global_condition_inf=gap_inf > xi,
        global_condition_rms=gap_rms > xi,
        applicable=n_q > 0,
    )
