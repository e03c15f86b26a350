import math

import numpy as np
import pytest
from scipy.ndimage import minimum_filter
from hypothesis import given, settings
from hypothesis import strategies as st

from grrecon.diffusion import build_schedule
from grrecon.guidance import (GuidanceConfig, GuidanceHook, coarse_grad, fine_grad,
                              gaussian_blur3d, gaussian_kernel, guided_correction, in_window,
                              step_strengths, surrogate_check, window_bounds)


def test_config_defaults_and_validation():
    c = GuidanceConfig()
    assert c.kernel_sigmas == [1.0, 2.0, 4.0] and c.kernel_size == 3
    assert c.delta_weights == pytest.approx([1 / 3] * 3)
    assert c.window == (0.4, 0.6)
    for bad in ({"window": (0.7, 0.6)}, {"window": (-0.1, 0.5)}, {"kernel_size": 4},
                {"eta": -1.0}, {"kernel_sigmas": [0.0]}, {"delta_weights": [0.5, 0.6, -0.1]},
                {"delta_weights": [0.5, 0.5]}):
        with pytest.raises(ValueError):
            GuidanceConfig(**bad)
    assert GuidanceConfig.from_dict(c.to_dict()) == c


# ---------------------------------------------------------------- fine

def test_fine_grad_examples():
    rng = np.random.default_rng(0)
    ref = rng.standard_normal((4, 4, 4))
    assert not fine_grad(ref, ref, 0.5).any()
    x = ref.copy()
    x[0, 0, 0] += 1
    x[1, 0, 0] -= 1
    g = fine_grad(x, ref, 0.5)
    assert g[0, 0, 0] == -0.5 and g[1, 0, 0] == 0.5 and g[2, 0, 0] == 0.0
    x = ref + rng.standard_normal(ref.shape)
    np.testing.assert_array_equal(fine_grad(x, ref, 1.0), 2 * fine_grad(x, ref, 0.5))
    with pytest.raises(ValueError):
        fine_grad(np.zeros((4, 4, 3)), ref, 1.0)


def test_fine_grad_batches_over_chains():
    ref = np.zeros((3, 3, 3))
    x = np.stack([np.ones((3, 3, 3)), -np.ones((3, 3, 3))])
    g = fine_grad(x, ref, 2.0)
    assert np.all(g[0] == -2) and np.all(g[1] == 2)


# ---------------------------------------------------------------- blur

def test_kernel_normalized_and_validated():
    k = gaussian_kernel(1.3, 5)
    assert k.sum() == pytest.approx(1.0) and np.allclose(k, k[::-1])
    with pytest.raises(ValueError):
        gaussian_kernel(1.0, 4)
    with pytest.raises(ValueError):
        gaussian_kernel(0.0, 3)


def test_blur_constant_and_mass():
    np.testing.assert_allclose(gaussian_blur3d(np.full((5, 6, 7), 2.5), 1.0, 3), 2.5)
    imp = np.zeros((9, 9, 9))
    imp[4, 4, 4] = 1.0
    assert gaussian_blur3d(imp, 1.0, 3).sum() == pytest.approx(1.0)


def test_blur_wider_sigma_smooths_more():
    x = np.random.default_rng(1).standard_normal((16, 16, 16))
    assert gaussian_blur3d(x, 4.0, 3).var() < gaussian_blur3d(x, 1.0, 3).var()


def test_blur_is_self_adjoint_in_the_interior():
    rng = np.random.default_rng(2)
    a = np.zeros((10, 10, 10))
    a[1:-1, 1:-1, 1:-1] = rng.standard_normal((8, 8, 8))
    b = rng.standard_normal((10, 10, 10))
    lhs = np.vdot(gaussian_blur3d(a, 1.3, 3), b)
    rhs = np.vdot(a, gaussian_blur3d(b, 1.3, 3))
    assert lhs == pytest.approx(rhs, rel=1e-12)


# ---------------------------------------------------------------- coarse

def test_coarse_zero_and_constant():
    cfg = GuidanceConfig(omega=0.7)
    ref = np.random.default_rng(3).standard_normal((8, 8, 8))
    assert not coarse_grad(ref, ref, cfg).any()
    np.testing.assert_allclose(coarse_grad(ref + 0.3, ref, cfg), -0.7)


def test_coarse_size_one_equals_fine():
    rng = np.random.default_rng(4)
    ref, x = rng.standard_normal((6, 6, 6)), rng.standard_normal((6, 6, 6))
    cfg = GuidanceConfig(omega=0.9, kernel_size=1)
    np.testing.assert_allclose(coarse_grad(x, ref, cfg), fine_grad(x, ref, 0.9))


def test_gradient_norm_bounds():
    rng = np.random.default_rng(5)
    ref, x = rng.standard_normal((8, 8, 8)), rng.standard_normal((8, 8, 8))
    cfg = GuidanceConfig(eta=0.3, omega=0.4)
    assert np.abs(fine_grad(x, ref, 0.3)).max() <= 0.3
    assert np.abs(coarse_grad(x, ref, cfg)).max() <= 0.4 + 1e-15


def smoothed_blurred_l1(x, ref, cfg, eps):
    total = 0.0
    for var, d in zip(cfg.kernel_sigmas, cfg.delta_weights):
        z = gaussian_blur3d(x - ref, math.sqrt(var), cfg.kernel_size)
        total += d * np.sum(np.sqrt(z * z + eps * eps))
    return total


def test_coarse_matches_fd_of_smoothed_objective():
    rng = np.random.default_rng(6)
    shape = (10, 10, 10)
    ref, x = rng.standard_normal(shape), rng.standard_normal(shape)
    cfg = GuidanceConfig(omega=1.0)
    g = coarse_grad(x, ref, cfg)
    h = 1e-6
    # interior voxels whose 3x3x3 stencil keeps every blurred difference clear of zero
    zmin = np.min([np.abs(gaussian_blur3d(x - ref, math.sqrt(v), 3)) for v in cfg.kernel_sigmas],
                  axis=0)
    clear = minimum_filter(zmin, size=3) > 1e-3
    clear[:2] = clear[-2:] = False
    clear[:, :2] = clear[:, -2:] = False
    clear[:, :, :2] = clear[:, :, -2:] = False
    voxels = list(zip(*np.nonzero(clear)))[:40]
    assert len(voxels) >= 20
    errs, fds = [], []
    for v in voxels:
        xp, xm = x.copy(), x.copy()
        xp[v] += h
        xm[v] -= h
        fd = -(smoothed_blurred_l1(xp, ref, cfg, 1e-6)
               - smoothed_blurred_l1(xm, ref, cfg, 1e-6)) / (2 * h)
        errs.append(abs(g[v] - fd))
        fds.append(abs(fd))
    assert max(errs) <= 1e-3 * max(fds)


# ---------------------------------------------------------------- window

def test_window_examples():
    cfg = GuidanceConfig()
    assert window_bounds(1000, cfg) == (400, 600)
    assert in_window(500, 1000, cfg)
    assert not in_window(399, 1000, cfg) and in_window(400, 1000, cfg)
    assert in_window(600, 1000, cfg) and not in_window(601, 1000, cfg)
    full = GuidanceConfig(window=(0.0, 1.0))
    assert all(in_window(t, 1000, full) for t in range(1, 1001))
    off = GuidanceConfig(window=(0.0, 0.0))
    assert not any(in_window(t, 1000, off) for t in range(1, 1001))


def test_step_strengths_modes():
    s = build_schedule(1000)
    scaled = step_strengths(500, GuidanceConfig(eta=0.5, omega=0.2), s)
    assert scaled == pytest.approx((0.5 * math.sqrt(s.beta[499]), 0.2 * math.sqrt(s.beta[499])))
    raw = step_strengths(500, GuidanceConfig(eta=0.5, omega=0.2, scale_with_beta=False), s)
    assert raw == (0.5, 0.2)


# ---------------------------------------------------------------- correction

def test_guided_correction_examples():
    s = build_schedule(100)
    rng = np.random.default_rng(7)
    ref = rng.standard_normal((6, 6, 6))
    cfg = GuidanceConfig()
    x = ref + 5.0
    out = guided_correction(x, 30, ref, cfg, s)
    assert out.shape == x.shape and not out.any()
    assert not guided_correction(x, 50, ref, GuidanceConfig(eta=0, omega=0), s).any()
    inside = guided_correction(x, 50, ref, cfg, s)
    assert np.all(inside < 0)
    eta, omega = step_strengths(50, cfg, s)
    np.testing.assert_allclose(inside, -(eta + omega))
    with pytest.raises(ValueError):
        guided_correction(x[:, :, :5], 50, ref, cfg, s)


def test_hook_records_active_steps():
    s = build_schedule(20)
    ref = np.zeros((3, 3, 3))
    hook = GuidanceHook(ref, GuidanceConfig(), s)
    for t in range(20, 0, -1):
        hook(np.ones((3, 3, 3)), t)
    assert hook.active_steps == list(range(12, 7, -1))


# ---------------------------------------------------------------- surrogate

def test_surrogate_identical_reference():
    rng = np.random.default_rng(8)
    gt = rng.standard_normal((5, 5, 5))
    x = rng.standard_normal((5, 5, 5)) * 3
    r = surrogate_check(x, gt, gt, 0.1)
    assert r.sign_agreement_all == 1.0 and r.gradient_cosine == 1.0
    assert r.precondition_ok


def test_surrogate_constructed_case():
    rng = np.random.default_rng(9)
    xi = 0.2
    shape = (6, 6, 6)
    gt = rng.standard_normal(shape)
    d = rng.uniform(-1, 1, shape)
    d *= 0.9 * xi / np.abs(d).max()
    x_gr = gt - d
    dt = rng.choice([-1, 1], shape) * rng.uniform(1.1 * xi, 3 * xi, shape)
    x_t = gt - dt
    r = surrogate_check(x_t, x_gr, gt, xi)
    assert r.reference_gap_inf == pytest.approx(0.9 * xi)
    assert r.precondition_ok and r.applicable
    assert r.qualifying_fraction == 1.0 and r.sign_agreement == 1.0


def test_surrogate_late_chain_inapplicable():
    gt = np.random.default_rng(10).standard_normal((4, 4, 4))
    r = surrogate_check(gt, gt + 0.01, gt, 0.05)
    assert not r.applicable and r.sign_agreement is None and r.qualifying_fraction == 0.0
    assert not r.global_condition_inf


def test_surrogate_flags_violated_precondition():
    gt = np.zeros((3, 3, 3))
    r = surrogate_check(gt + 1.0, gt + 0.5, gt, 0.1)
    assert not r.precondition_ok


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), xi=st.floats(0.01, 2.0))
def test_surrogate_elementwise_property(seed, xi):
    rng = np.random.default_rng(seed)
    shape = (5, 5, 5)
    gt = rng.standard_normal(shape)
    x_gr = gt + rng.uniform(-0.999 * xi, 0.999 * xi, shape)
    x_t = gt + rng.standard_normal(shape) * 2 * xi
    r = surrogate_check(x_t, x_gr, gt, xi)
    assert r.precondition_ok
    if r.applicable:
        assert r.sign_agreement == 1.0
