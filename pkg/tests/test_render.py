import math

import numpy as np
import pytest
import torch

from handgs.errors import DimensionError, RenderError
from handgs.render import (Camera, RenderedImage, RenderSettings, ScreenSplats, composite_dense, composite_overlay,
                           composite_tiled, project_splats, psnr, rasterize, rasterize_reference, ssim)

IDENT = np.concatenate([np.eye(3), np.zeros((3, 1))], 1)


def cam(w=64, h=64, f=50.0):
    return Camera(f, f, w / 2, h / 2, w, h, IDENT)


def random_scene(rng, n, w, h):
    mean = rng.uniform([-4, -4], [w + 4, h + 4], (n, 2))
    L = rng.normal(size=(n, 2, 2)) * rng.uniform(0.5, 4.0, (n, 1, 1))
    cov = L @ L.transpose(0, 2, 1) + 0.3 * np.eye(2)
    return ScreenSplats(mean, cov, rng.uniform(0.1, 5.0, n), rng.uniform(0, 1, (n, 3)), rng.uniform(0.05, 1.0, n),
                        np.ones(n, dtype=bool))


def splat(x, y, sigma, depth, color, opacity=1.0):
    return ScreenSplats(np.array([[x, y]], float), np.array([np.eye(2) * sigma**2]), np.array([depth], float),
                        np.array([color], float), np.array([opacity], float), np.array([True]))


def concat(*ss):
    return ScreenSplats(*(np.concatenate([getattr(s, k) for s in ss]) for k in
                          ("mean2d", "cov2d", "depth", "color", "opacity", "visible")))


# ---------------------------------------------------------------- rasterizer examples


@pytest.mark.parametrize("fn", [rasterize, rasterize_reference])
def test_zero_splats_black(fn):
    empty = ScreenSplats(np.zeros((0, 2)), np.zeros((0, 2, 2)), np.zeros(0), np.zeros((0, 3)), np.zeros(0),
                         np.zeros(0, bool))
    img = fn(empty, cam())
    assert not img.rgb.any() and not img.alpha.any()


@pytest.mark.parametrize("fn", [rasterize, rasterize_reference])
def test_single_splat_center_alpha_clamped(fn):
    img = fn(splat(32, 32, 2.0, 1.0, [1, 1, 1]), cam())
    assert img.alpha[32, 32] == pytest.approx(0.99, abs=1e-15)


@pytest.mark.parametrize("fn", [rasterize, rasterize_reference])
def test_two_splats_front_red_back_green(fn):
    s = concat(splat(32, 32, 3.0, 2.0, [0, 1, 0]), splat(32, 32, 3.0, 1.0, [1, 0, 0]))
    img = fn(s, cam())
    np.testing.assert_allclose(img.rgb[32, 32], [0.99, 0.0099, 0.0], atol=1e-15)
    assert img.alpha[32, 32] == pytest.approx(0.9999, abs=1e-15)


def test_non_finite_splat_reports_index():
    s = concat(splat(10, 10, 2, 1, [1, 0, 0]), splat(20, 20, 2, 1, [np.nan, 0, 0]))
    for fn in (rasterize, rasterize_reference):
        with pytest.raises(RenderError) as e:
            fn(s, cam())
        assert e.value.splat_index == 1


def test_tiled_matches_reference_random_scenes(rng):
    for _ in range(20):
        s = random_scene(rng, int(rng.integers(1, 100)), 64, 64)
        a, b = rasterize(s, cam()), rasterize_reference(s, cam())
        assert np.abs(a.rgb - b.rgb).max() < 1e-5
        assert np.abs(a.alpha - b.alpha).max() < 1e-5


def test_tiled_matches_reference_1k_splats_128(rng):
    s = random_scene(rng, 1000, 128, 128)
    a, b = rasterize(s, cam(128, 128)), rasterize_reference(s, cam(128, 128))
    assert np.abs(a.rgb - b.rgb).max() <= 1e-6
    assert np.abs(a.alpha - b.alpha).max() <= 1e-6


def test_permutation_invariance_and_bounds(rng):
    s = random_scene(rng, 60, 64, 64)
    base = rasterize(s, cam())
    perm = rng.permutation(60)
    again = rasterize(s.select(perm), cam())
    np.testing.assert_array_equal(base.rgb, again.rgb)
    assert base.alpha.max() <= 1.0 and base.alpha.min() >= 0.0


def test_adding_splat_never_lowers_alpha(rng):
    s = random_scene(rng, 30, 64, 64)
    before = rasterize(s, cam()).alpha
    after = rasterize(concat(s, random_scene(rng, 1, 64, 64)), cam()).alpha
    assert np.all(after >= before - 1e-15)


# ---------------------------------------------------------------- projection


def fronto(a, z, f=50.0):
    centers = torch.tensor([[0.0, 0.0, z]], dtype=torch.float64)
    cov = torch.as_tensor(np.diag([a * a, a * a, 0.0])[None])
    return project_splats(cam(f=f), centers, cov)


def test_fronto_parallel_isotropic_covariance():
    mean, cov, depth, vis = fronto(0.01, 0.5)
    assert vis.item()
    np.testing.assert_allclose(mean[0].numpy(), [32, 32])
    expect = (50 * 0.01 / 0.5) ** 2 + 0.3
    np.testing.assert_allclose(cov[0].numpy(), np.diag([expect, expect]), rtol=1e-12)


def test_behind_camera_culled():
    _, _, _, vis = fronto(0.01, -0.5)
    assert not vis.item()
    _, _, _, vis = fronto(0.01, 0.005)
    assert not vis.item()


def test_doubling_depth_halves_sigma():
    s = RenderSettings(eps_cov=0.0)
    for z in (0.2, 0.5, 1.3):
        sig = []
        for d in (z, 2 * z):
            centers = torch.tensor([[0.0, 0.0, d]], dtype=torch.float64)
            cov = torch.as_tensor(np.diag([1e-4, 1e-4, 0.0])[None])
            sig.append(math.sqrt(project_splats(cam(), centers, cov, s)[1][0, 0, 0].item()))
        assert sig[1] / sig[0] == pytest.approx(0.5, rel=1e-2)


def test_offscreen_culled():
    centers = torch.tensor([[5.0, 0.0, 0.5]], dtype=torch.float64)
    cov = torch.as_tensor(np.diag([1e-6, 1e-6, 0.0])[None])
    assert not project_splats(cam(), centers, cov)[3].item()


def test_scaled_camera_scales_sigma():
    centers = torch.tensor([[0.01, -0.02, 0.4]], dtype=torch.float64)
    cov = torch.as_tensor(np.diag([1e-4, 4e-4, 0.0])[None])
    s = RenderSettings(eps_cov=0.0)
    c1 = project_splats(cam(), centers, cov, s)[1][0].numpy()
    c2 = project_splats(cam().scaled(2.0), centers, cov, s)[1][0].numpy()
    np.testing.assert_allclose(c2, 4 * c1, rtol=1e-12)


# ---------------------------------------------------------------- differentiable compositors


def torch_scene(rng, n, w, h):
    s = random_scene(rng, n, w, h)
    t = [torch.tensor(getattr(s, k), requires_grad=True) for k in ("mean2d", "cov2d", "color", "opacity")]
    return t, torch.as_tensor(s.depth), torch.as_tensor(s.visible)


def test_composite_tiled_forward_and_grad_match_dense(rng):
    (m, c, col, op), depth, vis = torch_scene(rng, 40, 32, 24)
    vis[3] = False
    w = torch.as_tensor(rng.normal(size=(24, 32, 3)))
    wa = torch.as_tensor(rng.normal(size=(24, 32)))
    outs = []
    for fn in (composite_tiled, composite_dense):
        rgb, alpha = fn(m, c, depth, col, op, vis, 32, 24)
        g = torch.autograd.grad((rgb * w).sum() + (alpha * wa).sum(), (m, c, col, op))
        outs.append((rgb.detach(), alpha.detach(), g))
    (r1, a1, g1), (r2, a2, g2) = outs
    # the tiled path drops footprints below the 1e-9 cutoff: at most n * 1e-9 per pixel
    bound = 40 * 1e-9
    assert (r1 - r2).abs().max() < bound and (a1 - a2).abs().max() < bound
    for x, y in zip(g1, g2):
        assert (x - y).abs().max() < 1e-7
    assert not g1[0][3].any()


def test_composite_tiled_matches_rasterize(rng):
    s = random_scene(rng, 50, 48, 40)
    rgb, alpha = composite_tiled(*(torch.as_tensor(getattr(s, k)) for k in
                                   ("mean2d", "cov2d", "depth", "color", "opacity", "visible")), 48, 40)
    ref = rasterize_reference(s, cam(48, 40))
    assert np.abs(rgb.numpy() - ref.rgb).max() < 1e-5


# ---------------------------------------------------------------- overlay


def test_overlay_examples(rng):
    bg = rng.uniform(0, 1, (8, 8, 3))
    rgb = rng.uniform(0, 1, (8, 8, 3))
    zero = np.zeros((8, 8))
    np.testing.assert_array_equal(composite_overlay(RenderedImage(np.zeros((8, 8, 3)), zero), bg, zero), bg)
    np.testing.assert_array_equal(composite_overlay(RenderedImage(rgb, np.ones((8, 8))), bg, np.ones((8, 8))), bg)
    out = composite_overlay(RenderedImage(rgb, np.ones((8, 8))), bg, zero)
    np.testing.assert_array_equal(out, rgb)
    with pytest.raises(DimensionError):
        composite_overlay(RenderedImage(rgb, zero), bg[:4], zero)


# ---------------------------------------------------------------- metrics


def test_metric_examples():
    a = np.zeros((16, 16, 3))
    assert psnr(a, a) == 99.0 and ssim(a, a) == pytest.approx(1.0)
    assert psnr(a, a + 0.5) == pytest.approx(6.020599913279624, abs=1e-12)
    with pytest.raises(DimensionError):
        psnr(a, a[:8])


def ssim_loop(a, b, size=11, sigma=1.5):
    """Per-pixel, per-channel loop with explicit zero padding."""
    x = np.arange(size) - size // 2
    g = np.exp(-(x[:, None] ** 2 + x[None] ** 2) / (2 * sigma**2))
    g /= g.sum()
    H, W, C = a.shape
    r = size // 2
    total = 0.0
    for c in range(C):
        pa = np.pad(a[..., c], r)
        pb = np.pad(b[..., c], r)
        for i in range(H):
            for j in range(W):
                wa = pa[i:i + size, j:j + size]
                wb = pb[i:i + size, j:j + size]
                mx, my = (g * wa).sum(), (g * wb).sum()
                sxx = (g * wa * wa).sum() - mx * mx
                syy = (g * wb * wb).sum() - my * my
                sxy = (g * wa * wb).sum() - mx * my
                total += ((2 * mx * my + 1e-4) * (2 * sxy + 9e-4)) / ((mx * mx + my * my + 1e-4) * (sxx + syy + 9e-4))
    return total / (H * W * C)


def test_metrics_match_scalar_loop(rng):
    a = rng.uniform(0, 1, (20, 17, 3))
    b = np.clip(a + rng.normal(scale=0.1, size=a.shape), 0, 1)
    mse = sum((a.flat[i] - b.flat[i]) ** 2 for i in range(a.size)) / a.size
    assert psnr(a, b) == pytest.approx(10 * math.log10(1 / mse), abs=1e-9)
    assert ssim(a, b) == pytest.approx(ssim_loop(a, b), abs=1e-9)
