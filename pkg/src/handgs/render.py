"""Pinhole projection, splat rasterization and image metrics.

Three compositors implement one equation. Splats are visited front to back
by depth (stable index tie-break), each contributing

    alpha_i = min(alpha_max, opacity_i * exp(-0.5 d^T cov2d^-1 d))
    C += alpha_i * T * color_i,   T *= 1 - alpha_i

and a pixel stops once ``T < t_min``. Pixel (x, y) is sampled at its
integer coordinates.

* :func:`rasterize` - tiled numba kernel for throughput.
* :func:`rasterize_reference` - brute force over every pixel/splat pair.
* :func:`composite_dense` - dense torch version used for gradients.

The tiled kernel bins each splat into the tiles covered by the ellipse
``opacity * exp(-0.5 q) = cutoff_alpha``; outside it a splat contributes
less than ``cutoff_alpha`` and is skipped.

``RenderedImage.rgb`` is premultiplied (composited over black).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numba
import numpy as np
import torch

from .errors import DimensionError, DomainError, RenderError

# prefer OpenMP; probing an old system TBB only produces a warning
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

PSNR_CAP = 99.0


@dataclass
class RenderSettings:
    alpha_max: float = 0.99
    t_min: float = 1e-4
    tile_size: int = 16
    cutoff_alpha: float = 1e-9
    eps_cov: float = 0.3
    near: float = 0.01
    cull_sigma: float = 3.0


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: np.ndarray  # (3, 4)

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64).reshape(-1)[:12].reshape(3, 4)
        self.width, self.height = int(self.width), int(self.height)
        if not (self.fx > 0 and self.fy > 0):
            raise DomainError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise DomainError("principal point must lie inside the image")
        R = self.world_to_camera[:, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or np.linalg.det(R) < 0:
            raise DomainError("world_to_camera rotation is not a proper rotation")

    def scaled(self, k: float) -> "Camera":
        """Same view at ``k`` times the resolution."""
        return Camera(self.fx * k, self.fy * k, self.cx * k, self.cy * k,
                      round(self.width * k), round(self.height * k), self.world_to_camera)

    def with_pose(self, world_to_camera) -> "Camera":
        return Camera(self.fx, self.fy, self.cx, self.cy, self.width, self.height, world_to_camera)

    def to_json(self) -> dict:
        d = asdict(self)
        d["world_to_camera"] = self.world_to_camera.tolist()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Camera":
        return cls(**{k: d[k] for k in ("fx", "fy", "cx", "cy", "width", "height", "world_to_camera")})


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-to-camera 3x4 for an OpenCV camera (x right, y down, z forward)."""
    eye, target, up = (np.asarray(a, dtype=np.float64) for a in (eye, target, up))
    z = target - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, [0.0, 1.0, 0.0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return np.concatenate([R, -(R @ eye)[:, None]], 1)


@dataclass
class ScreenSplats:
    """Batch of projected splats; ``visible`` is False for culled entries."""

    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: np.ndarray
    color: np.ndarray
    opacity: np.ndarray
    visible: np.ndarray

    def __len__(self):
        return len(self.depth)

    @classmethod
    def from_torch(cls, mean2d, cov2d, depth, color, opacity, visible) -> "ScreenSplats":
        return cls(*(t.detach().cpu().numpy().astype(np.float64) if t.dtype.is_floating_point else t.detach().cpu().numpy()
                     for t in (mean2d, cov2d, depth, color, opacity, visible)))

    def select(self, index) -> "ScreenSplats":
        return ScreenSplats(self.mean2d[index], self.cov2d[index], self.depth[index],
                            self.color[index], self.opacity[index], self.visible[index])


@dataclass
class RenderedImage:
    rgb: np.ndarray  # (H, W, 3) linear, premultiplied
    alpha: np.ndarray  # (H, W)

    def clamped(self) -> np.ndarray:
        return np.clip(self.rgb, 0.0, 1.0)

    def straight_rgb(self) -> np.ndarray:
        a = self.alpha[..., None]
        return np.divide(self.rgb, a, out=np.zeros_like(self.rgb), where=a > 0)


# ---------------------------------------------------------------- projection


def project_splats(cam: Camera, centers: torch.Tensor, cov_world: torch.Tensor, settings: RenderSettings = RenderSettings()):
    """Local-affine (EWA) projection of world covariances.

    Returns (mean2d (N,2), cov2d (N,2,2), depth (N,), visible (N,) bool).
    Culled splats keep finite placeholder values.
    """
    dt = centers.dtype
    Rw = torch.as_tensor(cam.world_to_camera[:, :3], dtype=dt)
    tw = torch.as_tensor(cam.world_to_camera[:, 3], dtype=dt)
    pc = centers @ Rw.T + tw
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    front = z > settings.near
    zs = torch.where(front, z, torch.ones_like(z))
    mean2d = torch.stack([cam.fx * x / zs + cam.cx, cam.fy * y / zs + cam.cy], -1)
    zero = torch.zeros_like(zs)
    J = torch.stack([
        torch.stack([cam.fx / zs, zero, -cam.fx * x / zs**2], -1),
        torch.stack([zero, cam.fy / zs, -cam.fy * y / zs**2], -1),
    ], -2)
    JR = J @ Rw
    cov2d = JR @ cov_world @ JR.transpose(-1, -2) + settings.eps_cov * torch.eye(2, dtype=dt)
    with torch.no_grad():
        sx = torch.sqrt(cov2d[:, 0, 0].clamp_min(0)) * settings.cull_sigma
        sy = torch.sqrt(cov2d[:, 1, 1].clamp_min(0)) * settings.cull_sigma
        mx, my = mean2d[:, 0], mean2d[:, 1]
        inside = (mx > -0.5 - sx) & (mx < cam.width - 0.5 + sx) & (my > -0.5 - sy) & (my < cam.height - 0.5 + sy)
        visible = front & inside
    return mean2d, cov2d, z, visible


def project_splat(cam: Camera, splats, colors=None, settings: RenderSettings = RenderSettings()) -> ScreenSplats:
    """Project a :class:`~handgs.surfgauss.WorldSplat` batch to the screen.

    ``colors`` defaults to the splat albedo (unshaded).
    """
    centers = torch.as_tensor(np.asarray(splats.center, dtype=np.float64))
    cov = torch.as_tensor(splats.covariance())
    mean2d, cov2d, depth, visible = project_splats(cam, centers, cov, settings)
    color = torch.as_tensor(np.asarray(splats.albedo if colors is None else colors, dtype=np.float64))
    return ScreenSplats.from_torch(mean2d, cov2d, depth, color, torch.as_tensor(np.asarray(splats.opacity)), visible)


# ---------------------------------------------------------------- compositing


def _prepare(splats: ScreenSplats):
    """Visible splats in compositing order, with conics. Validates finiteness."""
    idx = np.flatnonzero(splats.visible)
    for name in ("mean2d", "cov2d", "depth", "color", "opacity"):
        arr = getattr(splats, name)[idx].reshape(len(idx), -1) if len(idx) else np.zeros((0, 1))
        bad = ~np.all(np.isfinite(arr), axis=1)
        if bad.any():
            i = int(idx[np.argmax(bad)])
            raise RenderError(f"splat {i} has non-finite {name}", splat_index=i)
    idx = idx[np.argsort(splats.depth[idx], kind="stable")]
    cov = splats.cov2d[idx]
    a, b, c = cov[:, 0, 0], 0.5 * (cov[:, 0, 1] + cov[:, 1, 0]), cov[:, 1, 1]
    det = a * c - b * b
    if np.any(det <= 0):
        i = int(idx[np.argmax(det <= 0)])
        raise RenderError(f"splat {i} has a non positive-definite screen covariance", splat_index=i)
    conic = np.stack([c / det, -b / det, a / det], -1)
    return (np.ascontiguousarray(splats.mean2d[idx]), np.ascontiguousarray(conic),
            np.ascontiguousarray(splats.opacity[idx], dtype=np.float64),
            np.ascontiguousarray(splats.color[idx], dtype=np.float64), cov)


def rasterize_reference(splats: ScreenSplats, cam: Camera, settings: RenderSettings = RenderSettings()) -> RenderedImage:
    """Brute-force compositor: every pixel against every splat, no binning."""
    mean, conic, opacity, color, _ = _prepare(splats)
    H, W = cam.height, cam.width
    py, px = np.mgrid[0:H, 0:W].astype(np.float64)
    rgb = np.zeros((H, W, 3))
    T = np.ones((H, W))
    live = np.ones((H, W), dtype=bool)
    for i in range(len(opacity)):
        dx = px - mean[i, 0]
        dy = py - mean[i, 1]
        power = -0.5 * (conic[i, 0] * dx * dx + 2.0 * conic[i, 1] * dx * dy + conic[i, 2] * dy * dy)
        a = np.minimum(settings.alpha_max, opacity[i] * np.exp(power))
        a = np.where(live, a, 0.0)
        rgb += (a * T)[..., None] * color[i]
        T = T * (1.0 - a)
        live &= T >= settings.t_min
    return RenderedImage(rgb, 1.0 - T)


@numba.njit(cache=True)
def _bin_tiles(mean, cov, opacity, cutoff, width, height, tile):
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    n = mean.shape[0]
    rect = np.empty((n, 4), dtype=np.int64)
    counts = np.zeros(ntx * nty + 1, dtype=np.int64)
    for i in range(n):
        if opacity[i] <= cutoff:
            rect[i, 0] = 0
            rect[i, 1] = 0
            rect[i, 2] = 0
            rect[i, 3] = 0
            continue
        r = math.sqrt(2.0 * math.log(opacity[i] / cutoff))
        ex = r * math.sqrt(cov[i, 0, 0])
        ey = r * math.sqrt(cov[i, 1, 1])
        x0 = max(0, int(math.floor((mean[i, 0] - ex) / tile)))
        x1 = min(ntx, int(math.floor((mean[i, 0] + ex) / tile)) + 1)
        y0 = max(0, int(math.floor((mean[i, 1] - ey) / tile)))
        y1 = min(nty, int(math.floor((mean[i, 1] + ey) / tile)) + 1)
        rect[i, 0] = x0
        rect[i, 1] = max(x0, x1)
        rect[i, 2] = y0
        rect[i, 3] = max(y0, y1)
        for ty in range(y0, y1):
            for tx in range(x0, x1):
                counts[ty * ntx + tx + 1] += 1
    for t in range(ntx * nty):
        counts[t + 1] += counts[t]
    fill = counts[:-1].copy()
    lists = np.empty(counts[-1], dtype=np.int64)
    for i in range(n):
        for ty in range(rect[i, 2], rect[i, 3]):
            for tx in range(rect[i, 0], rect[i, 1]):
                t = ty * ntx + tx
                lists[fill[t]] = i
                fill[t] += 1
    return counts, lists


def _pack(lists, mean, conic, opacity, color, cutoff):
    """Splat data gathered in tile-list order so each tile streams one block.

    Columns: mean x, mean y, conic (3), log(cutoff / opacity), opacity, rgb.
    A pixel skips a splat whose exponent falls below the log bound, the same
    alpha cutoff used for binning.
    """
    lim = np.log(cutoff / opacity)
    table = np.concatenate([mean, conic, lim[:, None], opacity[:, None], color], 1)
    return np.ascontiguousarray(table[lists]), lim


@numba.njit(parallel=True, cache=True)
def _raster_tiles(starts, P, width, height, tile, alpha_max, t_min, rgb, alpha, end):
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    for t in numba.prange(ntx * nty):
        tx = t % ntx
        ty = t // ntx
        s0 = starts[t]
        s1 = starts[t + 1]
        for py in range(ty * tile, min(height, ty * tile + tile)):
            for px in range(tx * tile, min(width, tx * tile + tile)):
                T = 1.0
                r = 0.0
                g = 0.0
                b = 0.0
                k_end = s0
                for k in range(s0, s1):
                    k_end = k + 1
                    dx = px - P[k, 0]
                    dy = py - P[k, 1]
                    power = -0.5 * (P[k, 2] * dx * dx + 2.0 * P[k, 3] * dx * dy + P[k, 4] * dy * dy)
                    if power < P[k, 5]:
                        continue
                    a = P[k, 6] * math.exp(power)
                    if a > alpha_max:
                        a = alpha_max
                    w = a * T
                    r += w * P[k, 7]
                    g += w * P[k, 8]
                    b += w * P[k, 9]
                    T = T * (1.0 - a)
                    if T < t_min:
                        break
                rgb[py, px, 0] = r
                rgb[py, px, 1] = g
                rgb[py, px, 2] = b
                alpha[py, px] = 1.0 - T
                end[py, px] = k_end


@numba.njit(cache=True)
def _raster_tiles_backward(starts, lists, mean, conic, opacity, color, lim, width, height, tile, alpha_max, alpha, end,
                           g_rgb, g_alpha, g_mean, g_conic, g_opacity, g_color):
    # Back-to-front replay of each pixel's compositing chain. Serial so the
    # per-splat sums are accumulated in a fixed order.
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    for t in range(ntx * nty):
        tx = t % ntx
        ty = t // ntx
        s0 = starts[t]
        for py in range(ty * tile, min(height, ty * tile + tile)):
            for px in range(tx * tile, min(width, tx * tile + tile)):
                t_end = 1.0 - alpha[py, px]
                T = t_end
                gr = g_rgb[py, px, 0]
                gg = g_rgb[py, px, 1]
                gb = g_rgb[py, px, 2]
                ga = g_alpha[py, px]
                br = 0.0
                bg = 0.0
                bb = 0.0
                for k in range(end[py, px] - 1, s0 - 1, -1):
                    i = lists[k]
                    dx = px - mean[i, 0]
                    dy = py - mean[i, 1]
                    power = -0.5 * (conic[i, 0] * dx * dx + 2.0 * conic[i, 1] * dx * dy + conic[i, 2] * dy * dy)
                    if power < lim[i]:
                        continue
                    G = math.exp(power)
                    raw = opacity[i] * G
                    a = raw if raw < alpha_max else alpha_max
                    one_m = 1.0 - a
                    T = T / one_m  # transmittance in front of splat i
                    w = a * T
                    g_color[i, 0] += w * gr
                    g_color[i, 1] += w * gg
                    g_color[i, 2] += w * gb
                    dl_da = (gr * (color[i, 0] * T - br / one_m) + gg * (color[i, 1] * T - bg / one_m)
                             + gb * (color[i, 2] * T - bb / one_m) + ga * t_end / one_m)
                    br += w * color[i, 0]
                    bg += w * color[i, 1]
                    bb += w * color[i, 2]
                    if raw < alpha_max:
                        g_opacity[i] += dl_da * G
                        d_pow = dl_da * a
                        g_conic[i, 0] -= 0.5 * dx * dx * d_pow
                        g_conic[i, 1] -= dx * dy * d_pow
                        g_conic[i, 2] -= 0.5 * dy * dy * d_pow
                        g_mean[i, 0] += d_pow * (conic[i, 0] * dx + conic[i, 1] * dy)
                        g_mean[i, 1] += d_pow * (conic[i, 1] * dx + conic[i, 2] * dy)


def rasterize(splats: ScreenSplats, cam: Camera, settings: RenderSettings = RenderSettings()) -> RenderedImage:
    """Tiled compositor; tiles are independent so the result is schedule-free."""
    mean, conic, opacity, color, cov = _prepare(splats)
    H, W = cam.height, cam.width
    starts, lists = _bin_tiles(mean, np.ascontiguousarray(cov), opacity, settings.cutoff_alpha, W, H, settings.tile_size)
    rgb = np.zeros((H, W, 3))
    alpha = np.zeros((H, W))
    P, _ = _pack(lists, mean, conic, opacity, color, settings.cutoff_alpha)
    _raster_tiles(starts, P, W, H, settings.tile_size, settings.alpha_max, settings.t_min, rgb, alpha,
                  np.zeros((H, W), dtype=np.int64))
    return RenderedImage(rgb, alpha)


class _TiledComposite(torch.autograd.Function):
    """Tiled numba compositor with a hand-written backward pass."""

    @staticmethod
    def forward(ctx, mean, conic, color, opacity, cov_np, width, height, settings):
        m = np.ascontiguousarray(mean.detach().cpu().numpy(), dtype=np.float64)
        q = np.ascontiguousarray(conic.detach().cpu().numpy(), dtype=np.float64)
        c = np.ascontiguousarray(color.detach().cpu().numpy(), dtype=np.float64)
        o = np.ascontiguousarray(opacity.detach().cpu().numpy(), dtype=np.float64)
        starts, lists = _bin_tiles(m, cov_np, o, settings.cutoff_alpha, width, height, settings.tile_size)
        rgb = np.zeros((height, width, 3))
        alpha = np.zeros((height, width))
        end = np.zeros((height, width), dtype=np.int64)
        P, lim = _pack(lists, m, q, o, c, settings.cutoff_alpha)
        _raster_tiles(starts, P, width, height, settings.tile_size, settings.alpha_max, settings.t_min,
                      rgb, alpha, end)
        ctx.saved = (starts, lists, m, q, o, c, lim, alpha, end, width, height, settings)
        dt = mean.dtype
        return torch.from_numpy(rgb).to(dt), torch.from_numpy(alpha).to(dt)

    @staticmethod
    def backward(ctx, g_rgb, g_alpha):
        starts, lists, m, q, o, c, lim, alpha, end, width, height, settings = ctx.saved
        n = len(o)
        gm, gq, go, gc = np.zeros((n, 2)), np.zeros((n, 3)), np.zeros(n), np.zeros((n, 3))
        _raster_tiles_backward(starts, lists, m, q, o, c, lim, width, height, settings.tile_size, settings.alpha_max,
                               alpha, end, np.ascontiguousarray(g_rgb.detach().cpu().numpy(), dtype=np.float64),
                               np.ascontiguousarray(g_alpha.detach().cpu().numpy(), dtype=np.float64),
                               gm, gq, go, gc)
        dt = g_rgb.dtype
        return (torch.from_numpy(gm).to(dt), torch.from_numpy(gq).to(dt), torch.from_numpy(gc).to(dt),
                torch.from_numpy(go).to(dt), None, None, None, None)


def _sorted_visible(depth, visible):
    idx = torch.nonzero(visible).squeeze(-1)
    order = torch.as_tensor(np.argsort(depth.detach()[idx].cpu().numpy(), kind="stable"), dtype=torch.long)
    return idx[order]


def composite_tiled(mean2d, cov2d, depth, color, opacity, visible, width: int, height: int,
                    settings: RenderSettings = RenderSettings()):
    """Differentiable tiled compositor; same output as :func:`rasterize`.

    The backward pass replays each pixel's chain back to front, so memory
    and time scale with the splat/pixel overlaps instead of all pairs.
    """
    dt = mean2d.dtype
    idx = _sorted_visible(depth, visible)
    if len(idx) == 0:
        return torch.zeros(height, width, 3, dtype=dt), torch.zeros(height, width, dtype=dt)
    m, cv, col, op = mean2d[idx], cov2d[idx], color[idx], opacity[idx]
    a, b, c = cv[:, 0, 0], 0.5 * (cv[:, 0, 1] + cv[:, 1, 0]), cv[:, 1, 1]
    det = a * c - b * b
    conic = torch.stack([c / det, -b / det, a / det], -1)
    cov_np = np.ascontiguousarray(cv.detach().cpu().numpy(), dtype=np.float64)
    return _TiledComposite.apply(m, conic, col, op, cov_np, width, height, settings)


def composite_dense(mean2d, cov2d, depth, color, opacity, visible, width: int, height: int,
                    settings: RenderSettings = RenderSettings()):
    """Differentiable compositor over all (pixel, splat) pairs.

    Returns (rgb (H, W, 3), alpha (H, W)) torch tensors.
    """
    dt = mean2d.dtype
    idx = _sorted_visible(depth, visible)
    if len(idx) == 0:
        return torch.zeros(height, width, 3, dtype=dt), torch.zeros(height, width, dtype=dt)
    m, cv, col, op = mean2d[idx], cov2d[idx], color[idx], opacity[idx]
    a, b, c = cv[:, 0, 0], 0.5 * (cv[:, 0, 1] + cv[:, 1, 0]), cv[:, 1, 1]
    det = a * c - b * b
    py, px = torch.meshgrid(torch.arange(height, dtype=dt), torch.arange(width, dtype=dt), indexing="ij")
    dx = px.reshape(-1, 1) - m[:, 0]
    dy = py.reshape(-1, 1) - m[:, 1]
    power = -0.5 * ((c / det) * dx * dx + 2.0 * (-b / det) * dx * dy + (a / det) * dy * dy)
    alpha = torch.clamp(op * torch.exp(power), max=settings.alpha_max)
    trans = torch.cumprod(1.0 - alpha, dim=1)
    t_excl = torch.cat([torch.ones_like(trans[:, :1]), trans[:, :-1]], dim=1)
    live = (t_excl >= settings.t_min).to(dt)
    w = alpha * t_excl * live
    rgb = (w @ col).reshape(height, width, 3)
    return rgb, w.sum(1).reshape(height, width)


# ---------------------------------------------------------------- compositing onto frames


def composite_overlay(rendered: RenderedImage, background: np.ndarray, object_mask: np.ndarray) -> np.ndarray:
    """Paste a render over a background, leaving object pixels untouched."""
    bg = np.asarray(background, dtype=np.float64)
    mask = np.asarray(object_mask).astype(bool)
    if bg.shape != rendered.rgb.shape or mask.shape != rendered.alpha.shape:
        raise DimensionError(f"render {rendered.rgb.shape}, background {bg.shape}, mask {mask.shape} differ")
    over = rendered.rgb + (1.0 - rendered.alpha)[..., None] * bg
    return np.where(mask[..., None], bg, over)


# ---------------------------------------------------------------- metrics


def psnr(img_a, img_b) -> float:
    """PSNR in dB for [0, 1] images, capped at 99 dB."""
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def gaussian_kernel_1d(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - size // 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    g = gaussian_kernel_1d(size, sigma)
    return np.outer(g, g)


SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def ssim_torch(img_a: torch.Tensor, img_b: torch.Tensor, window: int = 11, sigma: float = 1.5) -> torch.Tensor:
    """Mean SSIM of (H, W, C) images: Gaussian 11x11 window (sigma 1.5),
    zero padding to keep the map H x W, C1 = 0.01^2, C2 = 0.03^2."""
    C = img_a.shape[-1]
    x = img_a.permute(2, 0, 1)
    y = img_b.permute(2, 0, 1)
    # all five moment maps through one separable (row, then column) filter
    stack = torch.cat([x, y, x * x, y * y, x * y]).unsqueeze(0)
    n = stack.shape[1]
    g = torch.as_tensor(gaussian_kernel_1d(window, sigma), dtype=img_a.dtype)
    pad = window // 2
    f = torch.nn.functional.conv2d(stack, g.view(1, 1, 1, window).expand(n, 1, 1, window), padding=(0, pad), groups=n)
    f = torch.nn.functional.conv2d(f, g.view(1, 1, window, 1).expand(n, 1, window, 1), padding=(pad, 0), groups=n)
    mu_x, mu_y, exx, eyy, exy = f[0].split(C)
    sxx = exx - mu_x**2
    syy = eyy - mu_y**2
    sxy = exy - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mu_x**2 + mu_y**2 + SSIM_C1) * (sxx + syy + SSIM_C2)
    return (num / den).mean()


def ssim(img_a, img_b) -> float:
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    return float(np.clip(ssim_torch(torch.as_tensor(a), torch.as_tensor(b)).item(), 0.0, 1.0))
