"""Reconstruction loss, reverse-mode gradients, finite-difference checks,
Adam, and the fitting loop.

Gradients come from torch autograd over :meth:`handgs.model.Avatar.forward`
and the dense compositor, so every learnable block (Gaussian fields,
canonical vertex offsets, lighting network, per-frame pose refinements) is
differentiated exactly. :func:`finite_difference` re-runs the full forward
pass and is the independent check.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .errors import DimensionError, NumericError
from .lighting import LightingNet
from .mesh import ArticulatedMesh, PoseFrame, median_edge_length
from .model import Avatar, ParamLayout
from .render import Camera, RenderedImage, look_at, ssim_torch
from .surfgauss import SurfaceGaussianSet

log = logging.getLogger(__name__)


@dataclass
class LossReport:
    total: float
    l1: float
    dssim: float
    regularizers: dict = field(default_factory=dict)


def image_loss(rendered: torch.Tensor, target: torch.Tensor, lam: float = 0.2):
    """(total, l1, dssim) tensors with total = (1 - lam) L1 + lam (1 - SSIM)."""
    if rendered.shape != target.shape:
        raise DimensionError(f"rendered {tuple(rendered.shape)} vs target {tuple(target.shape)}")
    l1 = (rendered - target).abs().mean()
    dssim = 1.0 - ssim_torch(rendered, target)
    return (1.0 - lam) * l1 + lam * dssim, l1, dssim


def reconstruction_loss(rendered, target, lam: float = 0.2) -> LossReport:
    """Loss report for a render (RenderedImage or array, composited over black) vs a target image."""
    rgb = rendered.rgb if isinstance(rendered, RenderedImage) else rendered
    total, l1, dssim = image_loss(torch.as_tensor(np.asarray(rgb, dtype=np.float64)),
                                  torch.as_tensor(np.asarray(target, dtype=np.float64)), lam)
    return LossReport(float(total), float(l1), float(dssim))


@dataclass
class FrameSample:
    pose: PoseFrame
    frame: int | None
    camera: Camera
    target: np.ndarray


def training_objective(avatar: Avatar, layout: ParamLayout, flat: torch.Tensor, sample: FrameSample, cfg: RunConfig,
                       env_override=None):
    """Differentiable objective for one frame/view. Returns (total, LossReport, forward outputs)."""
    p = layout.scatter(flat)
    settings = cfg.render.settings()
    rgb, alpha, out = avatar.render_tensors(p, sample.pose, sample.frame, sample.camera, settings, env_override,
                                            cfg.render.compositor)
    bg = torch.as_tensor(cfg.render.background, dtype=flat.dtype)
    rgb = rgb + (1.0 - alpha).unsqueeze(-1) * bg
    target = torch.as_tensor(np.asarray(sample.target), dtype=flat.dtype)
    total, l1, dssim = image_loss(rgb, target, cfg.loss.lambda_dssim)
    edge = median_edge_length(avatar.mesh.rest_vertices, avatar.mesh.faces)
    regs = {"vertex": cfg.loss.vertex_reg * (p["mesh.vertex_offsets"] ** 2).sum(-1).mean() / edge**2}
    if sample.frame is not None and avatar.num_frames:
        dr = p["pose.rotations"][sample.frame]
        dt = p["pose.translations"][sample.frame]
        regs["pose"] = cfg.loss.pose_reg * ((dr**2).sum() + (dt**2).sum() / edge**2)
    else:
        regs["pose"] = torch.zeros((), dtype=flat.dtype)
    total = total + sum(regs.values())
    report = LossReport(float(total.detach()), float(l1.detach()), float(dssim.detach()), {k: float(v.detach()) for k, v in regs.items()})
    out["rgb"] = rgb
    return total, report, out


def backward(total: torch.Tensor, flat: torch.Tensor, layout: ParamLayout, extra=()):
    """Gradient of ``total`` w.r.t. ``flat`` (and optional extra tensors).

    Raises NumericError naming the first block with a non-finite entry.
    """
    grads = torch.autograd.grad(total, [flat, *extra], allow_unused=True)
    grads = [torch.zeros_like(t) if g is None else g for g, t in zip(grads, [flat, *extra])]
    g = grads[0]
    bad = ~torch.isfinite(g)
    if bad.any():
        idx = int(torch.nonzero(bad)[0])
        raise NumericError(f"non-finite gradient in block {layout.block_of(idx)!r}")
    return grads if extra else g


def loss_and_grad(avatar: Avatar, layout: ParamLayout, flat: torch.Tensor, sample: FrameSample, cfg: RunConfig):
    flat = flat.detach().clone().requires_grad_(True)
    total, report, out = training_objective(avatar, layout, flat, sample, cfg)
    g = backward(total, flat, layout)
    return report, g


def finite_difference(fn, params: torch.Tensor, index: int, h: float = 1e-6) -> float:
    """Central difference of scalar ``fn`` along coordinate ``index``."""
    if h <= 0:
        raise ValueError("step h must be positive")
    plus = params.detach().clone()
    minus = params.detach().clone()
    plus[index] += h
    minus[index] -= h
    return (float(fn(plus)) - float(fn(minus))) / (2.0 * h)


def random_gradcheck_scene(seed: int, num_gaussians: int = 4, size: int = 16):
    """Small randomized scene for gradient checks.

    A two-triangle, two-joint strip with ``num_gaussians`` splats, a tiny
    lighting network, nonzero vertex offsets and pose refinements, a gray
    background and a random target. Opacities stay below the alpha clamp and
    irradiance stays positive so the objective is smooth around the sample.
    Returns (avatar, sample, cfg).
    """
    rng = np.random.default_rng(seed)
    verts = np.array([[-0.03, -0.02, 0.0], [0.0, -0.02, 0.0], [0.0, 0.02, 0.0], [-0.03, 0.02, 0.0],
                      [0.03, -0.02, 0.0], [0.03, 0.02, 0.0]]) + rng.normal(scale=0.002, size=(6, 3))
    faces = np.array([[0, 1, 2], [0, 2, 3], [1, 4, 5], [1, 5, 2]])
    rest = np.zeros((2, 3, 4))
    rest[:, :, :3] = np.eye(3)
    w1 = np.array([0.0, 0.5, 0.5, 0.0, 1.0, 1.0])
    mesh = ArticulatedMesh(verts, faces, [-1, 0], rest, np.stack([1 - w1, w1], 1), rng.integers(0, 2, 4))
    F = num_gaussians
    gset = SurfaceGaussianSet(
        face_id=np.arange(F) % len(faces),
        bary_logits=rng.normal(scale=0.4, size=(F, 3)),
        log_scales=np.log(rng.uniform(0.006, 0.012, size=(F, 2))),
        rotation=rng.uniform(0, math.pi, F),
        offset_logit=rng.normal(scale=0.5, size=F),
        albedo_logits=rng.normal(scale=0.5, size=(F, 3)),
        opacity_logit=rng.uniform(-1.0, 0.4, F),
    )
    net = LightingNet.create(2, order=1, hidden=(4,), rng=rng)
    net.weights[-1] = rng.normal(scale=0.05, size=net.weights[-1].shape)
    avatar = Avatar(mesh, gset, net, 0.002, rng.normal(scale=5e-4, size=(6, 3)),
                    rng.normal(scale=0.02, size=(1, 2, 3)), rng.normal(scale=5e-4, size=(1, 3)))
    pose = PoseFrame(rng.normal(scale=0.15, size=(2, 3)), rng.normal(scale=0.002, size=3))

    f = 24.0 * size / 16
    cam = Camera(f, f, (size - 1) / 2, (size - 1) / 2, size, size, look_at([0.0, 0.0, 0.12], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0]))
    cfg = RunConfig()
    cfg.render.background = [0.2, 0.3, 0.4]
    target = rng.uniform(0.0, 1.0, size=(size, size, 3))
    return avatar, FrameSample(pose, 0, cam, target), cfg


@dataclass
class GradCheckEntry:
    block: str
    index: int
    analytic: float
    numeric: float
    ok: bool


def gradient_check(avatar: Avatar, sample: FrameSample, cfg: RunConfig, rtol: float = 1e-4, atol: float = 1e-7,
                   h: float = 1e-6, indices=None) -> list[GradCheckEntry]:
    """Compare autograd against central differences of the full objective.

    An entry passes when |analytic - numeric| <= rtol * max(|analytic|,
    |numeric|) or <= atol. ``indices`` defaults to every parameter.
    """
    layout, flat = avatar.pack()
    report, g = loss_and_grad(avatar, layout, flat, sample, cfg)

    def fn(x):
        with torch.no_grad():
            return training_objective(avatar, layout, x, sample, cfg)[0]

    out = []
    for i in range(layout.size) if indices is None else indices:
        a = float(g[i])
        n = finite_difference(fn, flat, i, h)
        err = abs(a - n)
        out.append(GradCheckEntry(layout.block_of(i), i, a, n, err <= rtol * max(abs(a), abs(n)) or err <= atol))
    return out


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: torch.Tensor
    v: torch.Tensor
    step: int = 0

    @classmethod
    def zeros(cls, n: int, dtype=torch.float64) -> "AdamState":
        return cls(torch.zeros(n, dtype=dtype), torch.zeros(n, dtype=dtype), 0)


def adam_step(params: torch.Tensor, grads: torch.Tensor, state: AdamState, lr, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-15):
    """One bias-corrected Adam update; ``lr`` is a scalar or per-entry tensor."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise DimensionError(f"params {tuple(params.shape)}, grads {tuple(grads.shape)}, moments {tuple(state.m.shape)}")
    step = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * grads
    v = beta2 * state.v + (1.0 - beta2) * grads * grads
    mhat = m / (1.0 - beta1**step)
    vhat = v / (1.0 - beta2**step)
    new = params - lr * mhat / (torch.sqrt(vhat) + eps)
    return new, AdamState(m, v, step)


def learning_rates(layout: ParamLayout, cfg: RunConfig, dtype=torch.float64) -> torch.Tensor:
    o = cfg.optim
    last_layer = max((int(k[len("light.w"):]) for k in layout if k.startswith("light.w")), default=-1)
    lr = torch.zeros(layout.size, dtype=dtype)
    for name in layout:
        if name.startswith("gauss."):
            rate = getattr(o, "lr_" + name.split(".", 1)[1])
        elif name == "mesh.vertex_offsets":
            rate = o.lr_vertex_offsets
        elif name in (f"light.w{last_layer}", f"light.b{last_layer}"):
            rate = o.lr_lighting_out
        elif name.startswith("light."):
            rate = o.lr_lighting
        elif name == "pose.rotations":
            rate = o.lr_pose_rotations
        elif name == "pose.translations":
            rate = o.lr_pose_translations
        else:
            raise KeyError(name)
        if any(name.startswith(prefix) for prefix in o.freeze):
            rate = 0.0
        lr[layout.slice(name)] = rate
    return lr


# ---------------------------------------------------------------- fitting


def initial_avatar(mesh: ArticulatedMesh, num_frames: int, cfg: RunConfig) -> Avatar:
    rng = np.random.default_rng(cfg.fit.seed)
    m, li = cfg.model, cfg.lighting
    gaussians = SurfaceGaussianSet.initialize(mesh, m.gaussians_per_face, rng, m.init_opacity, m.init_albedo,
                                              m.init_scale_factor)
    net = LightingNet.create(mesh.num_joints, li.sh_order, tuple(li.hidden), li.activation, li.include_translation,
                             rng, li.base_irradiance)
    return Avatar(mesh, gaussians, net, m.z_max, pose_refinements=np.zeros((num_frames, mesh.num_joints, 3)))


@dataclass
class FitResult:
    avatar: Avatar
    history: list  # one dict per logged step
    control_log: list
    optimizer: AdamState


LOSS_FIELDS = ["step", "total", "l1", "dssim", "reg_vertex", "reg_pose", "gaussians"]


def fit(dataset, cfg: RunConfig, out_dir=None, avatar: Avatar | None = None, env_override=None) -> FitResult:
    """Fit an avatar to a dataset.

    Each iteration draws one (frame, view) pair from a seeded shuffle of the
    training pairs, renders it, and takes one Adam step on every unfrozen
    block. Control cycles run every ``control.interval`` iterations inside
    [control.start, control.stop]. With ``out_dir`` the loss curve
    (``loss.csv``), control summaries (``control.csv``) and periodic
    checkpoints are written there. On a non-finite loss the last good state
    is saved as ``last_good.hgs`` and NumericError is raised.
    """
    from .checkpoint import save_checkpoint
    from .control import GradStats, control_cycle

    torch.set_num_threads(max(1, cfg.fit.threads))
    dtype = torch.float64 if cfg.fit.precision == "f64" else torch.float32
    rng = np.random.default_rng(cfg.fit.seed)
    if avatar is None:
        avatar = initial_avatar(dataset.mesh, dataset.num_frames, cfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)

    pairs = [(t, v) for t in dataset.train_frames for v in range(dataset.num_views)]
    if not pairs:
        raise DimensionError("dataset has no training frames")
    targets = {}
    edge = median_edge_length(dataset.mesh.rest_vertices, dataset.mesh.faces)

    layout, flat = avatar.pack()
    flat = flat.to(dtype)
    lr = learning_rates(layout, cfg, dtype)
    state = AdamState.zeros(layout.size, dtype)
    stats = GradStats.zeros(len(avatar.gaussians))
    history, control_log = [], []
    queue: list = []
    last_good = None

    def save(name):
        avatar.unpack(layout, flat)
        save_checkpoint(out / name, avatar, cfg, optimizer=state)

    for step in range(1, cfg.optim.iterations + 1):
        if not queue:
            queue = [pairs[i] for i in rng.permutation(len(pairs))]
        t, v = queue.pop()
        if (t, v) not in targets:
            targets[t, v] = dataset.frame(v, t)
        sample = FrameSample(dataset.poses[t], t, dataset.camera(v, t), targets[t, v])

        x = flat.detach().clone().requires_grad_(True)
        total, report, fwd = training_objective(avatar, layout, x, sample, cfg, env_override)
        if not math.isfinite(report.total):
            if out is not None and last_good is not None:
                avatar.unpack(layout, last_good)
                save_checkpoint(out / "last_good.hgs", avatar, cfg)
            raise NumericError(f"non-finite loss at step {step}")
        g, g_centers = backward(total, x, layout, extra=(fwd["centers"],))
        last_good = flat.detach().clone()
        flat, state = adam_step(flat.detach(), g, state, lr, cfg.optim.beta1, cfg.optim.beta2, cfg.optim.eps)
        stats.accumulate(g_centers.detach().to(torch.float64).numpy() * edge, fwd["visible"].numpy())

        if step % cfg.fit.log_interval == 0 or step == 1 or step == cfg.optim.iterations:
            history.append({"step": step, "total": report.total, "l1": report.l1, "dssim": report.dssim,
                            "reg_vertex": report.regularizers["vertex"], "reg_pose": report.regularizers["pose"],
                            "gaussians": len(avatar.gaussians)})

        c = cfg.control
        if c.interval and step % c.interval == 0 and c.start <= step <= c.stop:
            avatar.unpack(layout, flat)
            new_set, summary, origin, fresh = control_cycle(avatar.gaussians, stats, avatar.mesh, c, avatar.z_max,
                                                            rng, avatar.canonical_vertices())
            avatar.gaussians = new_set
            new_layout, new_flat = avatar.pack()
            state = _remap_moments(state, layout, new_layout, origin, fresh, dtype)
            layout, flat = new_layout, new_flat.to(dtype)
            lr = learning_rates(layout, cfg, dtype)
            stats = GradStats.zeros(len(new_set))
            summary["step"] = step
            control_log.append(summary)
            log.info("control at step %d: %s", step, summary)

        if out is not None and cfg.fit.checkpoint_interval and step % cfg.fit.checkpoint_interval == 0:
            save(Path("checkpoints") / f"step_{step:06d}.hgs")

    avatar.unpack(layout, flat)
    if out is not None:
        save_checkpoint(out / "final.hgs", avatar, cfg, optimizer=state)
        _write_csv(out / "loss.csv", LOSS_FIELDS, history)
        if control_log:
            _write_csv(out / "control.csv", list(control_log[0].keys()), control_log)
    return FitResult(avatar, history, control_log, state)


def _remap_moments(state: AdamState, old: ParamLayout, new: ParamLayout, origin, fresh, dtype) -> AdamState:
    m = torch.zeros(new.size, dtype=dtype)
    v = torch.zeros(new.size, dtype=dtype)
    keep = torch.as_tensor(~np.asarray(fresh, dtype=bool))
    src = torch.as_tensor(np.asarray(origin), dtype=torch.long)
    old_m, old_v = old.scatter(state.m), old.scatter(state.v)
    new_m, new_v = new.scatter(m), new.scatter(v)
    for name in new:
        if name.startswith("gauss."):
            if len(src):
                new_m[name][keep] = old_m[name][src[keep]]
                new_v[name][keep] = old_v[name][src[keep]]
        else:
            new_m[name][...] = old_m[name]
            new_v[name][...] = old_v[name]
    return AdamState(m, v, state.step)


def _write_csv(path, fieldnames, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames)
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
