"""Synthetic capture datasets with known ground truth.

Each kind writes a complete dataset (see ``dataset``) plus ``gt.hgs``, the
ground-truth avatar the frames were rendered from with the reference
rasterizer. The same kind and seed always produce the same bytes.
"""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .config import RunConfig
from .dataset import Dataset, frame_name
from .images import write_mask, write_png
from .lighting import LightingNet, num_coeffs
from .mesh import ArticulatedMesh, PoseFrame, face_sides_from_axis, save_obj, save_rig, triangle_areas
from .model import Avatar
from .render import Camera, RenderSettings, look_at
from .surfgauss import SurfaceGaussianSet, logit

KINDS = ("quad", "icosphere", "two-bone-cylinder")


def icosphere(subdivisions: int, radius: float = 1.0):
    """Icosahedron subdivided ``subdivisions`` times and pushed onto a sphere."""
    p = (1 + 5**0.5) / 2
    v = [(-1, p, 0), (1, p, 0), (-1, -p, 0), (1, -p, 0), (0, -1, p), (0, 1, p),
         (0, -1, -p), (0, 1, -p), (p, 0, -1), (p, 0, 1), (-p, 0, -1), (-p, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4), (11, 10, 2),
         (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9), (4, 9, 5),
         (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(x, dtype=np.float64) / np.linalg.norm(x) for x in v]
    faces = f
    for _ in range(subdivisions):
        cache, new = {}, []

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return np.array(verts) * radius, np.array(faces, dtype=np.int64)


def _rest(origin) -> np.ndarray:
    T = np.zeros((3, 4))
    T[:, :3] = np.eye(3)
    T[:, 3] = origin
    return T


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3 - 2 * x)


def _two_joint_weights(coord, lo, hi):
    w = _smoothstep((coord - lo) / (hi - lo))
    return np.stack([1 - w, w], axis=1)


def _cameras(n: int, dist: float, size: int, focal: float, elevation: float, target=(0.0, 0.0, 0.0),
             up=(0.0, 0.0, 1.0), azimuth0: float = 0.0, spread: float = 2 * math.pi) -> list[dict]:
    views = []
    for i in range(n):
        az = azimuth0 + spread * i / n
        eye = np.asarray(target) + dist * np.array([math.cos(elevation) * math.cos(az),
                                                    math.cos(elevation) * math.sin(az), math.sin(elevation)])
        cam = Camera(focal, focal, (size - 1) / 2, (size - 1) / 2, size, size, look_at(eye, target, up))
        views.append({"name": f"cam{i}", **cam.to_json()})
    return views


def _gt_environment(order: int, rng: np.random.Generator, strength: float) -> np.ndarray:
    """(3, K) coefficients with irradiance about 1 and a directional term."""
    K = num_coeffs(order)
    c = np.zeros((3, K))
    c[:, 0] = (1.0 + rng.uniform(-0.1, 0.1, 3)) / 0.28209479177387814
    if order >= 1:
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        # basis order (y, z, x) for band 1
        c[:, 1:4] = strength / 0.4886025119029199 * np.array([d[1], d[2], d[0]]) * rng.uniform(0.8, 1.0, (3, 1))
    if order >= 2:
        c[:, 4:9] = rng.uniform(-0.08, 0.08, (3, 5))
    return c


def _gt_avatar(mesh: ArticulatedMesh, rng: np.random.Generator, per_face: int, albedo: np.ndarray,
               order: int, z_max: float) -> Avatar:
    F = mesh.num_faces
    face_id = np.repeat(np.arange(F), per_face)
    n = len(face_id)
    area = triangle_areas(mesh.rest_vertices, mesh.faces)[face_id]
    base = np.log(np.sqrt(area) * (0.85 if per_face == 1 else 0.55))
    gset = SurfaceGaussianSet(
        face_id=face_id,
        bary_logits=rng.normal(scale=0.3, size=(n, 3)),
        log_scales=base[:, None] + rng.normal(scale=0.1, size=(n, 2)),
        rotation=rng.uniform(0, math.pi, n),
        offset_logit=rng.normal(scale=0.5, size=n),
        albedo_logits=logit(np.clip(albedo[face_id], 0.02, 0.98)),
        opacity_logit=logit(0.9) + rng.normal(scale=0.3, size=n),
    )
    net = LightingNet.create(mesh.num_joints, order, hidden=(8,), rng=rng)
    palm = _gt_environment(order, rng, 0.35)
    back = _gt_environment(order, rng, 0.25)
    net.biases[-1] = np.concatenate([palm.reshape(-1), back.reshape(-1)])
    return Avatar(mesh, gset, net, z_max)


def _quad(rng):
    h = 0.04
    verts = np.array([[-h, -h, 0], [h, -h, 0], [h, h, 0], [-h, h, 0]], dtype=np.float64)
    faces = np.array([[0, 1, 2], [0, 2, 3]])
    mesh = ArticulatedMesh(verts, faces, [-1], [_rest((0, 0, 0))], np.ones((4, 1)),
                           face_sides_from_axis(verts, faces, (0, 0, 1)))
    poses = [PoseFrame([[0.25 * math.sin(1.3 * t), 0.2 * math.cos(0.9 * t), 0.3 * t / 4]],
                       [0.005 * math.sin(t), 0.004 * math.cos(2 * t), 0.0]) for t in range(5)]
    albedo = np.array([[0.8, 0.5, 0.35], [0.3, 0.45, 0.8]])
    views = _cameras(3, 0.25, 48, 90.0, math.radians(70), spread=math.radians(120), azimuth0=-math.radians(60),
                     up=(0, 1, 0))
    return mesh, poses, albedo, views, 8, [], 1


def _icosphere(rng):
    r = 0.05
    verts, faces = icosphere(2, r)
    W = _two_joint_weights(verts[:, 2] / r, -0.2, 0.4)
    mesh = ArticulatedMesh(verts, faces, [-1, 0], [_rest((0, 0, 0)), _rest((0, 0, 0.0))], W,
                           face_sides_from_axis(verts, faces, (0, -1, 0)))
    poses = []
    for t in range(20):
        root = [0.15 * math.sin(0.7 * t), 0.1 * math.cos(0.5 * t), 0.35 * math.sin(0.31 * t)]
        child = [0.35 * math.sin(0.9 * t + 0.3), 0.2 * math.sin(0.6 * t), 0.0]
        poses.append(PoseFrame([root, child], [0.004 * math.sin(0.4 * t), 0.003 * math.cos(0.8 * t), 0.0]))
    c = verts[faces].mean(axis=1)
    lon = np.arctan2(c[:, 1], c[:, 0])
    lat = np.arcsin(np.clip(c[:, 2] / np.linalg.norm(c, axis=1), -1, 1))
    check = (np.floor(lon / (math.pi / 4)) + np.floor(lat / (math.pi / 6))).astype(int) % 2
    albedo = np.where(check[:, None] == 0, [0.85, 0.55, 0.4], [0.3, 0.4, 0.8])
    views = _cameras(3, 0.3, 64, 110.0, math.radians(20), azimuth0=-math.pi / 2)
    return mesh, poses, albedo, views, 1, [3, 8, 13, 18], 2


def _cylinder(rng):
    rings, segs, radius, length = 11, 12, 0.015, 0.1
    x = np.linspace(0, length, rings)
    a = 2 * math.pi * np.arange(segs) / segs
    verts = np.array([[xi, radius * math.cos(ai), radius * math.sin(ai)] for xi in x for ai in a])
    faces = []
    for i in range(rings - 1):
        for j in range(segs):
            p, q = i * segs + j, i * segs + (j + 1) % segs
            faces += [(p, q, p + segs), (q, q + segs, p + segs)]
    faces = np.array(faces)
    W = _two_joint_weights(x.repeat(segs) / length, 0.4, 0.6)
    mesh = ArticulatedMesh(verts, faces, [-1, 0], [_rest((0, 0, 0)), _rest((length / 2, 0, 0))], W,
                           face_sides_from_axis(verts, faces, (0, 0, 1)))
    poses = [PoseFrame([[0.0, 0.0, 0.2 * math.sin(0.5 * t)], [0.0, 0.1 * math.sin(t), 0.6 * t / 9]],
                       [0.0, 0.0, 0.0]) for t in range(10)]
    stripes = (np.floor(verts[faces].mean(axis=1)[:, 0] / 0.02)).astype(int) % 2
    albedo = np.where(stripes[:, None] == 0, [0.8, 0.6, 0.45], [0.45, 0.3, 0.25])
    views = _cameras(3, 0.25, 64, 120.0, math.radians(35), target=(length / 2, 0, 0), azimuth0=-math.pi / 2,
                     spread=math.pi)
    return mesh, poses, albedo, views, 1, [4], 2


_BUILDERS = {"quad": _quad, "icosphere": _icosphere, "two-bone-cylinder": _cylinder}


def make_synthetic(kind: str, out, seed: int = 0, z_max: float = 0.002) -> Dataset:
    if kind not in _BUILDERS:
        raise ValueError(f"unknown synthetic kind {kind!r}; choose from {', '.join(KINDS)}")
    rng = np.random.default_rng(seed)
    mesh, poses, albedo, views, per_face, holdout, order = _BUILDERS[kind](rng)
    mesh.validate()
    avatar = _gt_avatar(mesh, rng, per_face, albedo, order, z_max)

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    save_obj(out / "mesh.obj", mesh.rest_vertices, mesh.faces)
    save_rig(out / "rig.json", mesh)
    (out / "poses.json").write_text(json.dumps({"poses": [p.to_json() for p in poses], "holdout": holdout}, indent=1) + "\n")
    (out / "cameras.json").write_text(json.dumps({"views": views}, indent=1) + "\n")

    settings = RenderSettings()
    cams = [Camera.from_json(v) for v in views]
    peak = max(float(avatar.render(p, None, c, settings).rgb.max()) for p in poses for c in cams)
    if peak > 0.95:
        # keep every frame below the PNG ceiling; color is linear in the environment
        avatar.lighting.biases[-1] = avatar.lighting.biases[-1] * (0.95 / peak)
    size = views[0]["width"]
    for t, pose in enumerate(poses):
        for v, cam in zip(views, cams):
            img = avatar.render(pose, None, cam, settings, method="reference")
            write_png(out / "frames" / v["name"] / frame_name(t), img.rgb)
        obj = np.zeros((size, size), dtype=bool)
        lo = size // 8 + (t % 4)
        obj[size - size // 3 - lo:size - lo, lo:lo + size // 3] = True
        write_mask(out / "masks" / f"{t:05d}_object.png", obj)

    cfg = RunConfig()
    cfg.model.z_max = z_max
    cfg.lighting.sh_order = order
    cfg.lighting.hidden = [8]
    cfg.fit.seed = seed
    save_checkpoint(out / "gt.hgs", avatar, cfg, seed=seed)
    return Dataset.load(out)


def bench_avatar(subdivisions: int = 5, seed: int = 0) -> Avatar:
    """Single-joint icosphere with one Gaussian per face (20480 at level 5)."""
    rng = np.random.default_rng(seed)
    verts, faces = icosphere(subdivisions, 0.05)
    mesh = ArticulatedMesh(verts, faces, [-1], [_rest((0, 0, 0))], np.ones((len(verts), 1)),
                           face_sides_from_axis(verts, faces, (0, -1, 0)))
    albedo = rng.uniform(0.2, 0.9, size=(len(faces), 3))
    return _gt_avatar(mesh, rng, 1, albedo, 2, 0.002)
