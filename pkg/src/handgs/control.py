"""Adaptive density control for mesh-anchored Gaussians.

A cycle is densify -> prune -> reassign. Densification clones small
Gaussians and splits large ones when their averaged positional gradient is
high; pruning drops transparent or oversized ones; reassignment moves each
Gaussian to the canonical triangle closest to its anchor point and rewrites
its barycentric logits and normal offset so the anchor stays put.

All ops return ``(new_set, origin)`` style index maps so an optimizer can
carry its moments across the population change.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .config import ControlConfig
from .mesh import ArticulatedMesh, closest_triangles, face_frames, median_edge_length
from .surfgauss import SurfaceGaussianSet, logit, sym_eig2

log = logging.getLogger(__name__)

BARY_MIN, BARY_MAX = 1e-4, 1.0 - 2e-4
OFFSET_MIN_FRAC, OFFSET_MAX_FRAC = 1e-6, 0.999
REASSIGN_PASSES = 4


@dataclass
class GradStats:
    """Accumulated positional-gradient norms since the last cycle."""

    accum: np.ndarray
    count: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "GradStats":
        return cls(np.zeros(n), np.zeros(n, dtype=np.int64))

    def accumulate(self, center_grads: np.ndarray, visible: np.ndarray) -> None:
        vis = np.asarray(visible, dtype=bool)
        self.accum[vis] += np.linalg.norm(center_grads[vis], axis=-1)
        self.count[vis] += 1

    def mean(self) -> np.ndarray:
        return np.divide(self.accum, self.count, out=np.zeros_like(self.accum), where=self.count > 0)


def densify(gset: SurfaceGaussianSet, stats: GradStats, cfg: ControlConfig, edge: float,
            rng: np.random.Generator):
    """Clone or split high-gradient Gaussians.

    Returns (new_set, origin, fresh, n_clone, n_split). ``origin[i]`` is the
    source index of new Gaussian i; ``fresh[i]`` marks clones and split
    children. Candidates are served largest-gradient first until
    ``max_gaussians`` is reached.
    """
    n = len(gset)
    if len(stats.accum) != n:
        raise ValueError("gradient statistics are not aligned with the Gaussian set")
    mean = stats.mean()
    cand = np.flatnonzero((mean > cfg.grad_threshold) & (stats.count > 0))
    cand = cand[np.argsort(-mean[cand], kind="stable")]
    budget = max(0, cfg.max_gaussians - n)
    cand = cand[:budget]
    smax = gset.scales().max(axis=1)
    split = cand[smax[cand] > cfg.split_scale_factor * edge]
    clone = cand[smax[cand] <= cfg.split_scale_factor * edge]

    keep = np.setdiff1d(np.arange(n), split)
    parts, origin, fresh = [gset.take(keep)], [keep], [np.zeros(len(keep), dtype=bool)]
    if len(clone):
        parts.append(gset.take(clone))
        origin.append(clone)
        fresh.append(np.ones(len(clone), dtype=bool))
    if len(split):
        for _ in range(2):
            child = gset.take(split)
            child.log_scales = child.log_scales - math.log(cfg.split_factor)
            child.bary_logits = child.bary_logits + rng.normal(scale=cfg.split_jitter, size=child.bary_logits.shape)
            parts.append(child)
            origin.append(split)
            fresh.append(np.ones(len(split), dtype=bool))
    return (SurfaceGaussianSet.concat(parts), np.concatenate(origin), np.concatenate(fresh),
            len(clone), len(split))


def prune(gset: SurfaceGaussianSet, cfg: ControlConfig, edge: float):
    """Drop low-opacity or oversized Gaussians, never going below the floor.

    Returns (new_set, kept indices, n_pruned).
    """
    n = len(gset)
    opacity = gset.opacity()
    bad = (opacity < cfg.prune_opacity) | (gset.scales().max(axis=1) > cfg.scale_cap_factor * edge)
    cand = np.flatnonzero(bad)
    allowed = max(0, n - cfg.min_gaussians)
    if len(cand) > allowed:
        log.warning("pruning limited to %d of %d candidates by the %d-Gaussian floor", allowed, len(cand), cfg.min_gaussians)
        cand = cand[np.argsort(opacity[cand], kind="stable")][:allowed]
    keep = np.setdiff1d(np.arange(n), cand)
    return gset.take(keep), keep, len(cand)


def canonical_anchors(gset: SurfaceGaussianSet, vertices: np.ndarray, faces: np.ndarray, z_max: float) -> np.ndarray:
    import torch

    _, _, n, _ = face_frames(torch.as_tensor(vertices, dtype=torch.float64), faces)
    tri = vertices[faces[gset.face_id]]
    return np.einsum("ni,nij->nj", gset.weights(), tri) + gset.offsets(z_max)[:, None] * n.numpy()[gset.face_id]


def _ellipse_from_cov(cov: np.ndarray, ref_axis: np.ndarray):
    """(s, phi) of a 2x2 covariance with s[0] along the eigen-axis nearest ref_axis."""
    lam1, lam2, theta = sym_eig2(cov)
    lam2 = max(lam2, 1e-30)
    s = np.array([math.sqrt(lam1), math.sqrt(lam2)])
    d1 = abs(ref_axis[0] * math.cos(theta) + ref_axis[1] * math.sin(theta))
    d2 = abs(-ref_axis[0] * math.sin(theta) + ref_axis[1] * math.cos(theta))
    if d2 > d1:
        return s[::-1].copy(), (theta + 0.5 * math.pi) % math.pi
    return s, theta % math.pi


def reassign(gset: SurfaceGaussianSet, vertices, faces, z_max: float, max_passes: int = REASSIGN_PASSES):
    """Re-anchor every Gaussian on the canonical triangle nearest its anchor.

    Offsets are one-sided, so an anchor is re-expressed at its unsigned
    distance above the new face. When the face changes, the in-plane
    ellipse is projected into the new face frame to keep its world shape.
    Re-expression clamps weights and offsets, which can nudge an anchor
    next to a neighbour's region, so passes repeat until no face changes.
    Returns (new_set, n_reassigned, n_clamped).
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces)
    out, n_clamped = gset.copy(), 0
    for _ in range(max_passes):
        out, n_moved, n_clamped = _reassign_pass(out, vertices, faces, z_max)
        if not n_moved:
            break
    return out, int(np.count_nonzero(out.face_id != gset.face_id)), n_clamped


def _reassign_pass(gset: SurfaceGaussianSet, vertices, faces, z_max: float):
    import torch

    out = gset.copy()
    if not len(gset):
        return out, 0, 0
    anchors = canonical_anchors(gset, vertices, faces, z_max)
    fid, bary, dist = closest_triangles(vertices, faces, anchors)

    w = np.clip(bary, BARY_MIN, BARY_MAX)
    w /= w.sum(-1, keepdims=True)
    out.bary_logits = np.log(w)
    far = dist >= OFFSET_MAX_FRAC * z_max
    n_clamped = int(far.sum())
    if n_clamped:
        log.warning("%d anchors farther than z_max from the mesh; offsets clamped", n_clamped)
    d = np.clip(dist, OFFSET_MIN_FRAC * z_max, OFFSET_MAX_FRAC * z_max)
    out.offset_logit = logit(d / z_max)

    moved = np.flatnonzero(fid != gset.face_id)
    if len(moved):
        u, v, _, _ = face_frames(torch.as_tensor(vertices), faces)
        F = np.stack([u.numpy(), v.numpy()], -1)  # (F, 3, 2)
        s = gset.scales()
        for i in moved:
            c, si = math.cos(gset.rotation[i]), math.sin(gset.rotation[i])
            R = np.array([[c, -si], [si, c]])
            P = F[fid[i]].T @ F[gset.face_id[i]]  # old face frame -> new face frame
            L = P @ R @ np.diag(s[i])
            new_s, new_phi = _ellipse_from_cov(L @ L.T, P @ R[:, 0])
            out.log_scales[i] = np.log(np.maximum(new_s, 1e-12))
            out.rotation[i] = new_phi
    out.face_id = fid
    return out, len(moved), n_clamped


def control_cycle(gset: SurfaceGaussianSet, stats: GradStats, mesh: ArticulatedMesh, cfg: ControlConfig,
                  z_max: float, rng: np.random.Generator, canonical_vertices=None):
    """densify -> prune -> reassign. Returns (new_set, summary, origin, fresh).

    The caller resets the gradient statistics afterwards.
    """
    verts = mesh.rest_vertices if canonical_vertices is None else np.asarray(canonical_vertices)
    edge = median_edge_length(verts, mesh.faces)
    dense, origin, fresh, n_clone, n_split = densify(gset, stats, cfg, edge, rng)
    pruned, kept, n_pruned = prune(dense, cfg, edge)
    final, n_moved, n_clamped = reassign(pruned, verts, mesh.faces, z_max)
    summary = {"clones": n_clone, "splits": n_split, "prunes": n_pruned, "reassigned": n_moved,
               "clamp_warnings": n_clamped, "gaussians": len(final)}
    return final, summary, origin[kept], fresh[kept]
