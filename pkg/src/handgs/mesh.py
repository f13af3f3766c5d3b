"""Articulated triangle mesh: forward kinematics, linear blend skinning,
per-face Gram-Schmidt frames and exact nearest-triangle queries.

Posing runs in torch so that gradients reach canonical vertex offsets and
per-frame pose refinements; the nearest-triangle query is plain numpy
(it is only used by density control, which is not differentiated).

Transforms are 4x4 homogeneous matrices. Axis-angle vectors follow the
right-hand rule, angle = norm.
"""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import DatasetError, DegenerateTriangleError, DimensionError

PALM, BACK = 0, 1
SIDE_NAMES = ("palm", "back")

EPS_AREA = 1e-12
EPS_EDGE = 1e-12
TIE_TOL = 1e-12


@dataclass
class ArticulatedMesh:
    """Canonical mesh plus kinematic tree and skinning weights.

    ``skin_weights`` is stored dense (V x J); the rig file carries it as a
    sparse triplet list. ``joint_parents[root] == -1``.
    """

    rest_vertices: np.ndarray
    faces: np.ndarray
    joint_parents: np.ndarray
    joint_rest_transforms: np.ndarray  # (J, 3, 4)
    skin_weights: np.ndarray
    face_side_labels: np.ndarray
    joint_order: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.rest_vertices = np.ascontiguousarray(self.rest_vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64)
        self.joint_parents = np.asarray(self.joint_parents, dtype=np.int64)
        self.joint_rest_transforms = np.asarray(self.joint_rest_transforms, dtype=np.float64).reshape(-1, 3, 4)
        self.skin_weights = np.asarray(self.skin_weights, dtype=np.float64)
        self.face_side_labels = np.asarray(self.face_side_labels, dtype=np.int64)
        self.joint_order = self.validate()

    @property
    def num_vertices(self) -> int:
        return self.rest_vertices.shape[0]

    @property
    def num_faces(self) -> int:
        return self.faces.shape[0]

    @property
    def num_joints(self) -> int:
        return self.joint_parents.shape[0]

    def validate(self) -> np.ndarray:
        """Check the invariants; return joints in parent-before-child order."""
        V, F, J = self.num_vertices, self.num_faces, self.num_joints
        if self.rest_vertices.ndim != 2 or self.rest_vertices.shape[1] != 3:
            raise DatasetError("BAD_VERTICES", "rest_vertices must be V x 3")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise DatasetError("BAD_FACES", "faces must be F x 3")
        if F and (self.faces.min() < 0 or self.faces.max() >= V):
            raise DatasetError("BAD_FACE_INDEX", "face index out of range")
        f = self.faces
        if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise DatasetError("BAD_FACE_INDEX", "face with repeated vertex")
        if self.joint_rest_transforms.shape[0] != J:
            raise DatasetError("BAD_RIG", "one rest transform per joint required")
        if self.skin_weights.shape != (V, J):
            raise DatasetError("BAD_SKIN_WEIGHTS", f"skin weights must be {V} x {J}")
        if np.any(self.skin_weights < 0) or np.any(np.abs(self.skin_weights.sum(1) - 1.0) > 1e-6):
            raise DatasetError("BAD_SKIN_WEIGHTS", "skin weights must be non-negative rows summing to 1")
        if self.face_side_labels.shape != (F,) or np.any((self.face_side_labels != PALM) & (self.face_side_labels != BACK)):
            raise DatasetError("BAD_SIDE_LABELS", "one palm/back label per face required")
        area = triangle_areas(self.rest_vertices, self.faces)
        if np.any(area <= EPS_AREA):
            raise DatasetError("DEGENERATE_FACE", f"face {int(np.argmin(area))} has area <= {EPS_AREA}")
        return _topological_order(self.joint_parents)


def _topological_order(parents: np.ndarray) -> np.ndarray:
    J = len(parents)
    roots = [j for j in range(J) if parents[j] == -1]
    if len(roots) != 1:
        raise DatasetError("BAD_RIG", f"joint tree needs exactly one root, found {len(roots)}")
    children = [[] for _ in range(J)]
    for j, p in enumerate(parents):
        if p != -1:
            if not 0 <= p < J:
                raise DatasetError("BAD_RIG", f"joint {j} has invalid parent {p}")
            children[p].append(j)
    order, queue = [], deque(roots)
    while queue:
        j = queue.popleft()
        order.append(j)
        queue.extend(children[j])
    if len(order) != J:
        raise DatasetError("BAD_RIG", "joint parent graph is not a connected tree")
    return np.asarray(order, dtype=np.int64)


def triangle_areas(vertices, faces) -> np.ndarray:
    v = np.asarray(vertices, dtype=np.float64)
    e1 = v[faces[:, 1]] - v[faces[:, 0]]
    e2 = v[faces[:, 2]] - v[faces[:, 0]]
    return 0.5 * np.linalg.norm(np.cross(e1, e2), axis=-1)


def median_edge_length(vertices, faces) -> float:
    v = np.asarray(vertices, dtype=np.float64)
    edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    edges = np.unique(np.sort(edges, axis=1), axis=0)
    return float(np.median(np.linalg.norm(v[edges[:, 0]] - v[edges[:, 1]], axis=1)))


def face_sides_from_axis(vertices, faces, palm_axis) -> np.ndarray:
    """Palm where the rest normal points along ``palm_axis``, back otherwise."""
    v = np.asarray(vertices, dtype=np.float64)
    n = np.cross(v[faces[:, 1]] - v[faces[:, 0]], v[faces[:, 2]] - v[faces[:, 0]])
    return np.where(n @ np.asarray(palm_axis, dtype=np.float64) > 0, PALM, BACK).astype(np.int64)


# ---------------------------------------------------------------- poses


def normalize_axis_angle(r: np.ndarray) -> np.ndarray:
    """Wrap rotation angles into [0, 2pi) keeping the axis."""
    r = np.asarray(r, dtype=np.float64)
    theta = np.linalg.norm(r, axis=-1, keepdims=True)
    wrapped = np.mod(theta, 2 * math.pi)
    scale = np.divide(wrapped, theta, out=np.ones_like(theta), where=theta > 0)
    return r * scale


@dataclass
class PoseFrame:
    joint_rotations: np.ndarray  # (J, 3) axis-angle, radians
    root_translation: np.ndarray  # (3,) meters

    def __post_init__(self):
        rot = np.asarray(self.joint_rotations, dtype=np.float64)
        trans = np.asarray(self.root_translation, dtype=np.float64)
        if rot.ndim != 2 or rot.shape[1] != 3 or trans.shape != (3,):
            raise DimensionError(f"pose must be J x 3 rotations + 3 translation, got {rot.shape}, {trans.shape}")
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(trans))):
            raise DatasetError("NONFINITE_POSE", "pose has non-finite entries")
        self.joint_rotations = normalize_axis_angle(rot)
        self.root_translation = trans

    @classmethod
    def rest(cls, num_joints: int) -> "PoseFrame":
        return cls(np.zeros((num_joints, 3)), np.zeros(3))

    def to_json(self) -> dict:
        return {"joint_rotations": self.joint_rotations.tolist(), "root_translation": self.root_translation.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "PoseFrame":
        return cls(np.asarray(d["joint_rotations"]), np.asarray(d["root_translation"]))


def axis_angle_to_matrix(r: torch.Tensor) -> torch.Tensor:
    """Rodrigues formula, (..., 3) -> (..., 3, 3), smooth through zero."""
    theta2 = (r * r).sum(-1, keepdim=True)
    small = theta2 < 1e-8
    safe2 = torch.where(small, torch.ones_like(theta2), theta2)
    safe = torch.sqrt(safe2)
    a = torch.where(small, 1 - theta2 / 6 + theta2 * theta2 / 120, torch.sin(safe) / safe)
    b = torch.where(small, 0.5 - theta2 / 24 + theta2 * theta2 / 720, (1 - torch.cos(safe)) / safe2)
    x, y, z = r[..., 0], r[..., 1], r[..., 2]
    zero = torch.zeros_like(x)
    K = torch.stack([zero, -z, y, z, zero, -x, -y, x, zero], -1).reshape(r.shape[:-1] + (3, 3))
    eye = torch.eye(3, dtype=r.dtype, device=r.device).expand(K.shape)
    return eye + a[..., None] * K + b[..., None] * (K @ K)


def _homogeneous(t34: torch.Tensor) -> torch.Tensor:
    bottom = torch.zeros(t34.shape[:-2] + (1, 4), dtype=t34.dtype)
    bottom[..., 0, 3] = 1.0
    return torch.cat([t34, bottom], dim=-2)


def rigid_inverse(T: torch.Tensor) -> torch.Tensor:
    R = T[..., :3, :3].transpose(-1, -2)
    t = -(R @ T[..., :3, 3:4])
    return _homogeneous(torch.cat([R, t], dim=-1))


def posed_joint_transforms(mesh: ArticulatedMesh, rotations, translation) -> torch.Tensor:
    """World transforms (J, 4, 4) for a pose given as tensors."""
    rotations = torch.as_tensor(rotations, dtype=torch.float64)
    translation = torch.as_tensor(translation, dtype=rotations.dtype)
    J = mesh.num_joints
    if rotations.shape != (J, 3):
        raise DimensionError(f"pose has {tuple(rotations.shape)} rotations, mesh has {J} joints")
    rest = _homogeneous(torch.as_tensor(mesh.joint_rest_transforms, dtype=rotations.dtype))
    rest_inv = rigid_inverse(rest)
    R = _homogeneous(torch.cat([axis_angle_to_matrix(rotations), torch.zeros(J, 3, 1, dtype=rotations.dtype)], -1))
    world = [None] * J
    for j in mesh.joint_order.tolist():
        p = int(mesh.joint_parents[j])
        if p < 0:
            root = torch.eye(4, dtype=rotations.dtype)
            root = torch.cat([root[:3, :3], translation.reshape(3, 1)], 1)
            world[j] = _homogeneous(root) @ rest[j] @ R[j]
        else:
            world[j] = world[p] @ (rest_inv[p] @ rest[j]) @ R[j]
    return torch.stack(world)


def forward_kinematics(mesh: ArticulatedMesh, pose: PoseFrame) -> torch.Tensor:
    """World rigid transforms of every joint; equals the rest transforms at the zero pose."""
    return posed_joint_transforms(mesh, pose.joint_rotations, pose.root_translation)


def skinning_transforms(mesh: ArticulatedMesh, world: torch.Tensor) -> torch.Tensor:
    """Map rest-space points to posed space per joint: world_j @ rest_j^-1."""
    rest = _homogeneous(torch.as_tensor(mesh.joint_rest_transforms, dtype=world.dtype))
    return world @ rigid_inverse(rest)


@dataclass
class DeformedMesh:
    vertices: torch.Tensor  # (V, 3)
    faces: np.ndarray
    face_normals: torch.Tensor  # (F, 3)
    face_u: torch.Tensor  # (F, 3)
    face_v: torch.Tensor  # (F, 3)
    face_area: torch.Tensor  # (F,)

    @property
    def degenerate(self) -> np.ndarray:
        return (self.face_area.detach().numpy() <= EPS_AREA)

    @classmethod
    def from_vertices(cls, vertices, faces) -> "DeformedMesh":
        vertices = torch.as_tensor(vertices, dtype=torch.float64) if not torch.is_tensor(vertices) else vertices
        u, v, n, area = face_frames(vertices, faces)
        return cls(vertices, np.asarray(faces), n, u, v, area)


def face_frames(vertices: torch.Tensor, faces):
    """Batched Gram-Schmidt frames. Returns (u, v, n, area) per face.

    Degenerate faces get finite garbage frames; check ``area`` before use.
    """
    f = torch.as_tensor(np.asarray(faces), dtype=torch.long)
    v1, v2, v3 = vertices[f[:, 0]], vertices[f[:, 1]], vertices[f[:, 2]]
    e1, e2 = v2 - v1, v3 - v1
    l1 = torch.linalg.norm(e1, dim=-1, keepdim=True)
    u = e1 / l1.clamp_min(EPS_EDGE)
    w = e2 - (e2 * u).sum(-1, keepdim=True) * u
    lw = torch.linalg.norm(w, dim=-1, keepdim=True)
    v = w / lw.clamp_min(EPS_EDGE)
    n = torch.linalg.cross(u, v, dim=-1)
    area = 0.5 * (l1 * lw).squeeze(-1)
    return u, v, n, area


def skin_lbs(mesh: ArticulatedMesh, transforms: torch.Tensor, vertices=None) -> DeformedMesh:
    """Linear blend skinning of ``vertices`` (default: rest vertices).

    ``transforms`` are per-joint skinning transforms (rest space -> posed).
    """
    if vertices is None:
        vertices = torch.as_tensor(mesh.rest_vertices, dtype=transforms.dtype)
    W = torch.as_tensor(mesh.skin_weights, dtype=transforms.dtype)
    blended = torch.einsum("vj,jab->vab", W, transforms[:, :3, :])
    posed = (blended[:, :, :3] @ vertices.unsqueeze(-1)).squeeze(-1) + blended[:, :, 3]
    return DeformedMesh.from_vertices(posed, mesh.faces)


def pose_mesh(mesh: ArticulatedMesh, rotations, translation, vertices=None) -> DeformedMesh:
    world = posed_joint_transforms(mesh, rotations, translation)
    return skin_lbs(mesh, skinning_transforms(mesh, world), vertices)


def gram_schmidt_frame(e1, e2, eps: float = EPS_EDGE):
    """Orthonormal in-plane basis (u, v) from two triangle edges."""
    e1 = np.asarray(e1, dtype=np.float64)
    e2 = np.asarray(e2, dtype=np.float64)
    n1 = np.linalg.norm(e1)
    if n1 <= eps or np.linalg.norm(np.cross(e1, e2)) <= eps:
        raise DegenerateTriangleError("edges are degenerate or collinear")
    u = e1 / n1
    w = e2 - np.dot(e2, u) * u
    return u, w / np.linalg.norm(w)


# ---------------------------------------------------------------- nearest triangle


def _closest_points(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Barycentric coords of the closest point on triangles (a, b, c) to p.

    Region classification after Ericson, Real-Time Collision Detection 5.1.5.
    Shapes broadcast; returns (..., 3).
    """
    ab, ac, ap = b - a, c - a, p - a
    d1 = (ab * ap).sum(-1)
    d2 = (ac * ap).sum(-1)
    bp = p - b
    d3 = (ab * bp).sum(-1)
    d4 = (ac * bp).sum(-1)
    cp = p - c
    d5 = (ab * cp).sum(-1)
    d6 = (ac * cp).sum(-1)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = 1.0 / (va + vb + vc)
        iv, iw = vb * denom, vc * denom

    shape = np.broadcast_shapes(d1.shape, d6.shape)
    out = np.empty(shape + (3,))
    out[...] = np.stack([1 - iv - iw, iv, iw], -1)
    # lowest-precedence region first, each later assignment overrides
    regions = [
        ((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0), lambda: np.stack([np.zeros(shape), 1 - t_bc, t_bc], -1)),
        ((vb <= 0) & (d2 >= 0) & (d6 <= 0), lambda: np.stack([1 - t_ac, np.zeros(shape), t_ac], -1)),
        ((d6 >= 0) & (d5 <= d6), lambda: np.broadcast_to([0.0, 0.0, 1.0], shape + (3,))),
        ((vc <= 0) & (d1 >= 0) & (d3 <= 0), lambda: np.stack([1 - t_ab, t_ab, np.zeros(shape)], -1)),
        ((d3 >= 0) & (d4 <= d3), lambda: np.broadcast_to([0.0, 1.0, 0.0], shape + (3,))),
        ((d1 <= 0) & (d2 <= 0), lambda: np.broadcast_to([1.0, 0.0, 0.0], shape + (3,))),
    ]
    for mask, value in regions:
        if mask.any():
            out[mask] = value()[mask]
    return out


def closest_triangles(vertices, faces, points, chunk: int = 2_000_000):
    """Exact nearest triangle for each point.

    Returns (face_ids, barycentric (N, 3), distances). Faces within
    TIE_TOL * max(d, 1) of the minimum distance d count as tied and the
    lowest face index wins; faces with area <= EPS_AREA are
    ignored.
    """
    v = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces)
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    a, b, c = v[faces[:, 0]], v[faces[:, 1]], v[faces[:, 2]]
    valid = triangle_areas(v, faces) > EPS_AREA
    if not valid.any():
        raise DegenerateTriangleError("mesh has no non-degenerate face")
    N, F = len(pts), len(faces)
    face_ids = np.empty(N, dtype=np.int64)
    bary = np.empty((N, 3))
    dist = np.empty(N)
    step = max(1, chunk // max(F, 1))
    for s in range(0, N, step):
        p = pts[s:s + step, None, :]
        w = _closest_points(p, a[None], b[None], c[None])
        q = w[..., 0:1] * a + w[..., 1:2] * b + w[..., 2:3] * c
        d = np.linalg.norm(p - q, axis=-1)
        d[:, ~valid] = np.inf
        dmin = d.min(axis=1, keepdims=True)
        best = np.argmax(d <= dmin + TIE_TOL * np.maximum(dmin, 1.0), axis=1)  # lowest id among ties
        rows = np.arange(len(best))
        face_ids[s:s + step] = best
        bary[s:s + step] = w[rows, best]
        dist[s:s + step] = d[rows, best]
    bary = np.clip(bary, 0.0, 1.0)
    bary /= bary.sum(-1, keepdims=True)
    return face_ids, bary, dist


def closest_triangle(vertices, faces, point):
    """Nearest face to a single point: (face id, barycentric coords, distance)."""
    f, w, d = closest_triangles(vertices, faces, np.asarray(point, dtype=np.float64)[None])
    return int(f[0]), w[0], float(d[0])


# ---------------------------------------------------------------- file formats


def load_obj(path) -> tuple[np.ndarray, np.ndarray]:
    verts, faces = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(tok.split("/")[0]) for tok in parts[1:]]
            if len(idx) != 3:
                raise DatasetError("BAD_FACES", f"{path}:{lineno}: only triangular faces are supported")
            faces.append([i - 1 if i > 0 else len(verts) + i for i in idx])
    return np.asarray(verts, dtype=np.float64).reshape(-1, 3), np.asarray(faces, dtype=np.int64).reshape(-1, 3)


def save_obj(path, vertices, faces) -> None:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in np.asarray(vertices, dtype=np.float64).tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(faces).tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def load_rig(path, vertices, faces, palm_axis=(0.0, 0.0, 1.0)) -> ArticulatedMesh:
    try:
        rig = json.loads(Path(path).read_text())
        parents = np.asarray(rig["joint_parents"], dtype=np.int64)
        rest = np.asarray(rig["joint_rest_transforms"], dtype=np.float64).reshape(-1, 3, 4)
        W = np.zeros((len(vertices), len(parents)))
        for v, j, w in rig["skin_weights"]:
            if not (0 <= int(v) < len(vertices) and 0 <= int(j) < len(parents)):
                raise DatasetError("BAD_SKIN_WEIGHTS", f"skin weight triplet ({v}, {j}) out of range")
            W[int(v), int(j)] += float(w)
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as e:
        if isinstance(e, DatasetError):
            raise
        raise DatasetError("BAD_RIG", f"{path}: {e}") from e
    labels = rig.get("face_side_labels")
    if labels is None:
        labels = face_sides_from_axis(vertices, faces, rig.get("palm_axis", palm_axis))
    else:
        labels = np.asarray([SIDE_NAMES.index(x) if isinstance(x, str) else int(x) for x in labels])
    return ArticulatedMesh(vertices, faces, parents, rest, W, labels)


def save_rig(path, mesh: ArticulatedMesh) -> None:
    vi, ji = np.nonzero(mesh.skin_weights)
    rig = {
        "joint_parents": mesh.joint_parents.tolist(),
        "joint_rest_transforms": mesh.joint_rest_transforms.reshape(-1, 12).tolist(),
        "skin_weights": [[int(v), int(j), float(mesh.skin_weights[v, j])] for v, j in zip(vi, ji)],
        "face_side_labels": [SIDE_NAMES[x] for x in mesh.face_side_labels.tolist()],
    }
    Path(path).write_text(json.dumps(rig, indent=1) + "\n")
