"""Surface-grounded Gaussians and their canonical -> deformed transfer.

A Gaussian lives on one mesh face: its center is a softmax-barycentric
point lifted along the face normal, its shape a 2D ellipse in the face's
Gram-Schmidt frame. Posing the mesh moves each face through a 2x2
deformation gradient ``A``; the ellipse quadratic form follows as
``Q' = A^-T Q A^-1``.

The differentiable path (:func:`splat_geometry`) builds the deformed
covariance ``Q'^-1 = A R diag(s^2) R^T A^T`` directly. It is the same
function as decomposing ``Q'`` into (s', phi') and recomposing, but stays
smooth at isotropic ellipses, where the eigen-parameterization is singular.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np
import torch

from .errors import DegenerateTriangleError, DomainError
from .mesh import EPS_AREA, ArticulatedMesh, DeformedMesh, face_frames, triangle_areas

EPS_DET = 1e-10
ISOTROPY_TOL = 1e-12

PARAM_FIELDS = ("bary_logits", "log_scales", "rotation", "offset_logit", "albedo_logits", "opacity_logit")
PARAM_WIDTH = {"bary_logits": 3, "log_scales": 2, "rotation": 0, "offset_logit": 0, "albedo_logits": 3, "opacity_logit": 0}


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


@dataclass
class SurfaceGaussianSet:
    """Structure-of-arrays set of mesh-anchored Gaussians (numpy, float64)."""

    face_id: np.ndarray
    bary_logits: np.ndarray
    log_scales: np.ndarray
    rotation: np.ndarray
    offset_logit: np.ndarray
    albedo_logits: np.ndarray
    opacity_logit: np.ndarray

    def __post_init__(self):
        self.face_id = np.asarray(self.face_id, dtype=np.int64).reshape(-1)
        n = len(self.face_id)
        for name in PARAM_FIELDS:
            width = PARAM_WIDTH[name]
            shape = (n, width) if width else (n,)
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(shape))

    def __len__(self):
        return len(self.face_id)

    @classmethod
    def initialize(cls, mesh: ArticulatedMesh, per_face: int = 1, rng: np.random.Generator | None = None,
                   opacity: float = 0.1, albedo: float = 0.5, scale_factor: float = 0.7) -> "SurfaceGaussianSet":
        """Default init: centroid anchor, isotropic scale 0.7*sqrt(face area)."""
        F = mesh.num_faces
        face_id = np.repeat(np.arange(F), per_face)
        n = len(face_id)
        bary = np.zeros((n, 3))
        if per_face > 1:
            rng = rng or np.random.default_rng(0)
            bary = rng.normal(scale=0.5, size=(n, 3))
        scale = scale_factor * np.sqrt(triangle_areas(mesh.rest_vertices, mesh.faces))[face_id]
        return cls(
            face_id=face_id,
            bary_logits=bary,
            log_scales=np.repeat(np.log(scale)[:, None], 2, axis=1),
            rotation=np.zeros(n),
            offset_logit=np.zeros(n),
            albedo_logits=np.full((n, 3), logit(albedo)),
            opacity_logit=np.full(n, logit(opacity)),
        )

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_FIELDS}

    def take(self, index) -> "SurfaceGaussianSet":
        index = np.asarray(index)
        return SurfaceGaussianSet(**{f.name: getattr(self, f.name)[index].copy() for f in fields(self)})

    @staticmethod
    def concat(sets) -> "SurfaceGaussianSet":
        return SurfaceGaussianSet(**{f.name: np.concatenate([getattr(s, f.name) for s in sets]) for f in fields(SurfaceGaussianSet)})

    def copy(self) -> "SurfaceGaussianSet":
        return self.take(np.arange(len(self)))

    # activated views
    def weights(self) -> np.ndarray:
        return barycentric_weights(self.bary_logits)

    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def offsets(self, z_max: float) -> np.ndarray:
        return z_max * sigmoid(self.offset_logit)

    def albedo(self) -> np.ndarray:
        return sigmoid(self.albedo_logits)

    def opacity(self) -> np.ndarray:
        return sigmoid(self.opacity_logit)

    def check_invariants(self, num_faces: int, z_max: float) -> list[str]:
        """Return a list of violated invariants (empty when healthy)."""
        problems = []
        if len(self) and (self.face_id.min() < 0 or self.face_id.max() >= num_faces):
            problems.append("face_id out of range")
        for name in PARAM_FIELDS:
            if not np.all(np.isfinite(getattr(self, name))):
                problems.append(f"{name} not finite")
        w = self.weights()
        if np.any(w <= 0) or np.any(np.abs(w.sum(-1) - 1) > 1e-12):
            problems.append("barycentric weights outside open simplex")
        if np.any(self.scales() <= 0):
            problems.append("non-positive scale")
        off = self.offsets(z_max)
        if np.any(off <= 0) or np.any(off >= z_max):
            problems.append("offset outside (0, z_max)")
        return problems


def barycentric_weights(bary_logits):
    """Softmax over the last axis; accepts numpy or torch."""
    if torch.is_tensor(bary_logits):
        return torch.softmax(bary_logits, dim=-1)
    x = np.asarray(bary_logits, dtype=np.float64)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def edge_projection(v1, v2, v3) -> np.ndarray:
    """Local 2D edge matrix [e1_D | e2_D] of a triangle (columns)."""
    verts = torch.as_tensor(np.stack([v1, v2, v3]), dtype=torch.float64)
    M, area = local_edge_matrices(verts, np.array([[0, 1, 2]]))
    if float(area[0]) <= EPS_AREA:
        raise DegenerateTriangleError("triangle is degenerate")
    return M[0].numpy()


def local_edge_matrices(vertices: torch.Tensor, faces):
    """Batched [e1_D | e2_D] per face in its own Gram-Schmidt frame, plus areas."""
    u, v, _, area = face_frames(vertices, faces)
    f = torch.as_tensor(np.asarray(faces), dtype=torch.long)
    e1 = vertices[f[:, 1]] - vertices[f[:, 0]]
    e2 = vertices[f[:, 2]] - vertices[f[:, 0]]
    M = torch.stack([
        torch.stack([(e1 * u).sum(-1), (e2 * u).sum(-1)], -1),
        torch.stack([(e1 * v).sum(-1), (e2 * v).sum(-1)], -1),
    ], -2)
    return M, area


def _inv2(M):
    det = M[..., 0, 0] * M[..., 1, 1] - M[..., 0, 1] * M[..., 1, 0]
    adj = torch.stack([
        torch.stack([M[..., 1, 1], -M[..., 0, 1]], -1),
        torch.stack([-M[..., 1, 0], M[..., 0, 0]], -1),
    ], -2)
    return adj / det[..., None, None], det


def deformation_gradient(M_canon, M_deform, eps_det: float = EPS_DET):
    """A = M_deform @ M_canon^-1; numpy in, numpy out (torch in, torch out)."""
    is_np = not torch.is_tensor(M_canon)
    Mc = torch.as_tensor(np.asarray(M_canon) if is_np else M_canon, dtype=torch.float64)
    Md = torch.as_tensor(np.asarray(M_deform) if is_np else M_deform, dtype=torch.float64)
    inv, det = _inv2(Mc)
    if torch.any(det.abs() <= eps_det):
        raise DegenerateTriangleError("canonical frame is singular")
    A = Md @ inv
    return A.numpy() if is_np else A


def rotation_2d(phi):
    c, s = np.cos(phi), np.sin(phi)
    return np.array([[c, -s], [s, c]])


@dataclass
class EllipseQuadratic:
    """Quadratic form whose unit level set is the 1-sigma ellipse.

    ``axis`` optionally records the unit direction the first scale was
    measured along; :func:`transform_ellipse` uses it to keep (s_x, s_y)
    paired with the same physical axis through a deformation.
    """

    Q: np.ndarray
    axis: np.ndarray | None = None


def ellipse_quadratic(s, phi) -> EllipseQuadratic:
    s = np.asarray(s, dtype=np.float64)
    if np.any(s <= 0):
        raise DomainError(f"ellipse scales must be positive, got {s}")
    R = rotation_2d(phi)
    Q = R @ np.diag(1.0 / s**2) @ R.T
    return EllipseQuadratic(0.5 * (Q + Q.T), R[:, 0].copy())


def sym_eig2(Q: np.ndarray):
    """Closed-form eigenpairs of a symmetric 2x2: (lam1 >= lam2, angle of lam1's eigenvector)."""
    a, b, c = Q[0, 0], 0.5 * (Q[0, 1] + Q[1, 0]), Q[1, 1]
    mean = 0.5 * (a + c)
    r = math.hypot(0.5 * (a - c), b)
    lam1, lam2 = mean + r, mean - r
    if lam1 - lam2 < ISOTROPY_TOL * abs(lam1):
        return lam1, lam2, 0.0
    return lam1, lam2, 0.5 * math.atan2(2 * b, a - c)


def transform_ellipse(Q: EllipseQuadratic, A, eps_det: float = EPS_DET):
    """Deform an ellipse by A; return (s', phi') with phi' in [0, pi).

    The result always satisfies Q' = R(phi') diag(1/s'^2) R(phi')^T. If Q
    carries a reference axis, s'_x is the scale along the eigen-axis closest
    to that axis' image under A; otherwise s'_x pairs with the larger
    eigenvalue (the short axis).
    """
    A = np.asarray(A, dtype=np.float64)
    det = A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0]
    if abs(det) <= eps_det:
        raise DegenerateTriangleError("deformation gradient is singular")
    Ainv = np.linalg.inv(A)
    Qp = Ainv.T @ Q.Q @ Ainv
    Qp = 0.5 * (Qp + Qp.T)
    lam1, lam2, theta = sym_eig2(Qp)
    if lam2 <= 0:
        raise DomainError("deformed quadratic form is not positive definite")
    s1, s2 = 1.0 / math.sqrt(lam1), 1.0 / math.sqrt(lam2)
    if lam1 - lam2 < ISOTROPY_TOL * abs(lam1):
        return np.array([s1, s2]), 0.0
    if Q.axis is not None:
        img = A @ Q.axis
        d1 = abs(img[0] * math.cos(theta) + img[1] * math.sin(theta))
        d2 = abs(-img[0] * math.sin(theta) + img[1] * math.cos(theta))
        if d2 > d1:
            return np.array([s2, s1]), (theta + 0.5 * math.pi) % math.pi
    return np.array([s1, s2]), theta % math.pi


@dataclass
class WorldSplat:
    """Batch of world-space splats; tangent axes are the ellipse principal axes."""

    center: np.ndarray
    tangent_u: np.ndarray
    tangent_v: np.ndarray
    scales: np.ndarray
    normal: np.ndarray
    albedo: np.ndarray
    opacity: np.ndarray

    def __len__(self):
        return len(self.center)

    def covariance(self) -> np.ndarray:
        U = np.stack([self.tangent_u, self.tangent_v], -1)  # (N, 3, 2)
        return U @ (self.scales[..., None] ** 2 * np.swapaxes(U, -1, -2))


def _check_faces(dm: DeformedMesh, face_id):
    bad = dm.face_area.detach().numpy()[face_id] <= EPS_AREA
    if np.any(bad):
        raise DegenerateTriangleError(f"Gaussian {int(np.argmax(bad))} sits on a degenerate face")


def realize_world(gaussians: SurfaceGaussianSet, canon: DeformedMesh, deformed: DeformedMesh, z_max: float) -> WorldSplat:
    """Place every Gaussian on the deformed mesh (eigen-decomposed form)."""
    fid = gaussians.face_id
    _check_faces(canon, fid)
    _check_faces(deformed, fid)
    Mc, _ = local_edge_matrices(canon.vertices.detach(), canon.faces)
    Md, _ = local_edge_matrices(deformed.vertices.detach(), deformed.faces)
    A_all = (Md @ _inv2(Mc)[0]).numpy()
    verts = deformed.vertices.detach().numpy()
    tri = verts[deformed.faces[fid]]  # (N, 3, 3)
    n = deformed.face_normals.detach().numpy()[fid]
    u = deformed.face_u.detach().numpy()[fid]
    v = deformed.face_v.detach().numpy()[fid]
    w = gaussians.weights()
    center = np.einsum("ni,nij->nj", w, tri) + gaussians.offsets(z_max)[:, None] * n
    s = gaussians.scales()
    scales = np.empty_like(s)
    tu, tv = np.empty_like(u), np.empty_like(v)
    for i in range(len(gaussians)):
        sp, php = transform_ellipse(ellipse_quadratic(s[i], gaussians.rotation[i]), A_all[fid[i]])
        scales[i] = sp
        c, si = math.cos(php), math.sin(php)
        tu[i] = c * u[i] + si * v[i]
        tv[i] = -si * u[i] + c * v[i]
    return WorldSplat(center, tu, tv, scales, n, gaussians.albedo(), gaussians.opacity())


def splat_geometry(params: dict, face_id, canon: DeformedMesh, deformed: DeformedMesh, z_max: float):
    """Differentiable splat placement.

    ``params`` maps the Gaussian field names to torch tensors. Returns
    (centers (N,3), world covariances (N,3,3), normals (N,3)).
    """
    fid = torch.as_tensor(np.asarray(face_id), dtype=torch.long)
    Mc, _ = local_edge_matrices(canon.vertices, canon.faces)
    Md, _ = local_edge_matrices(deformed.vertices, deformed.faces)
    Mc_inv, det = _inv2(Mc[fid])
    if torch.any(det.detach().abs() <= EPS_DET):
        raise DegenerateTriangleError("canonical face frame is singular")
    A = Md[fid] @ Mc_inv

    w = torch.softmax(params["bary_logits"], -1)
    tri = deformed.vertices[torch.as_tensor(deformed.faces, dtype=torch.long)[fid]]  # (N, 3, 3)
    n = deformed.face_normals[fid]
    offset = z_max * torch.sigmoid(params["offset_logit"])
    center = (w.unsqueeze(-1) * tri).sum(-2) + offset.unsqueeze(-1) * n

    phi = params["rotation"]
    c, s = torch.cos(phi), torch.sin(phi)
    R = torch.stack([torch.stack([c, -s], -1), torch.stack([s, c], -1)], -2)
    L = A @ R * torch.exp(params["log_scales"]).unsqueeze(-2)  # A R diag(s)
    F = torch.stack([deformed.face_u[fid], deformed.face_v[fid]], -1)  # (N, 3, 2)
    FL = F @ L
    cov = FL @ FL.transpose(-1, -2)
    return center, cov, n
