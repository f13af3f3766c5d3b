import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from handgs.errors import DegenerateTriangleError, DomainError
from handgs.mesh import ArticulatedMesh, DeformedMesh
from handgs.surfgauss import (SurfaceGaussianSet, barycentric_weights, deformation_gradient, edge_projection,
                              ellipse_quadratic, logit, realize_world, splat_geometry, transform_ellipse)
from handgs.synthetic import icosphere


def random_A(rng, max_cond=100.0):
    while True:
        A = rng.normal(size=(2, 2))
        if abs(np.linalg.det(A)) > 1e-3 and np.linalg.cond(A) < max_cond:
            return A


def Qprime(s, phi, A):
    Q = ellipse_quadratic(s, phi).Q
    Ai = np.linalg.inv(A)
    return Ai.T @ Q @ Ai


def quad_from(sp, php):
    c, s = math.cos(php), math.sin(php)
    R = np.array([[c, -s], [s, c]])
    return R @ np.diag(1 / np.asarray(sp) ** 2) @ R.T


# ---------------------------------------------------------------- barycentric weights


def test_barycentric_examples():
    np.testing.assert_allclose(barycentric_weights([0.0, 0, 0]), [1 / 3] * 3, atol=1e-15)
    np.testing.assert_allclose(barycentric_weights([7.5, 7.5, 7.5]), [1 / 3] * 3, atol=1e-15)
    np.testing.assert_allclose(barycentric_weights([math.log(2), 0, 0]), [0.5, 0.25, 0.25], atol=1e-15)


@given(st.lists(st.floats(-50, 50), min_size=3, max_size=3))
def test_barycentric_simplex(x):
    w = barycentric_weights(x)
    assert np.all(w >= 0) and abs(w.sum() - 1) < 1e-12


# ---------------------------------------------------------------- edge frames


def test_edge_projection_examples(rng):
    np.testing.assert_allclose(edge_projection([0, 0, 0], [1, 0, 0], [0, 1, 0]), np.eye(2), atol=1e-15)
    np.testing.assert_allclose(edge_projection([0, 0, 0], [2, 0, 0], [1, 1, 0]), [[2, 1], [0, 1]], atol=1e-15)
    tri = rng.normal(size=(3, 3))
    R = Rotation.random(random_state=3).as_matrix()
    t = rng.normal(size=3)
    M = edge_projection(*tri)
    np.testing.assert_allclose(edge_projection(*(tri @ R.T + t)), M, atol=1e-9)
    area = 0.5 * np.linalg.norm(np.cross(tri[1] - tri[0], tri[2] - tri[0]))
    assert np.linalg.det(M) == pytest.approx(2 * area, rel=1e-12)
    with pytest.raises(DegenerateTriangleError):
        edge_projection([0, 0, 0], [1, 0, 0], [2, 0, 0])


def test_deformation_gradient_examples():
    M = np.array([[2.0, 1.0], [0.0, 1.0]])
    np.testing.assert_allclose(deformation_gradient(M, M), np.eye(2), atol=1e-15)
    np.testing.assert_allclose(deformation_gradient(np.eye(2), np.diag([2.0, 1.0])), np.diag([2.0, 1.0]))
    with pytest.raises(DegenerateTriangleError):
        deformation_gradient(np.zeros((2, 2)), M)


def test_barycentric_constant_under_deformation(rng):
    """A maps a point with coords c on the canonical triangle to coords c on the deformed one."""
    for _ in range(200):
        Mc = random_A(rng)
        Md = random_A(rng)
        A = deformation_gradient(Mc, Md)
        np.testing.assert_allclose(A @ Mc, Md, atol=1e-9)
        c = rng.dirichlet([1, 1, 1])
        p = Mc @ c[1:]  # vertex 0 at the origin
        coords = np.linalg.solve(Md, A @ p)
        np.testing.assert_allclose(coords, c[1:], atol=1e-9)


# ---------------------------------------------------------------- ellipses


def test_ellipse_quadratic_examples():
    np.testing.assert_allclose(ellipse_quadratic([1, 1], 0.7).Q, np.eye(2), atol=1e-15)
    np.testing.assert_allclose(ellipse_quadratic([2, 1], 0).Q, np.diag([0.25, 1]), atol=1e-15)
    np.testing.assert_allclose(ellipse_quadratic([2, 1], math.pi / 2).Q, np.diag([1, 0.25]), atol=1e-15)
    with pytest.raises(DomainError):
        ellipse_quadratic([0, 1], 0)


def test_transform_identity_and_stretch():
    s, phi = transform_ellipse(ellipse_quadratic([0.3, 0.1], 4.0), np.eye(2))
    np.testing.assert_allclose(s, [0.3, 0.1], rtol=1e-12)
    assert phi == pytest.approx(4.0 % math.pi, abs=1e-12)
    s, phi = transform_ellipse(ellipse_quadratic([1, 1], 0.0), np.diag([2.0, 1.0]))
    np.testing.assert_allclose(s, [2, 1], rtol=1e-12)
    assert phi == pytest.approx(0.0, abs=1e-12)


def test_transform_rotation(rng):
    for _ in range(100):
        s0 = rng.uniform(0.1, 2, 2)
        phi, th = rng.uniform(0, math.pi), rng.uniform(-3, 3)
        c, sn = math.cos(th), math.sin(th)
        s, php = transform_ellipse(ellipse_quadratic(s0, phi), [[c, -sn], [sn, c]])
        np.testing.assert_allclose(s, s0, rtol=1e-10)
        d = (php - (phi + th)) % math.pi
        assert min(d, math.pi - d) < 1e-9


def test_transform_bare_quadratic_pairs_larger_eigenvalue():
    """Without a reference axis s'_x pairs with the larger eigenvalue (the short axis)."""
    from handgs.surfgauss import EllipseQuadratic

    s, phi = transform_ellipse(EllipseQuadratic(np.array([[2.0, 1.0], [1.0, 2.0]])), np.eye(2))
    np.testing.assert_allclose(s, [1 / math.sqrt(3), 1.0], rtol=1e-12)
    # the larger eigenvalue's eigenvector is (1, 1) / sqrt(2)
    assert phi == pytest.approx(math.pi / 4, abs=1e-12)
    lam = np.linalg.eigvalsh([[2.0, 1.0], [1.0, 2.0]])
    np.testing.assert_allclose(sorted(1 / np.asarray(s) ** 2), lam, rtol=1e-12)


def test_transform_reconstructs_Qprime(rng):
    for _ in range(300):
        s0, phi, A = rng.uniform(0.05, 3, 2), rng.uniform(-4, 4), random_A(rng)
        s, php = transform_ellipse(ellipse_quadratic(s0, phi), A)
        assert 0 <= php < math.pi
        np.testing.assert_allclose(quad_from(s, php), Qprime(s0, phi, A), rtol=1e-9, atol=1e-9)


def test_boundary_points_map_to_boundary(rng):
    for _ in range(200):
        s0, phi, A = rng.uniform(0.05, 3, 2), rng.uniform(0, math.pi), random_A(rng)
        s, php = transform_ellipse(ellipse_quadratic(s0, phi), A)
        Qp = quad_from(s, php)
        t = rng.uniform(0, 2 * math.pi, 16)
        c, sn = math.cos(phi), math.sin(phi)
        pts = np.array([[c, -sn], [sn, c]]) @ np.stack([s0[0] * np.cos(t), s0[1] * np.sin(t)])
        img = A @ pts
        np.testing.assert_allclose(np.einsum("in,ij,jn->n", img, Qp, img), 1.0, atol=1e-9)


def test_determinant_identity(rng):
    for _ in range(200):
        s0, phi, A = rng.uniform(0.05, 3, 2), rng.uniform(0, math.pi), random_A(rng)
        s, _ = transform_ellipse(ellipse_quadratic(s0, phi), A)
        assert s[0] * s[1] == pytest.approx(s0[0] * s0[1] * abs(np.linalg.det(A)), rel=1e-9)


def test_singular_deformation_rejected():
    with pytest.raises(DegenerateTriangleError):
        transform_ellipse(ellipse_quadratic([1, 1], 0), [[1, 2], [2, 4]])


# ---------------------------------------------------------------- realization


def sphere_mesh():
    v, f = icosphere(1, 0.05)
    return ArticulatedMesh(v, f, [-1], [np.hstack([np.eye(3), np.zeros((3, 1))])], np.ones((len(v), 1)),
                           np.zeros(len(f), dtype=int))


def random_set(mesh, rng, n=50):
    return SurfaceGaussianSet(rng.integers(0, mesh.num_faces, n), rng.normal(size=(n, 3)),
                              np.log(rng.uniform(0.002, 0.01, (n, 2))), rng.uniform(0, math.pi, n),
                              rng.normal(size=n), rng.normal(size=(n, 3)), rng.normal(size=n))


def test_realize_at_rest(rng):
    mesh = sphere_mesh()
    g = random_set(mesh, rng)
    canon = DeformedMesh.from_vertices(mesh.rest_vertices, mesh.faces)
    ws = realize_world(g, canon, canon, 0.002)
    tri = mesh.rest_vertices[mesh.faces[g.face_id]]
    expect = np.einsum("ni,nij->nj", g.weights(), tri) + g.offsets(0.002)[:, None] * canon.face_normals.numpy()[g.face_id]
    np.testing.assert_allclose(ws.center, expect, atol=1e-15)
    np.testing.assert_allclose(ws.scales, g.scales(), rtol=1e-9)


def test_zero_offset_logit_gives_half_zmax():
    mesh = sphere_mesh()
    g = SurfaceGaussianSet.initialize(mesh)
    assert np.allclose(g.offsets(0.002), 0.001)


def test_rigid_motion_moves_splats_rigidly(rng):
    mesh = sphere_mesh()
    g = random_set(mesh, rng)
    R = Rotation.random(random_state=5).as_matrix()
    t = rng.normal(size=3)
    canon = DeformedMesh.from_vertices(mesh.rest_vertices, mesh.faces)
    moved = DeformedMesh.from_vertices(mesh.rest_vertices @ R.T + t, mesh.faces)
    a = realize_world(g, canon, canon, 0.002)
    b = realize_world(g, canon, moved, 0.002)
    np.testing.assert_allclose(b.center, a.center @ R.T + t, atol=1e-12)
    np.testing.assert_allclose(b.scales, a.scales, rtol=1e-9)
    np.testing.assert_allclose(b.covariance(), R @ a.covariance() @ R.T, atol=1e-15)


def test_differentiable_path_matches_eigen_path(rng):
    mesh = sphere_mesh()
    g = random_set(mesh, rng)
    canon = DeformedMesh.from_vertices(mesh.rest_vertices, mesh.faces)
    v = mesh.rest_vertices * np.array([1.3, 0.8, 1.0]) + rng.normal(scale=0.002, size=mesh.rest_vertices.shape)
    deformed = DeformedMesh.from_vertices(v, mesh.faces)
    ws = realize_world(g, canon, deformed, 0.002)
    params = {k: torch.as_tensor(val) for k, val in g.params().items()}
    centers, cov, normals = splat_geometry(params, g.face_id, canon, deformed, 0.002)
    np.testing.assert_allclose(centers.numpy(), ws.center, atol=1e-15)
    np.testing.assert_allclose(cov.numpy(), ws.covariance(), atol=1e-15)


def test_invariants_and_degenerate_face(rng):
    mesh = sphere_mesh()
    g = random_set(mesh, rng)
    assert g.check_invariants(mesh.num_faces, 0.002) == []
    g.face_id[0] = mesh.num_faces
    assert g.check_invariants(mesh.num_faces, 0.002)
    v = mesh.rest_vertices.copy()
    f = mesh.faces[3]
    v[f[1]] = v[f[0]]
    v[f[2]] = v[f[0]]
    g2 = random_set(mesh, rng)
    g2.face_id[:] = 3
    canon = DeformedMesh.from_vertices(mesh.rest_vertices, mesh.faces)
    with pytest.raises(DegenerateTriangleError):
        realize_world(g2, canon, DeformedMesh.from_vertices(v, mesh.faces), 0.002)


def test_logit_inverse():
    p = np.linspace(0.01, 0.99, 20)
    from handgs.surfgauss import sigmoid

    np.testing.assert_allclose(sigmoid(logit(p)), p, atol=1e-15)
