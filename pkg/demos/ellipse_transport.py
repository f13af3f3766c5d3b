"""How a mesh-anchored Gaussian follows its triangle.

    python demos/ellipse_transport.py

Stretches and shears one triangle and prints what happens to a Gaussian
anchored on it: the barycentric position is unchanged, the ellipse is
carried by the deformation gradient A, and its area scales with |det A|.
"""
import math

import numpy as np
import torch

from handgs.surfgauss import deformation_gradient, ellipse_quadratic, local_edge_matrices, transform_ellipse

FACE = np.array([[0, 1, 2]])


def edge_matrix(tri):
    M, _ = local_edge_matrices(torch.as_tensor(tri, dtype=torch.float64), FACE)
    return M[0].numpy()


def main():
    canon = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    w = np.array([0.2, 0.5, 0.3])
    s, phi = np.array([0.12, 0.05]), math.radians(30)
    print("canonical ellipse: s = (%.4f, %.4f), phi = %.1f deg" % (*s, math.degrees(phi)))
    Mc = edge_matrix(canon)

    shapes = {
        "stretch x2 along e1": np.array([[0, 0, 0], [2.0, 0, 0], [0, 1.0, 0]]),
        "shear": np.array([[0, 0, 0], [1.0, 0, 0], [0.6, 1.0, 0]]),
        "tilt out of plane": np.array([[0, 0, 0], [1.0, 0, 0.5], [0, 1.0, 0.8]]),
        "uniform shrink to 60%": 0.6 * canon,
    }
    for name, tri in shapes.items():
        Md = edge_matrix(tri)
        A = deformation_gradient(Mc, Md)
        sp, php = transform_ellipse(ellipse_quadratic(s, phi), A)
        # the anchor keeps its barycentric coordinates in the deformed triangle
        coords = np.linalg.solve(Md, A @ (Mc @ w[1:]))
        print(f"\n{name}")
        print("  A =", np.array2string(A, precision=3, suppress_small=True).replace("\n", ""))
        print("  barycentric after:", np.round(np.r_[1 - coords.sum(), coords], 12))
        print("  s' = (%.4f, %.4f), phi' = %.1f deg" % (*sp, math.degrees(php)))
        print("  area ratio %.6f vs |det A| %.6f" % (sp.prod() / s.prod(), abs(np.linalg.det(A))))


if __name__ == "__main__":
    main()
