"""Real spherical-harmonics lighting with pose-predicted palm/back environments.

Basis ordering is the flattened (l, m) order, index = l*(l+1) + m with
m = -l..l, and the sign convention common to splatting codebases (band 1
is ``(-C1 y, C1 z, -C1 x)``). Coefficient arrays are (3, (n+1)^2), one row
per RGB channel. Orders 0..4 are supported.

The network maps the flattened J x 3 axis-angle pose (optionally followed by
the root translation) to ``2 * 3 * (n+1)^2`` numbers laid out as
``[palm R, palm G, palm B, back R, back G, back B]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import DimensionError, DomainError
from .mesh import PALM

MAX_ORDER = 4

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792, 0.5462742152960396)
C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
      -0.4570457994644658, 1.445305721320277, -0.5900435899266435)
C4 = (2.5033429417967046, -1.7701307697799304, 0.9461746957575601, -0.6690465435572892,
      0.10578554691520431, -0.6690465435572892, 0.47308734787878004, -1.7701307697799304,
      0.6258357354491761)


def num_coeffs(order: int) -> int:
    return (order + 1) ** 2


def sh_basis_batch(dirs: torch.Tensor, order: int) -> torch.Tensor:
    """(N, 3) unit directions -> (N, (order+1)^2) basis values."""
    if not 0 <= order <= MAX_ORDER:
        raise DomainError(f"SH order must be in 0..{MAX_ORDER}, got {order}")
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = [torch.full_like(x, C0)]
    if order >= 1:
        out += [-C1 * y, C1 * z, -C1 * x]
    if order >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        out += [C2[0] * xy, C2[1] * yz, C2[2] * (2 * zz - xx - yy), C2[3] * xz, C2[4] * (xx - yy)]
    if order >= 3:
        out += [
            C3[0] * y * (3 * xx - yy),
            C3[1] * xy * z,
            C3[2] * y * (4 * zz - xx - yy),
            C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
            C3[4] * x * (4 * zz - xx - yy),
            C3[5] * z * (xx - yy),
            C3[6] * x * (xx - 3 * yy),
        ]
    if order >= 4:
        out += [
            C4[0] * xy * (xx - yy),
            C4[1] * yz * (3 * xx - yy),
            C4[2] * xy * (7 * zz - 1),
            C4[3] * yz * (7 * zz - 3),
            C4[4] * (zz * (35 * zz - 30) + 3),
            C4[5] * xz * (7 * zz - 3),
            C4[6] * (xx - yy) * (7 * zz - 1),
            C4[7] * xz * (xx - 3 * yy),
            C4[8] * (xx * (xx - 3 * yy) - yy * (3 * xx - yy)),
        ]
    return torch.stack(out, -1)


def sh_basis(direction, order: int) -> np.ndarray:
    d = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > 1e-6:
        raise DomainError(f"direction must be unit length, |d| = {np.linalg.norm(d)}")
    return sh_basis_batch(torch.as_tensor(d)[None], order)[0].numpy()


@dataclass
class ShCoefficients:
    order: int
    coeffs: np.ndarray  # (3, (order+1)^2)

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if self.coeffs.shape != (3, num_coeffs(self.order)):
            raise DimensionError(f"order {self.order} needs 3 x {num_coeffs(self.order)} coefficients, got {self.coeffs.shape}")
        if not np.all(np.isfinite(self.coeffs)):
            raise DomainError("SH coefficients must be finite")

    @classmethod
    def constant(cls, order: int, rgb) -> "ShCoefficients":
        """Environment whose irradiance is ``rgb`` in every direction."""
        c = np.zeros((3, num_coeffs(order)))
        c[:, 0] = np.asarray(rgb, dtype=np.float64) / C0
        return cls(order, c)


@dataclass
class DualEnvironment:
    l_palm: ShCoefficients
    l_back: ShCoefficients

    def __post_init__(self):
        if self.l_palm.order != self.l_back.order:
            raise DimensionError("palm and back environments must share an SH order")

    @property
    def order(self) -> int:
        return self.l_palm.order

    def stacked(self) -> np.ndarray:
        """(2, 3, K) array indexed by side label."""
        return np.stack([self.l_palm.coeffs, self.l_back.coeffs])

    def to_json(self) -> dict:
        return {"order": self.order, "palm": self.l_palm.coeffs.tolist(), "back": self.l_back.coeffs.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "DualEnvironment":
        order = int(d["order"])
        return cls(ShCoefficients(order, d["palm"]), ShCoefficients(order, d["back"]))


def irradiance(coeffs: torch.Tensor, normals: torch.Tensor, order: int) -> torch.Tensor:
    """Unclamped SH irradiance: coeffs (..., 3, K) against normals (..., 3) -> (..., 3)."""
    basis = sh_basis_batch(normals, order)
    return (coeffs * basis.unsqueeze(-2)).sum(-1)


def shade(albedo, l: ShCoefficients, normal) -> np.ndarray:
    """albedo * max(0, SH irradiance at the normal), per channel."""
    albedo = np.asarray(albedo, dtype=np.float64)
    n = torch.as_tensor(np.asarray(normal, dtype=np.float64))
    irr = irradiance(torch.as_tensor(l.coeffs), n, l.order).numpy()
    return albedo * np.maximum(irr, 0.0)


def shade_splat(splats, env: DualEnvironment, side) -> np.ndarray:
    """Shade world splats with the palm or back environment selected per splat."""
    side = np.broadcast_to(np.asarray(side), (len(splats.albedo),))
    coeffs = torch.as_tensor(env.stacked()[side])
    irr = irradiance(coeffs, torch.as_tensor(np.asarray(splats.normal, dtype=np.float64)), env.order).numpy()
    return np.asarray(splats.albedo) * np.maximum(irr, 0.0)


# ---------------------------------------------------------------- pose -> lighting network

ACTIVATIONS = {
    "softplus": torch.nn.functional.softplus,
    "silu": torch.nn.functional.silu,
    "tanh": torch.tanh,
    "relu": torch.relu,
}


@dataclass
class LightingNet:
    """Small MLP from pose to both SH environments.

    ``weights[i]`` has shape (out, in); the last layer is affine.
    """

    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    order: int
    activation: str = "softplus"
    include_translation: bool = False

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise DomainError(f"unknown activation {self.activation!r}")
        sizes = list(self.layer_sizes)
        if sizes[-1] != 2 * 3 * num_coeffs(self.order):
            raise DimensionError("output size must be 2 * 3 * (order+1)^2")
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise DimensionError("one weight/bias pair per layer required")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if np.shape(W) != (sizes[i + 1], sizes[i]) or np.shape(b) != (sizes[i + 1],):
                raise DimensionError(f"layer {i} has shape {np.shape(W)}, expected {(sizes[i + 1], sizes[i])}")
        self.weights = [np.asarray(W, dtype=np.float64) for W in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]

    @classmethod
    def create(cls, num_joints: int, order: int = 2, hidden=(64, 64), activation: str = "softplus",
               include_translation: bool = False, rng: np.random.Generator | None = None,
               base_irradiance: float = 1.0) -> "LightingNet":
        """Random hidden layers, zero output weights; bias gives uniform irradiance."""
        rng = rng or np.random.default_rng(0)
        n_in = 3 * num_joints + (3 if include_translation else 0)
        sizes = [n_in, *hidden, 2 * 3 * num_coeffs(order)]
        weights, biases = [], []
        for i in range(len(sizes) - 1):
            if i == len(sizes) - 2:
                weights.append(np.zeros((sizes[i + 1], sizes[i])))
            else:
                weights.append(rng.normal(scale=1.0 / np.sqrt(sizes[i]), size=(sizes[i + 1], sizes[i])))
            biases.append(np.zeros(sizes[i + 1]))
        env = ShCoefficients.constant(order, [base_irradiance] * 3)
        biases[-1] = np.concatenate([env.coeffs.reshape(-1), env.coeffs.reshape(-1)])
        return cls(sizes, weights, biases, order, activation, include_translation)

    def pose_features(self, rotations, translation):
        rot = torch.as_tensor(rotations, dtype=torch.float64) if not torch.is_tensor(rotations) else rotations
        x = rot.reshape(-1)
        if self.include_translation:
            t = torch.as_tensor(translation, dtype=x.dtype) if not torch.is_tensor(translation) else translation
            x = torch.cat([x, t.reshape(-1)])
        if x.shape[0] != self.layer_sizes[0]:
            raise DimensionError(f"network expects {self.layer_sizes[0]} pose inputs, got {x.shape[0]}")
        return x

    def predict_environments(self, pose) -> DualEnvironment:
        x = self.pose_features(pose.joint_rotations, pose.root_translation)
        tensors = [(torch.as_tensor(W), torch.as_tensor(b)) for W, b in zip(self.weights, self.biases)]
        out = mlp_forward(tensors, x, self.activation)
        return environments_from_output(out.numpy(), self.order)


def predict_environments(net: LightingNet, pose) -> DualEnvironment:
    return net.predict_environments(pose)


def mlp_forward(layers, x: torch.Tensor, activation: str) -> torch.Tensor:
    act = ACTIVATIONS[activation]
    h = x
    for i, (W, b) in enumerate(layers):
        h = W @ h + b
        if i < len(layers) - 1:
            h = act(h)
    return h


def environments_from_output(out, order: int):
    """Split network output into (2, 3, K): index 0 palm, 1 back."""
    K = num_coeffs(order)
    if torch.is_tensor(out):
        return out.reshape(2, 3, K)
    arr = np.asarray(out).reshape(2, 3, K)
    return DualEnvironment(ShCoefficients(order, arr[PALM]), ShCoefficients(order, arr[1 - PALM]))
