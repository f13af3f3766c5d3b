"""The avatar: mesh prior, Gaussian set, lighting network and per-frame pose
refinements, plus the flat parameter vector the optimizer works on.

One forward pass, :meth:`Avatar.forward`, runs

    pose + refinement -> LBS -> splat placement -> pose-predicted SH
    environments -> shading -> projection

and hands screen splats to one of the compositors in :mod:`handgs.render`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import DimensionError
from .lighting import LightingNet, environments_from_output, irradiance, mlp_forward
from .mesh import ArticulatedMesh, DeformedMesh, PoseFrame, pose_mesh
from .render import (Camera, RenderedImage, RenderSettings, ScreenSplats, composite_dense, composite_tiled,
                     project_splats, rasterize, rasterize_reference)
from .surfgauss import PARAM_FIELDS, SurfaceGaussianSet, splat_geometry

COMPOSITORS = {"tiled": composite_tiled, "dense": composite_dense}


class ParamLayout:
    """Named contiguous blocks of a flat parameter vector."""

    def __init__(self, shapes: dict[str, tuple[int, ...]]):
        self.shapes = {k: tuple(int(d) for d in v) for k, v in shapes.items()}
        self.offsets = {}
        pos = 0
        for name, shape in self.shapes.items():
            n = int(np.prod(shape)) if shape else 1
            self.offsets[name] = (pos, pos + n)
            pos += n
        self.size = pos

    def __iter__(self):
        return iter(self.shapes)

    def slice(self, name: str) -> slice:
        return slice(*self.offsets[name])

    def block_of(self, index: int) -> str:
        for name, (a, b) in self.offsets.items():
            if a <= index < b:
                return name
        raise IndexError(index)

    def scatter(self, flat):
        """Views of ``flat`` per block (keeps the autograd graph for tensors)."""
        return {name: flat[a:b].reshape(self.shapes[name]) for name, (a, b) in self.offsets.items()}

    def gather(self, blocks: dict) -> torch.Tensor:
        missing = set(self.shapes) ^ set(blocks)
        if missing:
            raise DimensionError(f"blocks do not match layout: {sorted(missing)}")
        parts = [torch.as_tensor(np.asarray(blocks[k], dtype=np.float64)).reshape(-1) for k in self.shapes]
        return torch.cat(parts) if parts else torch.zeros(0, dtype=torch.float64)


@dataclass
class Avatar:
    mesh: ArticulatedMesh
    gaussians: SurfaceGaussianSet
    lighting: LightingNet
    z_max: float = 0.002
    vertex_offsets: np.ndarray = None
    pose_refinements: np.ndarray = None  # (T, J, 3)
    root_refinements: np.ndarray = None  # (T, 3)

    def __post_init__(self):
        V, J = self.mesh.num_vertices, self.mesh.num_joints
        if self.vertex_offsets is None:
            self.vertex_offsets = np.zeros((V, 3))
        if self.pose_refinements is None:
            self.pose_refinements = np.zeros((0, J, 3))
        if self.root_refinements is None:
            self.root_refinements = np.zeros((len(self.pose_refinements), 3))
        self.vertex_offsets = np.asarray(self.vertex_offsets, dtype=np.float64).reshape(V, 3)
        self.pose_refinements = np.asarray(self.pose_refinements, dtype=np.float64).reshape(-1, J, 3)
        self.root_refinements = np.asarray(self.root_refinements, dtype=np.float64).reshape(-1, 3)

    @property
    def num_frames(self) -> int:
        return len(self.pose_refinements)

    def canonical_vertices(self) -> np.ndarray:
        return self.mesh.rest_vertices + self.vertex_offsets

    # ------------------------------------------------------------ parameter vector

    def layout(self) -> ParamLayout:
        n = len(self.gaussians)
        shapes = {}
        for name in PARAM_FIELDS:
            shapes[f"gauss.{name}"] = getattr(self.gaussians, name).shape if n else (0,) + getattr(self.gaussians, name).shape[1:]
        shapes["mesh.vertex_offsets"] = self.vertex_offsets.shape
        for i, (W, b) in enumerate(zip(self.lighting.weights, self.lighting.biases)):
            shapes[f"light.w{i}"] = W.shape
            shapes[f"light.b{i}"] = b.shape
        shapes["pose.rotations"] = self.pose_refinements.shape
        shapes["pose.translations"] = self.root_refinements.shape
        return ParamLayout(shapes)

    def pack(self) -> tuple[ParamLayout, torch.Tensor]:
        layout = self.layout()
        blocks = {f"gauss.{k}": v for k, v in self.gaussians.params().items()}
        blocks["mesh.vertex_offsets"] = self.vertex_offsets
        for i, (W, b) in enumerate(zip(self.lighting.weights, self.lighting.biases)):
            blocks[f"light.w{i}"] = W
            blocks[f"light.b{i}"] = b
        blocks["pose.rotations"] = self.pose_refinements
        blocks["pose.translations"] = self.root_refinements
        return layout, layout.gather(blocks)

    def unpack(self, layout: ParamLayout, flat: torch.Tensor) -> None:
        """Write a flat vector back into this avatar (in place)."""
        blocks = {k: v.detach().cpu().numpy().astype(np.float64).copy() for k, v in layout.scatter(flat).items()}
        for name in PARAM_FIELDS:
            setattr(self.gaussians, name, blocks[f"gauss.{name}"])
        self.vertex_offsets = blocks["mesh.vertex_offsets"]
        n_layers = len(self.lighting.weights)
        self.lighting.weights = [blocks[f"light.w{i}"] for i in range(n_layers)]
        self.lighting.biases = [blocks[f"light.b{i}"] for i in range(n_layers)]
        self.pose_refinements = blocks["pose.rotations"]
        self.root_refinements = blocks["pose.translations"]

    # ------------------------------------------------------------ forward

    def forward(self, p: dict, pose: PoseFrame, frame: int | None, cam: Camera,
                settings: RenderSettings = RenderSettings(), env_override=None):
        """Differentiable forward to screen space.

        ``p`` maps layout block names to tensors. ``frame`` selects the pose
        refinement row (None: no refinement). ``env_override`` is an optional
        (2, 3, K) palm/back coefficient array replacing the network output.
        Returns a dict with screen-splat tensors plus intermediate quantities.
        """
        dt = p["mesh.vertex_offsets"].dtype
        canon_v = torch.as_tensor(self.mesh.rest_vertices, dtype=dt) + p["mesh.vertex_offsets"]
        rot = torch.as_tensor(pose.joint_rotations, dtype=dt)
        trans = torch.as_tensor(pose.root_translation, dtype=dt)
        if frame is not None:
            rot = rot + p["pose.rotations"][frame]
            trans = trans + p["pose.translations"][frame]
        deformed = pose_mesh(self.mesh, rot, trans, canon_v)
        canon = DeformedMesh.from_vertices(canon_v, self.mesh.faces)
        gp = {name: p[f"gauss.{name}"] for name in PARAM_FIELDS}
        centers, cov, normals = splat_geometry(gp, self.gaussians.face_id, canon, deformed, self.z_max)

        if env_override is None:
            layers = [(p[f"light.w{i}"], p[f"light.b{i}"]) for i in range(len(self.lighting.weights))]
            env = environments_from_output(mlp_forward(layers, self.lighting.pose_features(rot, trans), self.lighting.activation),
                                           self.lighting.order)
        else:
            env = torch.as_tensor(np.ascontiguousarray(env_override, dtype=np.float64), dtype=dt).reshape(2, 3, -1)
        side = torch.as_tensor(self.mesh.face_side_labels[self.gaussians.face_id], dtype=torch.long)
        irr = irradiance(env[side], normals, self.lighting.order)
        albedo = torch.sigmoid(gp["albedo_logits"])
        color = albedo * torch.relu(irr)
        opacity = torch.sigmoid(gp["opacity_logit"])
        mean2d, cov2d, depth, visible = project_splats(cam, centers, cov, settings)
        return {
            "mean2d": mean2d, "cov2d": cov2d, "depth": depth, "color": color, "opacity": opacity,
            "visible": visible, "centers": centers, "normals": normals, "irradiance": irr, "env": env,
            "deformed": deformed,
        }

    def render_tensors(self, p: dict, pose: PoseFrame, frame: int | None, cam: Camera,
                       settings: RenderSettings = RenderSettings(), env_override=None, compositor: str = "tiled"):
        """Differentiable render: (rgb, alpha, forward outputs).

        ``compositor`` is "tiled" (numba kernels, hand-written backward) or
        "dense" (all pixel/splat pairs through torch autograd).
        """
        out = self.forward(p, pose, frame, cam, settings, env_override)
        if compositor not in COMPOSITORS:
            raise ValueError(f"unknown compositor {compositor!r}")
        rgb, alpha = COMPOSITORS[compositor](out["mean2d"], out["cov2d"], out["depth"], out["color"], out["opacity"],
                                     out["visible"], cam.width, cam.height, settings)
        return rgb, alpha, out

    def screen_splats(self, pose: PoseFrame, frame: int | None, cam: Camera,
                      settings: RenderSettings = RenderSettings(), env_override=None) -> ScreenSplats:
        layout, flat = self.pack()
        with torch.no_grad():
            out = self.forward(layout.scatter(flat), pose, frame, cam, settings, env_override)
        return ScreenSplats.from_torch(out["mean2d"], out["cov2d"], out["depth"], out["color"], out["opacity"], out["visible"])

    def render(self, pose: PoseFrame, frame: int | None, cam: Camera, settings: RenderSettings = RenderSettings(),
               env_override=None, method: str = "tiled") -> RenderedImage:
        if method == "dense":
            layout, flat = self.pack()
            with torch.no_grad():
                rgb, alpha, _ = self.render_tensors(layout.scatter(flat), pose, frame, cam, settings, env_override,
                                                    compositor="dense")
            return RenderedImage(rgb.numpy(), alpha.numpy())
        splats = self.screen_splats(pose, frame, cam, settings, env_override)
        if method == "tiled":
            return rasterize(splats, cam, settings)
        if method == "reference":
            return rasterize_reference(splats, cam, settings)
        raise ValueError(f"unknown render method {method!r}")

    def environments(self, pose: PoseFrame, frame: int | None = None):
        """Palm/back environment predicted for a (refined) pose."""
        rot, trans = pose.joint_rotations, pose.root_translation
        if frame is not None:
            rot = rot + self.pose_refinements[frame]
            trans = trans + self.root_refinements[frame]
        return self.lighting.predict_environments(PoseFrame(rot, trans))
