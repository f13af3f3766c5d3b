"""On-disk capture datasets.

Layout::

    root/
      mesh.obj                  triangles only
      rig.json                  joint tree, rest transforms, skin-weight triplets
      poses.json                {"poses": [PoseFrame...], "holdout": [frame ids]}
      cameras.json              {"views": [{name, fx, fy, cx, cy, width, height,
                                            world_to_camera, [per_frame_world_to_camera]}]}
      frames/<view>/<t:05d>.png
      masks/<t:05d>_object.png  optional
      masks/<t:05d>_hand.png    optional

Validation errors are DatasetError with a specific ``code``.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import DatasetError, DimensionError, DomainError
from .images import read_mask, read_png
from .mesh import ArticulatedMesh, PoseFrame, load_obj, load_rig
from .render import Camera


def frame_name(t: int) -> str:
    return f"{t:05d}.png"


def _load_json(path: Path):
    if not path.exists():
        raise DatasetError("MISSING_FILE", f"{path} not found")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError("BAD_JSON", f"{path}: {e}") from e


class Dataset:
    def __init__(self, root, mesh: ArticulatedMesh, poses: list[PoseFrame], views: list[dict], holdout=()):
        self.root = Path(root)
        self.mesh = mesh
        self.poses = poses
        self.views = views
        self.holdout = sorted(int(t) for t in holdout)
        self._cameras = [Camera.from_json(v) for v in views]

    @property
    def num_frames(self) -> int:
        return len(self.poses)

    @property
    def num_views(self) -> int:
        return len(self.views)

    @property
    def view_names(self) -> list[str]:
        return [v["name"] for v in self.views]

    @property
    def train_frames(self) -> list[int]:
        return [t for t in range(self.num_frames) if t not in set(self.holdout)]

    def camera(self, view: int, t: int | None = None) -> Camera:
        cam = self._cameras[view]
        per_frame = self.views[view].get("per_frame_world_to_camera")
        if per_frame is not None and t is not None:
            return cam.with_pose(per_frame[t])
        return cam

    def frame_path(self, view: int, t: int) -> Path:
        return self.root / "frames" / self.view_names[view] / frame_name(t)

    def frame(self, view: int, t: int) -> np.ndarray:
        return read_png(self.frame_path(view, t))

    def object_mask(self, t: int) -> np.ndarray | None:
        p = self.root / "masks" / f"{t:05d}_object.png"
        return read_mask(p) if p.exists() else None

    def hand_mask(self, t: int) -> np.ndarray | None:
        p = self.root / "masks" / f"{t:05d}_hand.png"
        return read_mask(p) if p.exists() else None

    @classmethod
    def load(cls, root, palm_axis=(0.0, 0.0, 1.0), check_images: bool = True) -> "Dataset":
        root = Path(root)
        if not root.is_dir():
            raise DatasetError("MISSING_FILE", f"dataset directory {root} not found")
        if not (root / "mesh.obj").exists():
            raise DatasetError("MISSING_FILE", f"{root / 'mesh.obj'} not found")
        vertices, faces = load_obj(root / "mesh.obj")
        if not (root / "rig.json").exists():
            raise DatasetError("MISSING_FILE", f"{root / 'rig.json'} not found")
        mesh = load_rig(root / "rig.json", vertices, faces, palm_axis)

        pj = _load_json(root / "poses.json")
        try:
            poses = [PoseFrame.from_json(p) for p in pj["poses"]]
        except (KeyError, TypeError, ValueError) as e:
            if isinstance(e, DimensionError):
                raise DatasetError("BAD_POSE", str(e)) from e
            raise DatasetError("BAD_POSE", f"poses.json: {e}") from e
        for t, p in enumerate(poses):
            if p.joint_rotations.shape[0] != mesh.num_joints:
                raise DatasetError("POSE_JOINTS", f"pose {t} has {p.joint_rotations.shape[0]} joints, rig has {mesh.num_joints}")
        holdout = pj.get("holdout", [])
        if any(not 0 <= int(t) < len(poses) for t in holdout):
            raise DatasetError("BAD_HOLDOUT", "holdout frame index out of range")

        cj = _load_json(root / "cameras.json")
        views = cj.get("views", [])
        if not views:
            raise DatasetError("BAD_CAMERAS", "cameras.json lists no views")
        for v in views:
            try:
                Camera.from_json(v)
            except (KeyError, TypeError, DomainError) as e:
                raise DatasetError("BAD_CAMERAS", f"view {v.get('name')!r}: {e}") from e
            per_frame = v.get("per_frame_world_to_camera")
            if per_frame is not None and len(per_frame) != len(poses):
                raise DatasetError("T_MISMATCH", f"view {v['name']!r} has {len(per_frame)} extrinsics for {len(poses)} poses")

        ds = cls(root, mesh, poses, views, holdout)
        T = ds.num_frames
        for vi, name in enumerate(ds.view_names):
            d = root / "frames" / name
            found = sorted(p.name for p in d.glob("*.png")) if d.is_dir() else []
            if found != [frame_name(t) for t in range(T)]:
                raise DatasetError("T_MISMATCH", f"view {name!r} has {len(found)} frames, poses.json has {T}")
            if check_images:
                cam = ds.camera(vi)
                for t in range(T):
                    img = ds.frame(vi, t)
                    if img.shape[:2] != (cam.height, cam.width):
                        raise DatasetError("IMAGE_DIMS", f"{ds.frame_path(vi, t)} is {img.shape[1]}x{img.shape[0]}, camera is {cam.width}x{cam.height}")
        masks = root / "masks"
        if masks.is_dir() and check_images:
            cam = ds.camera(0)
            for p in sorted(masks.glob("*.png")):
                stem = p.stem
                t_str, _, kind = stem.partition("_")
                if kind not in ("object", "hand") or not t_str.isdigit() or int(t_str) >= T:
                    raise DatasetError("BAD_MASK_NAME", f"unexpected mask file {p.name}")
                m = read_mask(p)
                if m.shape != (cam.height, cam.width):
                    raise DatasetError("IMAGE_DIMS", f"mask {p.name} does not match the image size")
        return ds
