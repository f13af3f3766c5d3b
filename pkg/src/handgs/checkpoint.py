"""Self-contained checkpoint container.

Layout: 8-byte magic, u32 version, u64 manifest length, a sorted-key JSON
manifest, then raw little-endian array blobs in manifest order. The mesh and
rig travel with the checkpoint so a file renders on its own. Saving a loaded
checkpoint reproduces the original bytes.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .errors import CheckpointError, ConfigError
from .lighting import LightingNet
from .mesh import ArticulatedMesh
from .model import Avatar
from .surfgauss import PARAM_FIELDS, SurfaceGaussianSet

MAGIC = b"HANDGS\x00\x01"
VERSION = 1
_HEADER = struct.Struct("<8sIQ")


@dataclass
class Checkpoint:
    avatar: Avatar
    config: RunConfig
    seed: int
    step: int = 0
    optimizer: object = None  # AdamState or None


def _arrays(avatar: Avatar, optimizer) -> dict[str, np.ndarray]:
    m, g = avatar.mesh, avatar.gaussians
    out = {
        "mesh.rest_vertices": m.rest_vertices,
        "mesh.faces": m.faces,
        "mesh.joint_parents": m.joint_parents,
        "mesh.joint_rest_transforms": m.joint_rest_transforms,
        "mesh.skin_weights": m.skin_weights,
        "mesh.face_side_labels": m.face_side_labels,
        "mesh.vertex_offsets": avatar.vertex_offsets,
        "gauss.face_id": g.face_id,
    }
    for name in PARAM_FIELDS:
        out[f"gauss.{name}"] = getattr(g, name)
    for i, (W, b) in enumerate(zip(avatar.lighting.weights, avatar.lighting.biases)):
        out[f"light.w{i}"] = W
        out[f"light.b{i}"] = b
    out["pose.rotations"] = avatar.pose_refinements
    out["pose.translations"] = avatar.root_refinements
    if optimizer is not None:
        out["optim.m"] = optimizer.m.detach().cpu().numpy()
        out["optim.v"] = optimizer.v.detach().cpu().numpy()
    return out


def save_checkpoint(path, avatar: Avatar, cfg: RunConfig, optimizer=None, seed: int | None = None, step: int | None = None) -> None:
    arrays = _arrays(avatar, optimizer)
    blobs, table, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dt = "<i8" if np.issubdtype(arr.dtype, np.integer) else "<f8"
        data = np.ascontiguousarray(arr, dtype=dt).tobytes()
        table.append({"name": name, "dtype": dt, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    ln = avatar.lighting
    manifest = {
        "format": "handgs-checkpoint",
        "version": VERSION,
        "seed": int(cfg.fit.seed if seed is None else seed),
        "step": int(optimizer.step if (step is None and optimizer is not None) else (step or 0)),
        "z_max": float(avatar.z_max),
        "lighting": {"order": ln.order, "activation": ln.activation, "include_translation": bool(ln.include_translation),
                     "layer_sizes": [int(s) for s in ln.layer_sizes]},
        "config": cfg.to_dict(),
        "blobs": table,
    }
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with open(path, "wb") as f:
            f.write(_HEADER.pack(MAGIC, VERSION, len(text)))
            f.write(text)
            for b in blobs:
                f.write(b)
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint {path}: {e}") from e


def load_checkpoint(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"{path} is truncated")
    magic, version, n = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path} is not a handgs checkpoint")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        manifest = json.loads(raw[_HEADER.size:_HEADER.size + n])
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt manifest in {path}") from e
    base = _HEADER.size + n
    arr = {}
    for e in manifest["blobs"]:
        start = base + e["offset"]
        if start + e["nbytes"] > len(raw):
            raise CheckpointError(f"{path} is truncated")
        arr[e["name"]] = np.frombuffer(raw, dtype=e["dtype"], count=e["nbytes"] // 8, offset=start).reshape(e["shape"]).copy()

    mesh = ArticulatedMesh(arr["mesh.rest_vertices"], arr["mesh.faces"], arr["mesh.joint_parents"],
                           arr["mesh.joint_rest_transforms"], arr["mesh.skin_weights"], arr["mesh.face_side_labels"])
    gset = SurfaceGaussianSet(arr["gauss.face_id"], *(arr[f"gauss.{k}"] for k in PARAM_FIELDS))
    li = manifest["lighting"]
    n_layers = len(li["layer_sizes"]) - 1
    lighting = LightingNet(li["layer_sizes"], [arr[f"light.w{i}"] for i in range(n_layers)],
                           [arr[f"light.b{i}"] for i in range(n_layers)], li["order"], li["activation"],
                           li["include_translation"])
    avatar = Avatar(mesh, gset, lighting, manifest["z_max"], arr["mesh.vertex_offsets"],
                    arr["pose.rotations"], arr["pose.translations"])
    try:
        cfg = RunConfig.from_dict(manifest["config"])
    except ConfigError as e:
        raise CheckpointError(f"checkpoint config is invalid: {e}") from e
    optimizer = None
    if "optim.m" in arr:
        from .diff import AdamState

        optimizer = AdamState(torch.from_numpy(arr["optim.m"]), torch.from_numpy(arr["optim.v"]), manifest["step"])
    return Checkpoint(avatar, cfg, manifest["seed"], manifest["step"], optimizer)
