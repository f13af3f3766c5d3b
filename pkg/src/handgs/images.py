"""PNG I/O. Internally images are linear float in [0, 1].

16-bit files hold linear values (v / 65535); 8-bit files are sRGB encoded
and decoded on read. Alpha is always stored linearly.
"""
from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np

from .errors import DatasetError


def srgb_to_linear(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x <= 0.04045, x / 12.92, ((x + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(np.maximum(x, 0.0031308), 1 / 2.4) - 0.055)


def read_png(path, with_alpha: bool = False):
    """Read an RGB(A) or gray PNG as linear float (H, W, 3) [+ alpha (H, W)]."""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise DatasetError("MISSING_FILE", f"cannot read image {path}")
    if raw.ndim == 2:
        raw = raw[..., None].repeat(3, axis=-1)
    if raw.dtype == np.uint16:
        data = raw.astype(np.float64) / 65535.0
        rgb = data[..., 2::-1][..., :3]
    elif raw.dtype == np.uint8:
        data = raw.astype(np.float64) / 255.0
        rgb = srgb_to_linear(data[..., 2::-1][..., :3])
    else:
        raise DatasetError("BAD_IMAGE", f"unsupported PNG sample type {raw.dtype} in {path}")
    rgb = np.ascontiguousarray(rgb)
    if not with_alpha:
        return rgb
    alpha = data[..., 3] if data.shape[-1] == 4 else np.ones(rgb.shape[:2])
    return rgb, alpha


def write_png(path, rgb, alpha=None, bits: int = 16) -> None:
    rgb = np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0)
    if bits == 16:
        scale, dtype, enc = 65535.0, np.uint16, rgb
    elif bits == 8:
        scale, dtype, enc = 255.0, np.uint8, linear_to_srgb(rgb)
    else:
        raise ValueError("bits must be 8 or 16")
    chans = [enc[..., 2], enc[..., 1], enc[..., 0]]
    if alpha is not None:
        chans.append(np.clip(np.asarray(alpha, dtype=np.float64), 0.0, 1.0))
    out = np.rint(np.stack(chans, -1) * scale).astype(dtype)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), out):
        raise OSError(f"cannot write {path}")


def read_mask(path) -> np.ndarray:
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise DatasetError("MISSING_FILE", f"cannot read mask {path}")
    if raw.ndim == 3:
        raw = raw[..., 0]
    top = np.iinfo(raw.dtype).max
    values = np.unique(raw)
    if not np.all(np.isin(values, [0, 1, top])):
        raise DatasetError("MASK_NOT_BINARY", f"mask {path} has non-binary values")
    return raw > 0


def write_mask(path, mask) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)):
        raise OSError(f"cannot write {path}")
