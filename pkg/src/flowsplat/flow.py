"""Optical flow induced by depth and relative camera pose, plus .flo I/O.

Flow between view m and view n is computed analytically: every pixel of view m
is unprojected with its depth, mapped through relative_transform(pose_m,
pose_n), and projected into view n; the flow vector is (u2 - u1, v2 - v1) in
pixels. Pixels are invalid when the source depth is non-positive, the
reprojected point lands behind the camera (z <= 1e-8), the target coordinates
fall outside [-0.5, W-0.5) x [-0.5, H-0.5), or the caller's source-validity
mask excludes them (used for background-sentinel depths).

Flow computations run in torch and are differentiable with respect to the
input depth map; invalid pixels carry zero flow and block gradients.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import (
    BadMagicError,
    NonZeroT3Error,
    NoValidPixelsError,
    ShapeMismatchError,
    TruncatedFileError,
)
from .geometry import Camera, relative_transform

__all__ = [
    "FLO_MAGIC",
    "FlowField",
    "endpoint_error",
    "pure_translation_flow",
    "radiance_flow",
    "read_flo",
    "roundtrip_displacement",
    "write_flo",
]

FLO_MAGIC = 202021.25
_FLO_INVALID = 1e10
_FLO_VALID_LIMIT = 1e9
_MIN_Z = 1e-8


@dataclass
class FlowField:
    """Per-pixel displacement (du, dv) in pixels with a validity mask.

    du/dv values at invalid pixels are unspecified and excluded from every
    reduction in this package.
    """

    du: torch.Tensor
    dv: torch.Tensor
    valid: torch.Tensor

    def __post_init__(self) -> None:
        self.du = torch.as_tensor(self.du)
        self.dv = torch.as_tensor(self.dv)
        self.valid = torch.as_tensor(self.valid, dtype=torch.bool)
        if not (self.du.shape == self.dv.shape == self.valid.shape) or self.du.dim() != 2:
            raise ShapeMismatchError(
                f"flow components disagree: du {tuple(self.du.shape)}, "
                f"dv {tuple(self.dv.shape)}, valid {tuple(self.valid.shape)}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return (self.du.shape[0], self.du.shape[1])

    @staticmethod
    def zeros(height: int, width: int, dtype=torch.float64) -> "FlowField":
        return FlowField(
            torch.zeros((height, width), dtype=dtype),
            torch.zeros((height, width), dtype=dtype),
            torch.ones((height, width), dtype=torch.bool),
        )

    def detach(self) -> "FlowField":
        return FlowField(self.du.detach(), self.dv.detach(), self.valid.clone())


def _as_depth(depth, cam: Camera) -> torch.Tensor:
    t = depth if isinstance(depth, torch.Tensor) else torch.as_tensor(np.asarray(depth), dtype=torch.float64)
    if tuple(t.shape) != (cam.height, cam.width):
        raise ShapeMismatchError(
            f"depth shape {tuple(t.shape)} does not match camera image {cam.height}x{cam.width}"
        )
    return t


def _pixel_grid(cam: Camera, dtype) -> tuple[torch.Tensor, torch.Tensor]:
    v, u = torch.meshgrid(
        torch.arange(cam.height, dtype=dtype), torch.arange(cam.width, dtype=dtype), indexing="ij"
    )
    return u, v


def radiance_flow(depth, cam_m: Camera, cam_n: Camera, src_valid=None) -> FlowField:
    """Flow from view m to view n given view m's depth map.

    `src_valid` optionally marks source pixels whose depth is usable (the
    renderer's background sentinel is positive, so coverage information must
    come from the caller).
    """
    d = _as_depth(depth, cam_m)
    dtype = d.dtype if d.is_floating_point() else torch.float64
    d = d.to(dtype)
    rel = relative_transform(cam_m.pose, cam_n.pose)
    rot = torch.tensor(rel.rotation, dtype=dtype)
    tr = torch.tensor(rel.translation, dtype=dtype)

    u, v = _pixel_grid(cam_m, dtype)
    src_ok = d > 0
    if src_valid is not None:
        src_ok = src_ok & torch.as_tensor(np.asarray(src_valid), dtype=torch.bool)
    safe_d = torch.where(src_ok, d, torch.ones_like(d))

    x = safe_d * (u - cam_m.cx) / cam_m.fx
    y = safe_d * (v - cam_m.cy) / cam_m.fy
    z = safe_d
    xn = rot[0, 0] * x + rot[0, 1] * y + rot[0, 2] * z + tr[0]
    yn = rot[1, 0] * x + rot[1, 1] * y + rot[1, 2] * z + tr[1]
    zn = rot[2, 0] * x + rot[2, 1] * y + rot[2, 2] * z + tr[2]

    front = zn > _MIN_Z
    safe_zn = torch.where(front, zn, torch.ones_like(zn))
    u2 = cam_n.fx * xn / safe_zn + cam_n.cx
    v2 = cam_n.fy * yn / safe_zn + cam_n.cy
    in_bounds = (u2 >= -0.5) & (u2 < cam_n.width - 0.5) & (v2 >= -0.5) & (v2 < cam_n.height - 0.5)

    valid = src_ok & front & in_bounds
    zero = d.new_zeros(())
    return FlowField(
        torch.where(valid, u2 - u, zero), torch.where(valid, v2 - v, zero), valid
    )


def pure_translation_flow(depth, cam: Camera, t, src_valid=None) -> FlowField:
    """Closed-form flow for a pure in-plane camera translation (t3 = 0).

    Per pixel: (fx * t1 / D, fy * t2 / D). Exact solution of the reprojection
    when the relative transform is a camera-frame translation with no depth
    component; matches radiance_flow through a sampled view to float precision.
    """
    t = np.asarray(t, dtype=np.float64)
    if t.shape != (3,):
        raise ShapeMismatchError(f"translation must have shape (3,), got {t.shape}")
    if abs(t[2]) > 1e-12:
        raise NonZeroT3Error(f"closed form requires t3 = 0, got t3 = {t[2]:g}")
    d = _as_depth(depth, cam)
    dtype = d.dtype if d.is_floating_point() else torch.float64
    d = d.to(dtype)

    u, v = _pixel_grid(cam, dtype)
    src_ok = d > 0
    if src_valid is not None:
        src_ok = src_ok & torch.as_tensor(np.asarray(src_valid), dtype=torch.bool)
    safe_d = torch.where(src_ok, d, torch.ones_like(d))
    du = cam.fx * float(t[0]) / safe_d
    dv = cam.fy * float(t[1]) / safe_d
    u2 = u + du
    v2 = v + dv
    in_bounds = (u2 >= -0.5) & (u2 < cam.width - 0.5) & (v2 >= -0.5) & (v2 < cam.height - 0.5)
    valid = src_ok & in_bounds
    zero = d.new_zeros(())
    return FlowField(torch.where(valid, du, zero), torch.where(valid, dv, zero), valid)


def endpoint_error(a: FlowField, b: FlowField) -> tuple[float, np.ndarray]:
    """Mean Euclidean distance over jointly valid pixels, plus the error map.

    The map carries NaN at pixels outside the joint validity set.
    """
    if a.shape != b.shape:
        raise ShapeMismatchError(f"flow shapes differ: {a.shape} vs {b.shape}")
    joint = (a.valid & b.valid).numpy()
    if not joint.any():
        raise NoValidPixelsError("flow fields have no jointly valid pixels")
    ddu = a.du.detach().numpy().astype(np.float64) - b.du.detach().numpy().astype(np.float64)
    ddv = a.dv.detach().numpy().astype(np.float64) - b.dv.detach().numpy().astype(np.float64)
    dist = np.hypot(ddu, ddv)
    err_map = np.where(joint, dist, np.nan)
    return float(dist[joint].mean()), err_map


def roundtrip_displacement(fwd: FlowField, bwd: FlowField) -> tuple[np.ndarray, np.ndarray]:
    """Compose fwd with a bilinear lookup of bwd; return |residual| and a mask.

    For a source pixel p with forward flow f, the residual is
    (p + f + bwd(p + f)) - p. Pixels are masked out when the forward flow is
    invalid or when any of the four bilinear corners at the target is invalid
    or off-grid.
    """
    du_f = fwd.du.detach().numpy().astype(np.float64)
    dv_f = fwd.dv.detach().numpy().astype(np.float64)
    ok_f = fwd.valid.numpy()
    du_b = bwd.du.detach().numpy().astype(np.float64)
    dv_b = bwd.dv.detach().numpy().astype(np.float64)
    ok_b = bwd.valid.numpy()
    h, w = du_f.shape

    v, u = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    u2 = u + du_f
    v2 = v + dv_f
    x0 = np.floor(u2).astype(np.int64)
    y0 = np.floor(v2).astype(np.int64)
    inside = (x0 >= 0) & (x0 + 1 <= bwd.shape[1] - 1) & (y0 >= 0) & (y0 + 1 <= bwd.shape[0] - 1)
    x0c = np.clip(x0, 0, bwd.shape[1] - 2)
    y0c = np.clip(y0, 0, bwd.shape[0] - 2)
    wx = u2 - x0c
    wy = v2 - y0c

    def lerp(img):
        a = img[y0c, x0c]
        b = img[y0c, x0c + 1]
        c = img[y0c + 1, x0c]
        d = img[y0c + 1, x0c + 1]
        return (a * (1 - wx) + b * wx) * (1 - wy) + (c * (1 - wx) + d * wx) * wy

    corners_ok = ok_b[y0c, x0c] & ok_b[y0c, x0c + 1] & ok_b[y0c + 1, x0c] & ok_b[y0c + 1, x0c + 1]
    mask = ok_f & inside & corners_ok
    res_u = u2 + lerp(du_b) - u
    res_v = v2 + lerp(dv_b) - v
    return np.where(mask, np.hypot(res_u, res_v), np.nan), mask


def write_flo(field: FlowField, path: str | Path) -> None:
    """Middlebury .flo: f32 magic 202021.25, i32 width, i32 height, then
    row-major interleaved (du, dv) float32, little-endian. Invalid pixels are
    encoded with magnitude 1e10."""
    h, w = field.shape
    du = field.du.detach().numpy().astype("<f4")
    dv = field.dv.detach().numpy().astype("<f4")
    ok = field.valid.numpy()
    data = np.empty((h, w, 2), dtype="<f4")
    data[:, :, 0] = np.where(ok, du, np.float32(_FLO_INVALID))
    data[:, :, 1] = np.where(ok, dv, np.float32(_FLO_INVALID))
    with open(path, "wb") as f:
        f.write(struct.pack("<fii", FLO_MAGIC, w, h))
        f.write(data.tobytes())


def read_flo(path: str | Path) -> FlowField:
    """Read a .flo file; values with magnitude above 1e9 become invalid pixels
    (their raw values are preserved so rewriting our own files is bit-exact)."""
    with open(path, "rb") as f:
        header = f.read(12)
        if len(header) < 12:
            raise TruncatedFileError(f"{path}: header is {len(header)} bytes, expected 12")
        magic, w, h = struct.unpack("<fii", header)
        if magic != np.float32(FLO_MAGIC):
            raise BadMagicError(f"{path}: bad magic {magic!r}")
        if w <= 0 or h <= 0:
            raise TruncatedFileError(f"{path}: nonsensical size {w}x{h}")
        payload = f.read()
    expected = h * w * 2 * 4
    if len(payload) < expected:
        raise TruncatedFileError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    if len(payload) > expected:
        raise ValueError(f"{path}: {len(payload) - expected} trailing bytes after flow data")
    data = np.frombuffer(payload, dtype="<f4").reshape(h, w, 2).astype(np.float64)
    du = data[:, :, 0]
    dv = data[:, :, 1]
    valid = (np.abs(du) <= _FLO_VALID_LIMIT) & (np.abs(dv) <= _FLO_VALID_LIMIT)
    return FlowField(torch.from_numpy(du.copy()), torch.from_numpy(dv.copy()), torch.from_numpy(valid))
