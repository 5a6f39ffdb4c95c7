"""Pinhole cameras and rigid transforms.

Conventions used everywhere in this package:

- Right-handed camera frame: +z points forward through the image plane,
  +x points right (pixel u), +y points down (pixel v).
- A pose is the world-to-camera map: p_cam = R @ p_world + t.
- Pixel coordinates are continuous; integer coordinates land on pixel
  centers, so pixel (0, 0) covers [-0.5, 0.5) x [-0.5, 0.5).
- Projection: u = fx * x / z + cx, v = fy * y / z + cy, depth = z.

All math here is numpy float64. The differentiable renderer keeps its own
torch copies of the few formulas it needs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import BehindCameraError, NonPositiveDepthError, ZeroQuaternionError

__all__ = [
    "Camera",
    "Pixel",
    "RigidTransform",
    "look_at",
    "project",
    "quaternion_to_rotation",
    "relative_transform",
    "unproject",
]

_ORTHONORMAL_TOL = 1e-9


class Pixel(NamedTuple):
    u: float
    v: float


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    """Convert a quaternion (w, x, y, z) to a 3x3 rotation matrix.

    The quaternion is normalized first; raises ZeroQuaternionError if its
    norm is below 1e-12.
    """
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (4,):
        raise ValueError(f"quaternion must have shape (4,), got {q.shape}")
    norm = float(np.linalg.norm(q))
    if norm < 1e-12:
        raise ZeroQuaternionError(f"quaternion norm {norm:g} is below 1e-12")
    w, x, y, z = q / norm
    return np.array(
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ]
    )


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) element stored as a 3x3 rotation and a 3-vector translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        rot = np.asarray(self.rotation, dtype=np.float64)
        trans = np.asarray(self.translation, dtype=np.float64)
        if rot.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {rot.shape}")
        if trans.shape != (3,):
            raise ValueError(f"translation must have shape (3,), got {trans.shape}")
        err = np.abs(rot @ rot.T - np.eye(3)).max()
        if err > _ORTHONORMAL_TOL:
            raise ValueError(f"rotation is not orthonormal (max |R R^T - I| = {err:g})")
        det = float(np.linalg.det(rot))
        if abs(det - 1.0) > _ORTHONORMAL_TOL:
            raise ValueError(f"rotation determinant {det:g} != +1")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map one point (3,) or a batch (N, 3) through the transform."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rot_inv = self.rotation.T
        return RigidTransform(rot_inv, -rot_inv @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return self o other, the transform applying `other` first."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )


def relative_transform(pose_m: RigidTransform, pose_n: RigidTransform) -> RigidTransform:
    """Map camera-m coordinates to camera-n coordinates.

    Both arguments are world-to-camera poses; the result is
    pose_n o pose_m^{-1}, so p_n = R_rel @ p_m + t_rel.
    """
    return pose_n.compose(pose_m.inverse())


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: intrinsics plus a world-to-camera pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")

    @property
    def intrinsic_matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    @property
    def mean_focal(self) -> float:
        return 0.5 * (self.fx + self.fy)

    def with_pose(self, pose: RigidTransform) -> "Camera":
        return Camera(self.fx, self.fy, self.cx, self.cy, self.width, self.height, pose)

    def contains(self, u: float, v: float) -> bool:
        """True if (u, v) falls inside the pixel grid (center convention)."""
        return -0.5 <= u < self.width - 0.5 and -0.5 <= v < self.height - 0.5


def project(point_world: np.ndarray, cam: Camera) -> tuple[Pixel, float]:
    """Project a world point; returns the pixel and its camera-frame depth.

    Raises BehindCameraError when the point has z <= 0 in the camera frame.
    """
    x, y, z = cam.pose.apply(np.asarray(point_world, dtype=np.float64))
    if z <= 0.0:
        raise BehindCameraError(f"point projects to z = {z:g} <= 0")
    return Pixel(cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy), float(z)


def unproject(pixel: Pixel | tuple[float, float], depth: float, cam: Camera) -> np.ndarray:
    """Lift a pixel at the given depth back to a camera-frame point.

    Raises NonPositiveDepthError for depth <= 0.
    """
    if depth <= 0.0:
        raise NonPositiveDepthError(f"depth {depth:g} <= 0")
    u, v = pixel
    return np.array(
        [depth * (u - cam.cx) / cam.fx, depth * (v - cam.cy) / cam.fy, depth]
    )


def look_at(position: np.ndarray, target: np.ndarray, down: np.ndarray = (0.0, 1.0, 0.0)) -> RigidTransform:
    """World-to-camera pose for a camera at `position` looking at `target`.

    `down` is the world direction the image v axis should roughly follow.
    Raises ValueError when the view direction is parallel to `down`.
    """
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ValueError("camera position coincides with the look-at target")
    z_axis = forward / norm
    right = np.cross(np.asarray(down, dtype=np.float64), z_axis)
    norm = np.linalg.norm(right)
    if norm < 1e-9:
        raise ValueError("view direction is parallel to the down vector")
    x_axis = right / norm
    y_axis = np.cross(z_axis, x_axis)
    rot = np.stack([x_axis, y_axis, z_axis])
    return RigidTransform(rot, -rot @ position)


def euler_xyz_rotation(rx: float, ry: float, rz: float) -> np.ndarray:
    """Rotation from intrinsic x, y, z Euler angles in radians (Rz @ Ry @ Rx)."""
    cx_, sx = math.cos(rx), math.sin(rx)
    cy_, sy = math.cos(ry), math.sin(ry)
    cz, sz = math.cos(rz), math.sin(rz)
    rot_x = np.array([[1, 0, 0], [0, cx_, -sx], [0, sx, cx_]], dtype=np.float64)
    rot_y = np.array([[cy_, 0, sy], [0, 1, 0], [-sy, 0, cy_]], dtype=np.float64)
    rot_z = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]], dtype=np.float64)
    return rot_z @ rot_y @ rot_x
