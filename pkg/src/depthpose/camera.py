"""Camera models: weak-perspective projection and pinhole back-projection.

Two coordinate conventions meet here. The weak-perspective camera works in
*centered* pixel coordinates whose origin is the principal point, so a zero
translation places the body root at the image center. The pinhole model works
in ordinary pixel coordinates with the origin at the top-left corner. Both use
x right / y down / z forward in 3D, with depth in millimeters.

A weak-perspective prediction (s, T) is reconciled with the metric pinhole
frame by placing the body at root depth z_root = fx / s; the translation in
the image plane follows as T / s. Residual depth mismatch between the two
models is absorbed downstream by the scalar depth-alignment offset.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class WeakPerspectiveCamera:
    """Scale in pixels per millimeter plus a 2-vector pixel translation."""

    scale: float
    translation: np.ndarray  # (2,) centered pixels

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=float)
        if self.scale <= 0:
            raise ValueError(f"weak-perspective scale must be positive, got {self.scale}")
        if self.translation.shape != (2,):
            raise ValueError("translation must be a 2-vector")


@dataclass
class PinholeIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PinholeIntrinsics":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], int(d["width"]), int(d["height"]))


def project_weak(points_mm: np.ndarray, rotation: np.ndarray, camera: WeakPerspectiveCamera) -> np.ndarray:
    """Rotate points, drop z, then scale and translate: s * (R X)_xy + T.

    points_mm: (..., 3). Returns centered pixel coordinates, shape (..., 2).
    """
    pts = np.asarray(points_mm, dtype=float)
    rotated = pts @ np.asarray(rotation, dtype=float).T
    return camera.scale * rotated[..., :2] + camera.translation


def project_pinhole(points_mm: np.ndarray, K: PinholeIntrinsics) -> np.ndarray:
    """Perspective-project camera-frame points to pixel coordinates.

    Points must have positive depth; callers clip behind-camera geometry first.
    """
    pts = np.asarray(points_mm, dtype=float)
    z = pts[..., 2]
    if np.any(z <= 0):
        raise ValueError("pinhole projection requires positive depth")
    u = K.fx * pts[..., 0] / z + K.cx
    v = K.fy * pts[..., 1] / z + K.cy
    return np.stack([u, v], axis=-1)


def backproject(pixels: np.ndarray, depth_mm: np.ndarray, K: PinholeIntrinsics) -> np.ndarray:
    """Lift pixels with depth to camera-frame 3D points.

    pixels: (..., 2) in ordinary pixel coordinates, depth_mm: (...,).
    Returns (..., 3): ((u - cx) d / fx, (v - cy) d / fy, d).
    """
    px = np.asarray(pixels, dtype=float)
    d = np.asarray(depth_mm, dtype=float)
    x = (px[..., 0] - K.cx) * d / K.fx
    y = (px[..., 1] - K.cy) * d / K.fy
    return np.stack([x, y, d], axis=-1)


def center_pixels(pixels: np.ndarray, K: PinholeIntrinsics) -> np.ndarray:
    """Shift ordinary pixel coordinates so the principal point is the origin."""
    return np.asarray(pixels, dtype=float) - np.array([K.cx, K.cy])


def placement_from_weak(camera: WeakPerspectiveCamera, K: PinholeIntrinsics) -> np.ndarray:
    """Camera-frame translation (mm) that realizes a weak-perspective prediction.

    Returns t = (tx, ty, z_root) such that adding t to root-centered geometry
    and projecting through K approximates s * X_xy + T in centered pixels.
    """
    z_root = K.fx / camera.scale
    tx = camera.translation[0] * z_root / K.fx
    ty = camera.translation[1] * z_root / K.fy
    return np.array([tx, ty, z_root])
