"""Pinhole camera model with projection and unprojection.

Pixel convention: integer pixel (u, v) covers the continuous square
[u, u+1) x [v, v+1); its ray passes through the centre (u+0.5, v+0.5).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

Z_NEAR = 1e-4


class GeometryError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_cam: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        w2c = np.array(self.world_to_cam, dtype=np.float64).reshape(4, 4)
        w2c.setflags(write=False)
        object.__setattr__(self, "world_to_cam", w2c)
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise GeometryError("image size must be at least 1x1")
        rot = w2c[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-9, rtol=0):
            raise GeometryError("rotation block is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > 1e-9:
            raise GeometryError("rotation block must have determinant +1")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_cam[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_cam[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def num_pixels(self) -> int:
        return self.width * self.height

    def __eq__(self, other):
        if not isinstance(other, Camera):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def __hash__(self):
        return hash(json.dumps(self.to_dict(), sort_keys=True))

    def with_pose(self, world_to_cam) -> "Camera":
        return Camera(self.fx, self.fy, self.cx, self.cy, self.width, self.height, world_to_cam)

    def to_dict(self) -> dict:
        return {
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "width": int(self.width),
            "height": int(self.height),
            "world_to_cam": [float(x) for x in self.world_to_cam.reshape(-1)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        w2c = d.get("world_to_cam")
        if w2c is None or len(w2c) != 16:
            raise GeometryError("world_to_cam must hold 16 floats in row-major order")
        return cls(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            width=int(d["width"]),
            height=int(d["height"]),
            world_to_cam=np.asarray(w2c, dtype=np.float64).reshape(4, 4),
        )


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """World-to-camera matrix for a camera at `eye` looking at `target`.

    Camera frame is x right, y down, z forward (OpenCV style).
    """
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    # world "up" maps to -y in image space
    right = np.cross(-np.asarray(up, dtype=np.float64), forward)
    n = np.linalg.norm(right)
    if n < 1e-12:
        raise GeometryError("up vector is parallel to the viewing direction")
    right /= n
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])
    w2c = np.eye(4)
    w2c[:3, :3] = rot
    w2c[:3, 3] = -rot @ eye
    return w2c


def make_camera(width, height, fov_deg=90.0, world_to_cam=None, center_offset=0.0) -> Camera:
    """Camera with square pixels and the principal point at the image centre."""
    fx = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
    return Camera(
        fx=fx,
        fy=fx,
        cx=width / 2 + center_offset,
        cy=height / 2 + center_offset,
        width=width,
        height=height,
        world_to_cam=np.eye(4) if world_to_cam is None else world_to_cam,
    )


def to_camera_frame(points, cam: Camera) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    return points @ cam.rotation.T + cam.translation


def project_points(points, cam: Camera, z_near: float = Z_NEAR):
    """Vectorised projection of an (N, 3) array of world points.

    Returns (pixels, valid, xy, depth): integer (N, 2) pixel indices
    (meaningless where not valid), the visibility mask, continuous
    sub-pixel positions and camera-frame depths.
    """
    pc = to_camera_frame(np.atleast_2d(points), cam)
    z = pc[:, 2]
    in_front = z > z_near
    safe_z = np.where(in_front, z, 1.0)
    x = cam.fx * pc[:, 0] / safe_z + cam.cx
    y = cam.fy * pc[:, 1] / safe_z + cam.cy
    xy = np.stack([x, y], axis=1)
    with np.errstate(invalid="ignore"):
        u = np.floor(x)
        v = np.floor(y)
    valid = in_front & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    pixels = np.zeros((len(z), 2), dtype=np.int64)
    pixels[valid, 0] = u[valid].astype(np.int64)
    pixels[valid, 1] = v[valid].astype(np.int64)
    return pixels, valid, xy, z


def project(p, cam: Camera, z_near: float = Z_NEAR) -> Optional[tuple[int, int]]:
    """Integer pixel occupied by world point `p`, or None when invisible."""
    pixels, valid, _, _ = project_points(np.asarray(p, dtype=np.float64)[None], cam, z_near)
    if not valid[0]:
        return None
    return int(pixels[0, 0]), int(pixels[0, 1])


def project_continuous(p, cam: Camera) -> tuple[float, float, float]:
    """Sub-pixel position and camera-frame depth, without bounds checks."""
    pc = to_camera_frame(np.asarray(p, dtype=np.float64)[None], cam)[0]
    return cam.fx * pc[0] / pc[2] + cam.cx, cam.fy * pc[1] / pc[2] + cam.cy, pc[2]


def pixel_rays(cam: Camera, u, v) -> np.ndarray:
    """Camera-frame ray directions with unit z through pixel centres."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    x = (u + 0.5 - cam.cx) / cam.fx
    y = (v + 0.5 - cam.cy) / cam.fy
    return np.stack([x, y, np.ones_like(x)], axis=-1)


def unproject_points(u, v, depth, cam: Camera) -> np.ndarray:
    """World points at camera-frame depth `depth` behind pixel centres (u, v)."""
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(~(depth > 0)):
        raise GeometryError("invalid depth")
    d = pixel_rays(cam, u, v) * depth[..., None] - cam.translation
    r = cam.rotation
    # explicit sums instead of a BLAS product: fixed rounding on every machine
    return d[..., 0:1] * r[0] + d[..., 1:2] * r[1] + d[..., 2:3] * r[2]


def unproject(px, depth: float, cam: Camera) -> np.ndarray:
    u, v = px
    return unproject_points(np.array([u]), np.array([v]), np.array([depth], dtype=np.float64), cam)[0]


def pixel_footprint(depth, cam: Camera):
    """World-space width covered by one pixel at the given depth."""
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(~(depth > 0)):
        raise GeometryError("invalid depth")
    out = depth / cam.fx
    return float(out) if out.ndim == 0 else out


def save_camera(cam: Camera, path) -> None:
    with open(path, "w") as f:
        json.dump(cam.to_dict(), f, indent=2)


def load_camera(path) -> Camera:
    with open(path) as f:
        return Camera.from_dict(json.load(f))
