"""Analytic multi-view scenes: ray tracing, oracle depth and per-pixel features.

These stand in for a learned image backbone. Every output is a pure
function of the scene, the camera and (for depth noise) an explicit seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .geometry import Camera, Z_NEAR, look_at, make_camera, pixel_rays

FAR_DEPTH = 100.0


class SceneError(ValueError):
    pass


def _color(c) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    if c.shape != (3,) or np.any(c < 0) or np.any(c > 1):
        raise SceneError(f"albedo values must be RGB in [0, 1], got {c!r}")
    return c


@dataclass(frozen=True)
class Solid:
    color: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "color", _color(self.color))

    def __call__(self, points, local=None):
        return np.broadcast_to(self.color, (len(points), 3)).copy()


@dataclass(frozen=True)
class Checker:
    cell: float
    color_a: np.ndarray
    color_b: np.ndarray

    def __post_init__(self):
        if not self.cell > 0:
            raise SceneError("checker cell size must be positive")
        object.__setattr__(self, "color_a", _color(self.color_a))
        object.__setattr__(self, "color_b", _color(self.color_b))

    def __call__(self, points, local=None):
        coords = points if local is None else local
        parity = np.floor(coords / self.cell).astype(np.int64).sum(axis=1) % 2
        return np.where(parity[:, None] == 0, self.color_a, self.color_b)


@dataclass(frozen=True)
class Gradient:
    origin: np.ndarray
    direction: np.ndarray
    length: float
    color0: np.ndarray
    color1: np.ndarray

    def __post_init__(self):
        if not self.length > 0:
            raise SceneError("gradient length must be positive")
        d = np.asarray(self.direction, dtype=np.float64)
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "direction", d / np.linalg.norm(d))
        object.__setattr__(self, "color0", _color(self.color0))
        object.__setattr__(self, "color1", _color(self.color1))

    def __call__(self, points, local=None):
        t = np.clip((points - self.origin) @ self.direction / self.length, 0.0, 1.0)
        return self.color0 + t[:, None] * (self.color1 - self.color0)


Albedo = Union[Solid, Checker, Gradient]


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float
    albedo: Albedo

    def __post_init__(self):
        if not self.radius > 0:
            raise SceneError("sphere radius must be positive")
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))

    def intersect(self, origin, dirs):
        oc = origin - self.center
        a = np.einsum("ij,ij->i", dirs, dirs)
        b = dirs @ oc
        c = oc @ oc - self.radius**2
        disc = b * b - a * c
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t0 = (-b - sq) / a
        t1 = (-b + sq) / a
        t = np.where(t0 > Z_NEAR, t0, t1)
        t = np.where(hit & (t > Z_NEAR), t, np.inf)
        return t, None

    def implicit(self, points):
        return np.linalg.norm(points - self.center, axis=1) - self.radius


@dataclass(frozen=True)
class Plane:
    point: np.ndarray
    normal: np.ndarray
    extent: Optional[tuple] = None  # half-widths along (u_axis, v_axis); None = unbounded
    albedo: Albedo = field(default_factory=lambda: Solid((0.5, 0.5, 0.5)))
    u_axis: Optional[np.ndarray] = None

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise SceneError("plane normal must be unit length")
        object.__setattr__(self, "point", np.asarray(self.point, dtype=np.float64))
        object.__setattr__(self, "normal", n)
        if self.u_axis is None:
            helper = np.array([0.0, 1.0, 0.0]) if abs(n[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
            u = np.cross(helper, n)
        else:
            u = np.asarray(self.u_axis, dtype=np.float64)
            u = u - (u @ n) * n
        object.__setattr__(self, "u_axis", u / np.linalg.norm(u))

    @property
    def v_axis(self):
        return np.cross(self.normal, self.u_axis)

    def local(self, points):
        rel = points - self.point
        return np.stack([rel @ self.u_axis, rel @ self.v_axis], axis=1)

    def intersect(self, origin, dirs):
        denom = dirs @ self.normal
        ok = np.abs(denom) > 1e-12
        t = np.where(ok, ((self.point - origin) @ self.normal) / np.where(ok, denom, 1.0), np.inf)
        t = np.where(t > Z_NEAR, t, np.inf)
        local = None
        if self.extent is not None:
            pts = origin + np.where(np.isfinite(t), t, 0.0)[:, None] * dirs
            local = self.local(pts)
            inside = (np.abs(local[:, 0]) <= self.extent[0]) & (np.abs(local[:, 1]) <= self.extent[1])
            t = np.where(inside, t, np.inf)
        return t, local

    def implicit(self, points):
        return (points - self.point) @ self.normal


Primitive = Union[Sphere, Plane]


@dataclass(frozen=True)
class AnalyticScene:
    primitives: tuple = ()
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))
        object.__setattr__(self, "background", _color(self.background))


@dataclass(frozen=True, eq=False)
class ViewBundle:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W) camera-frame z; 0 where nothing was hit
    hit: np.ndarray  # (H, W) bool
    camera: Camera

    @property
    def height(self):
        return self.image.shape[0]

    @property
    def width(self):
        return self.image.shape[1]


def raytrace(scene: AnalyticScene, cam: Camera) -> ViewBundle:
    """Flat-shaded ray cast through every pixel centre."""
    h, w = cam.height, cam.width
    v, u = np.mgrid[0:h, 0:w]
    # direction with unit camera-z, so the ray parameter equals the depth
    dirs = pixel_rays(cam, u.ravel(), v.ravel()) @ cam.rotation
    origin = cam.center

    best_t = np.full(h * w, np.inf)
    best_id = np.full(h * w, -1, dtype=np.int64)
    locals_ = []
    for k, prim in enumerate(scene.primitives):
        t, local = prim.intersect(origin, dirs)
        locals_.append(local)
        closer = t < best_t
        best_t[closer] = t[closer]
        best_id[closer] = k

    hit = best_id >= 0
    image = np.broadcast_to(scene.background, (h * w, 3)).copy()
    points = origin + np.where(hit, best_t, 0.0)[:, None] * dirs
    for k, prim in enumerate(scene.primitives):
        sel = best_id == k
        if not sel.any():
            continue
        pts = points[sel]
        local = prim.local(pts) if isinstance(prim, Plane) else None
        image[sel] = prim.albedo(pts, local)
    depth = np.where(hit, best_t, 0.0)
    return ViewBundle(
        image=image.reshape(h, w, 3),
        depth=depth.reshape(h, w),
        hit=hit.reshape(h, w),
        camera=cam,
    )


def oracle_depth(view: ViewBundle, noise_sigma: float = 0.0, seed: int = 0,
                 far_depth: float = FAR_DEPTH) -> np.ndarray:
    """Oracle depth with seeded multiplicative log-normal noise."""
    if noise_sigma < 0:
        raise SceneError("noise_sigma must be non-negative")
    depth = np.where(view.hit, view.depth, far_depth)
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        depth = depth * np.exp(noise_sigma * rng.standard_normal(depth.shape))
    return depth


def encode_features(view: ViewBundle, feat_dim: int) -> np.ndarray:
    """Deterministic per-pixel features, shape (H*W, feat_dim).

    Channel order: R, G, B, normalised inverse depth, no-hit flag, then
    sin/cos encodings of u/W and v/H at frequencies 1 and 2. Truncated or
    zero-padded to `feat_dim`.
    """
    if feat_dim < 8:
        raise SceneError("feature dim too small")
    h, w = view.height, view.width
    v, u = np.mgrid[0:h, 0:w]
    inv = np.zeros((h, w))
    if view.hit.any():
        inv[view.hit] = view.depth[view.hit].min() / view.depth[view.hit]
    chans = [view.image[..., 0], view.image[..., 1], view.image[..., 2], inv, (~view.hit).astype(np.float64)]
    for freq in (1, 2):
        for coord in ((u + 0.5) / w, (v + 0.5) / h):
            chans.append(np.sin(2 * math.pi * freq * coord))
            chans.append(np.cos(2 * math.pi * freq * coord))
    base = np.stack([c.reshape(-1) for c in chans], axis=1)
    out = np.zeros((h * w, feat_dim))
    k = min(feat_dim, base.shape[1])
    out[:, :k] = base[:, :k]
    return out


# -- scene and rig (de)serialisation ----------------------------------------

def albedo_from_dict(d: dict) -> Albedo:
    kind = d.get("type", "solid")
    if kind == "solid":
        return Solid(d["color"])
    if kind == "checker":
        a, b = d["colors"]
        return Checker(float(d["cell"]), a, b)
    if kind == "gradient":
        c0, c1 = d["colors"]
        return Gradient(d["origin"], d["direction"], float(d["length"]), c0, c1)
    raise SceneError(f"unknown albedo type {kind!r}")


def albedo_to_dict(a: Albedo) -> dict:
    if isinstance(a, Solid):
        return {"type": "solid", "color": a.color.tolist()}
    if isinstance(a, Checker):
        return {"type": "checker", "cell": a.cell, "colors": [a.color_a.tolist(), a.color_b.tolist()]}
    return {"type": "gradient", "origin": a.origin.tolist(), "direction": a.direction.tolist(),
            "length": a.length, "colors": [a.color0.tolist(), a.color1.tolist()]}


def scene_from_dict(d: dict) -> AnalyticScene:
    prims = []
    for p in d.get("primitives", []):
        albedo = albedo_from_dict(p.get("albedo", {"type": "solid", "color": [0.5, 0.5, 0.5]}))
        if p["type"] == "sphere":
            prims.append(Sphere(p["center"], float(p["radius"]), albedo))
        elif p["type"] == "plane":
            extent = p.get("extent")
            prims.append(Plane(p["point"], p["normal"], None if extent is None else tuple(extent),
                               albedo, p.get("u_axis")))
        else:
            raise SceneError(f"unknown primitive type {p['type']!r}")
    return AnalyticScene(prims, d.get("background", [0.0, 0.0, 0.0]))


def scene_to_dict(scene: AnalyticScene) -> dict:
    prims = []
    for p in scene.primitives:
        if isinstance(p, Sphere):
            prims.append({"type": "sphere", "center": p.center.tolist(), "radius": p.radius,
                          "albedo": albedo_to_dict(p.albedo)})
        else:
            prims.append({"type": "plane", "point": p.point.tolist(), "normal": p.normal.tolist(),
                          "extent": None if p.extent is None else list(p.extent),
                          "u_axis": p.u_axis.tolist(), "albedo": albedo_to_dict(p.albedo)})
    return {"background": scene.background.tolist(), "primitives": prims}


@dataclass(frozen=True)
class Rig:
    """Inward-facing camera arc around `target`."""

    target: tuple = (0.0, 0.0, 0.0)
    radius: float = 3.0
    height: float = 0.0
    spacing_deg: float = 15.0
    fov_deg: float = 60.0
    up: tuple = (0.0, 1.0, 0.0)

    def camera_at(self, yaw_deg: float, width: int, height: int) -> Camera:
        yaw = math.radians(yaw_deg)
        target = np.asarray(self.target, dtype=np.float64)
        eye = target + np.array([self.radius * math.sin(yaw), self.height, -self.radius * math.cos(yaw)])
        return make_camera(width, height, self.fov_deg, look_at(eye, target, self.up))

    def input_yaws(self, n: int) -> list:
        return [(k - (n - 1) / 2) * self.spacing_deg for k in range(n)]

    def target_yaws(self, n: int, max_targets: int = 3) -> list:
        yaws = self.input_yaws(n)
        if n == 1:
            return yaws
        mids = [(a + b) / 2 for a, b in zip(yaws[:-1], yaws[1:])]
        if len(mids) <= max_targets:
            return mids
        idx = np.linspace(0, len(mids) - 1, max_targets).round().astype(int)
        return [mids[i] for i in idx]

    def cameras(self, n: int, width: int, height: int) -> list:
        return [self.camera_at(y, width, height) for y in self.input_yaws(n)]

    def targets(self, n: int, width: int, height: int, max_targets: int = 3) -> list:
        return [self.camera_at(y, width, height) for y in self.target_yaws(n, max_targets)]


def load_scene_file(path):
    """Read a scene JSON; returns (scene, rig or None)."""
    with open(path) as f:
        d = json.load(f)
    scene = scene_from_dict(d["scene"] if "scene" in d else d)
    rig = Rig(**{k: tuple(v) if isinstance(v, list) else v for k, v in d["rig"].items()}) if "rig" in d else None
    return scene, rig


def render_views(scene: AnalyticScene, cameras: Sequence[Camera]) -> list:
    return [raytrace(scene, cam) for cam in cameras]
