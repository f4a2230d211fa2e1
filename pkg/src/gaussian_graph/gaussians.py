"""Gaussian data model: pixel-aligned nodes, scene splats, covariance, PLY I/O."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import Camera, GeometryError, unproject_points

SH_C0 = 0.28209479177387814


class SplatFileError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass(frozen=True)
class Gaussian:
    mean: np.ndarray
    feature: np.ndarray
    source_view: int
    pixel: tuple


@dataclass(eq=False)
class GaussianNode:
    """One view's group of Gaussians, stored column-wise.

    A freshly lifted node holds exactly H*W Gaussians in row-major pixel
    order. After merging, the list may grow; each row keeps the view and
    pixel it was lifted from.
    """

    means: np.ndarray  # (K, 3)
    features: np.ndarray  # (K, D)
    source_view: np.ndarray  # (K,) int
    pixel_index: np.ndarray  # (K,) flat pixel index in the source view
    source_depth: np.ndarray  # (K,) depth at lift time
    camera: Camera

    def __len__(self):
        return len(self.means)

    def __getitem__(self, k) -> Gaussian:
        w = self.camera.width
        p = int(self.pixel_index[k])
        return Gaussian(self.means[k], self.features[k], int(self.source_view[k]), (p % w, p // w))

    @property
    def feat_dim(self) -> int:
        return self.features.shape[1]

    @property
    def pixels(self) -> np.ndarray:
        w = self.camera.width
        return np.stack([self.pixel_index % w, self.pixel_index // w], axis=1)

    @property
    def origin_ids(self) -> np.ndarray:
        """Globally unique id of each Gaussian: view * H*W + pixel."""
        return self.source_view * self.camera.num_pixels + self.pixel_index

    def with_features(self, features) -> "GaussianNode":
        features = np.asarray(features, dtype=np.float64)
        if features.shape[0] != len(self):
            raise ValueError("feature rows must match the Gaussian count")
        return GaussianNode(self.means, features, self.source_view, self.pixel_index,
                            self.source_depth, self.camera)

    def take(self, idx) -> "GaussianNode":
        return GaussianNode(self.means[idx], self.features[idx], self.source_view[idx],
                            self.pixel_index[idx], self.source_depth[idx], self.camera)

    def concat(self, other: "GaussianNode") -> "GaussianNode":
        """Append `other`'s Gaussians, keeping this node's camera."""
        return GaussianNode(
            np.concatenate([self.means, other.means]),
            np.concatenate([self.features, other.features]),
            np.concatenate([self.source_view, other.source_view]),
            np.concatenate([self.pixel_index, other.pixel_index]),
            np.concatenate([self.source_depth, other.source_depth]),
            self.camera,
        )


def lift_view(camera: Camera, depth, features, view_index: int = 0) -> GaussianNode:
    """One Gaussian per pixel, unprojected to `depth` along the pixel-centre ray."""
    h, w = camera.height, camera.width
    depth = np.asarray(depth, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    if depth.shape != (h, w):
        raise ValueError(f"depth map shape {depth.shape} does not match camera {(h, w)}")
    if features.ndim != 2 or features.shape[0] != h * w:
        raise ValueError("features must have shape (H*W, feat_dim)")
    if np.any(~(depth > 0)):
        raise GeometryError("invalid depth")
    v, u = np.mgrid[0:h, 0:w]
    d = depth.reshape(-1)
    means = unproject_points(u.reshape(-1), v.reshape(-1), d, camera)
    n = h * w
    return GaussianNode(
        means=means,
        features=features.copy(),
        source_view=np.full(n, view_index, dtype=np.int64),
        pixel_index=np.arange(n, dtype=np.int64),
        source_depth=d.copy(),
        camera=camera,
    )


def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrices from (w, x, y, z) quaternions; input normalised here."""
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    r = np.empty((len(q), 3, 3))
    r[:, 0, 0] = 1 - 2 * (y * y + z * z)
    r[:, 0, 1] = 2 * (x * y - w * z)
    r[:, 0, 2] = 2 * (x * z + w * y)
    r[:, 1, 0] = 2 * (x * y + w * z)
    r[:, 1, 1] = 1 - 2 * (x * x + z * z)
    r[:, 1, 2] = 2 * (y * z - w * x)
    r[:, 2, 0] = 2 * (x * z - w * y)
    r[:, 2, 1] = 2 * (y * z + w * x)
    r[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return r[0] if single else r


def assemble_covariance(quat, scales) -> np.ndarray:
    """Sigma = R S S^T R^T, batched over leading dimension if given."""
    quat = np.asarray(quat, dtype=np.float64)
    scales = np.asarray(scales, dtype=np.float64)
    if np.any(~(scales > 0)):
        raise GeometryError("degenerate scale")
    if np.any(np.linalg.norm(np.atleast_2d(quat), axis=1) == 0):
        raise GeometryError("zero quaternion")
    r = quat_to_rotmat(quat)
    m = r * scales[..., None, :]
    return m @ np.swapaxes(m, -1, -2)


@dataclass(eq=False)
class SceneGaussians:
    means: np.ndarray  # (K, 3)
    quats: np.ndarray  # (K, 4) unit, (w, x, y, z)
    scales: np.ndarray  # (K, 3) > 0
    opacities: np.ndarray  # (K,) in [0, 1]
    colors: np.ndarray  # (K, 3) in [0, 1]
    source_view: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.means)

    def covariances(self) -> np.ndarray:
        if len(self) == 0:
            return np.zeros((0, 3, 3))
        return assemble_covariance(self.quats, self.scales)

    def take(self, idx) -> "SceneGaussians":
        sv = None if self.source_view is None else self.source_view[idx]
        return SceneGaussians(self.means[idx], self.quats[idx], self.scales[idx],
                              self.opacities[idx], self.colors[idx], sv)

    @classmethod
    def empty(cls) -> "SceneGaussians":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.ones((0, 3)), np.zeros(0), np.zeros((0, 3)))


# -- PLY ---------------------------------------------------------------------

_FIELDS = (["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity"]
           + [f"scale_{i}" for i in range(3)] + [f"rot_{i}" for i in range(4)])
_PLY_TYPES = {"float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8"}


def _logit(p):
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return np.log(p) - np.log1p(-p)


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def write_splats(s: SceneGaussians, path, precision: str = "float", comments=()) -> None:
    """Binary little-endian PLY in the layout used by 3DGS viewers.

    precision="float" matches viewer expectations; "double" keeps float64
    values bit-exact through a round trip.
    """
    ptype = {"float": "float", "double": "double"}[precision]
    dt = np.dtype([(name, _PLY_TYPES[ptype]) for name in _FIELDS])
    rows = np.zeros(len(s), dtype=dt)
    if len(s):
        rows["x"], rows["y"], rows["z"] = s.means.T
        dc = (s.colors - 0.5) / SH_C0
        for i in range(3):
            rows[f"f_dc_{i}"] = dc[:, i]
            rows[f"scale_{i}"] = np.log(s.scales[:, i])
        rows["opacity"] = _logit(s.opacities)
        for i in range(4):
            rows[f"rot_{i}"] = s.quats[:, i]
    header = ["ply", "format binary_little_endian 1.0"]
    header += [f"comment {c}" for c in comments]
    header.append(f"element vertex {len(s)}")
    header += [f"property {ptype} {name}" for name in _FIELDS]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(rows.tobytes())


def read_splats(path) -> SceneGaussians:
    with open(path, "rb") as f:
        data = f.read()
    return parse_splats(data)


def parse_splats(data: bytes) -> SceneGaussians:
    offset = 0
    lines = []
    while True:
        end = data.find(b"\n", offset)
        if end < 0:
            raise SplatFileError("unterminated PLY header", offset)
        try:
            line = data[offset:end].decode("ascii").strip()
        except UnicodeDecodeError:
            raise SplatFileError("non-ASCII byte in PLY header", offset) from None
        lines.append((offset, line))
        offset = end + 1
        if line == "end_header":
            break
    if not lines or lines[0][1] != "ply":
        raise SplatFileError("missing 'ply' magic", 0)
    count = None
    props = []
    fmt_ok = False
    for off, line in lines[1:-1]:
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            if parts[1:] != ["binary_little_endian", "1.0"]:
                raise SplatFileError(f"unsupported format {' '.join(parts[1:])!r}", off)
            fmt_ok = True
        elif parts[0] == "element":
            if parts[1] != "vertex" or count is not None:
                raise SplatFileError(f"unexpected element {parts[1]!r}", off)
            try:
                count = int(parts[2])
            except (IndexError, ValueError):
                raise SplatFileError("bad vertex count", off) from None
        elif parts[0] == "property":
            if len(parts) != 3 or parts[1] not in _PLY_TYPES:
                raise SplatFileError(f"unsupported property declaration {line!r}", off)
            props.append((parts[2], _PLY_TYPES[parts[1]]))
        else:
            raise SplatFileError(f"unknown header keyword {parts[0]!r}", off)
    if not fmt_ok:
        raise SplatFileError("missing format line", 0)
    if count is None:
        raise SplatFileError("missing vertex element", 0)
    names = [p[0] for p in props]
    for name in _FIELDS:
        if name not in names and name not in ("nx", "ny", "nz"):
            raise SplatFileError(f"missing property {name!r}", offset)
    dt = np.dtype(props)
    expected = count * dt.itemsize
    if len(data) - offset < expected:
        raise SplatFileError(f"truncated body: need {expected} bytes, have {len(data) - offset}",
                             len(data))
    rows = np.frombuffer(data, dtype=dt, count=count, offset=offset)

    def col(name):
        return rows[name].astype(np.float64)

    means = np.stack([col("x"), col("y"), col("z")], axis=1).reshape(count, 3)
    colors = np.stack([col(f"f_dc_{i}") for i in range(3)], axis=1).reshape(count, 3) * SH_C0 + 0.5
    scales = np.exp(np.stack([col(f"scale_{i}") for i in range(3)], axis=1).reshape(count, 3))
    quats = np.stack([col(f"rot_{i}") for i in range(4)], axis=1).reshape(count, 4)
    return SceneGaussians(means, quats, scales, _sigmoid(col("opacity")), colors)


def write_sidecar(path, feat_dim: int, source_view, config_hash: str) -> None:
    hist = Counter(int(v) for v in (source_view if source_view is not None else []))
    with open(path, "w") as f:
        json.dump({
            "feat_dim": int(feat_dim),
            "view_histogram": {str(k): hist[k] for k in sorted(hist)},
            "config_hash": config_hash,
        }, f, indent=2, sort_keys=True)
