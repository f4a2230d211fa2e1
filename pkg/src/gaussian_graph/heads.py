"""Prediction heads: pooled Gaussian features -> rotation, scale, opacity, colour."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gaussians import SceneGaussians
from .ggn import activate, glorot

HEAD_DIMS = {"rotation": 4, "scale": 3, "opacity": 1, "color": 3}
SCALE_CLAMP = 5.0
# keeps opacity/colour strictly inside (0, 1) so logits stay finite on disk
PROB_EPS = 1e-6


@dataclass
class MLP:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def hidden(self, x, activation):
        z1 = x @ self.W1 + self.b1
        return z1, activate(z1, activation)

    def __call__(self, x, activation):
        _, h = self.hidden(x, activation)
        return h @ self.W2 + self.b2


@dataclass
class HeadWeights:
    rotation: MLP
    scale: MLP
    opacity: MLP
    color: MLP
    activation: str = "relu"

    def items(self):
        return [(name, getattr(self, name)) for name in HEAD_DIMS]

    def to_arrays(self) -> dict:
        out = {}
        for name, mlp in self.items():
            for part in ("W1", "b1", "W2", "b2"):
                out[f"head.{name}.{part}"] = getattr(mlp, part)
        return out

    @classmethod
    def from_arrays(cls, arrays: dict, activation: str = "relu") -> "HeadWeights":
        mlps = {name: MLP(*(np.asarray(arrays[f"head.{name}.{p}"], dtype=np.float64)
                            for p in ("W1", "b1", "W2", "b2")))
                for name in HEAD_DIMS}
        return cls(activation=activation, **mlps)

    def copy(self) -> "HeadWeights":
        return HeadWeights.from_arrays({k: v.copy() for k, v in self.to_arrays().items()}, self.activation)


def init_heads(feat_dim: int, seed: int = 0, activation: str = "relu") -> HeadWeights:
    rng = np.random.default_rng([seed, 7])
    mlps = {}
    for name, out in HEAD_DIMS.items():
        b2 = np.zeros(out)
        if name == "rotation":
            b2[0] = 1.0
        mlps[name] = MLP(glorot(rng, feat_dim, feat_dim), np.zeros(feat_dim), glorot(rng, feat_dim, out), b2)
    return HeadWeights(activation=activation, **mlps)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def raw_outputs(features, heads: HeadWeights) -> dict:
    features = np.asarray(features, dtype=np.float64)
    if features.shape[1] != heads.color.W1.shape[0]:
        raise ValueError(f"feature width {features.shape[1]} != head input {heads.color.W1.shape[0]}")
    return {name: mlp(features, heads.activation) for name, mlp in heads.items()}


def activate_outputs(raw: dict, base_scale):
    """Map raw head outputs to valid splat parameters. Returns (params, n_fallback)."""
    r = raw["rotation"]
    norm = np.linalg.norm(r, axis=1, keepdims=True)
    degenerate = norm[:, 0] == 0
    quats = np.where(degenerate[:, None], np.array([1.0, 0.0, 0.0, 0.0]), r / np.where(norm == 0, 1.0, norm))
    scales = np.asarray(base_scale, dtype=np.float64)[:, None] * np.exp(np.clip(raw["scale"], -SCALE_CLAMP, SCALE_CLAMP))
    opac = np.clip(sigmoid(raw["opacity"][:, 0]), PROB_EPS, 1 - PROB_EPS)
    color = np.clip(sigmoid(raw["color"]), PROB_EPS, 1 - PROB_EPS)
    return {"quats": quats, "scales": scales, "opacities": opac, "colors": color}, int(degenerate.sum())


def predict_params(pooled, heads: HeadWeights):
    """SceneGaussians for a PooledSet; returns (scene, fallback_count)."""
    raw = raw_outputs(pooled.features, heads)
    p, fallback = activate_outputs(raw, pooled.base_scales())
    scene = SceneGaussians(pooled.means.copy(), p["quats"], p["scales"], p["opacities"], p["colors"],
                           pooled.source_view.copy())
    return scene, fallback
