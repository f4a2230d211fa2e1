"""Pipeline configuration with a canonical hash."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    width: int = 256
    height: int = 256
    feat_dim: int = 32
    num_layers: int = 2
    top_n: int = 3
    tau: float = 0.25
    lam_mode: str = "relative"
    kappa: float = 1.5
    lam: float = 0.0
    similarity: str = "min"
    traversal: str = "deterministic-bfs"
    adjacency_mode: str = "row"
    aggregation: str = "mean"
    activation: str = "relu"
    bias: bool = True
    seed: int = 0
    noise_sigma: float = 0.0
    far_depth: float = 100.0
    gaussians_per_pixel: int = 1  # count arithmetic only
    max_targets: int = 3
    render_frames: int = 3
    band_rows: int = 16
    fit_steps: int = 500
    fit_lr: float = 1e-3
    fit_resolution: int = 32
    fit_views: int = 4
    view_counts: list = field(default_factory=lambda: [2, 4, 8, 16])
    modes: list = field(default_factory=lambda: ["ggn", "union-baseline", "no-linear", "no-pooling", "vanilla"])

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ConfigError("resolution must be positive")
        if self.feat_dim < 8:
            raise ConfigError("feat_dim must be >= 8")
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        if self.top_n < 0:
            raise ConfigError("top_n must be >= 0")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.lam_mode not in ("relative", "absolute"):
            raise ConfigError(f"unknown lam_mode {self.lam_mode!r}")
        for m in self.modes:
            if m not in MODES:
                raise ConfigError(f"unknown mode {m!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]

    def replace(self, **kw) -> "PipelineConfig":
        return dataclasses.replace(self, **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        try:
            with open(path) as f:
                d = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        return cls.from_dict(d)


# (layer kind, pooling on)
MODES = {
    "ggn": ("graph", True),
    "union-baseline": ("edgeless", False),
    "no-linear": ("none", True),
    "no-pooling": ("graph", False),
    "vanilla": ("none", False),
}
