"""Graph linear layers over Gaussian nodes and the multi-layer forward pass."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.special import erf

from .graph import EdgeOperator, GaussianGraph

AGGREGATIONS = ("mean", "nearest-depth", "sum")
ACTIVATIONS = ("relu", "gelu", "identity")


class NetworkError(ValueError):
    pass


# -- activations ---------------------------------------------------------------

def activate(x, kind: str):
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "gelu":
        return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))
    if kind == "identity":
        return x
    raise NetworkError(f"unknown activation {kind!r}")


def activate_grad(x, kind: str):
    """Derivative of `activate` at x; relu'(0) is taken as 0."""
    if kind == "relu":
        return (x > 0).astype(np.float64)
    if kind == "gelu":
        return 0.5 * (1.0 + erf(x / math.sqrt(2.0))) + x * np.exp(-0.5 * x * x) / math.sqrt(2 * math.pi)
    if kind == "identity":
        return np.ones_like(x)
    raise NetworkError(f"unknown activation {kind!r}")


# -- configuration and weights -------------------------------------------------

@dataclass
class NetworkConfig:
    num_layers: int = 2
    feat_dim: int = 32
    feat_dims: Optional[list] = None  # per-layer widths, length num_layers + 1
    adjacency_mode: str = "row"
    aggregation: str = "mean"
    activation: str = "relu"
    bias: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.num_layers < 1:
            raise NetworkError("num_layers must be >= 1")
        if self.feat_dims is None:
            self.feat_dims = [self.feat_dim] * (self.num_layers + 1)
        self.feat_dims = [int(d) for d in self.feat_dims]
        if len(self.feat_dims) != self.num_layers + 1:
            raise NetworkError("feat_dims must have num_layers + 1 entries")
        if self.aggregation not in AGGREGATIONS:
            raise NetworkError(f"unknown aggregation {self.aggregation!r}")
        if self.activation not in ACTIVATIONS:
            raise NetworkError(f"unknown activation {self.activation!r}")

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "feat_dims": list(self.feat_dims),
            "adjacency_mode": self.adjacency_mode,
            "aggregation": self.aggregation,
            "activation": self.activation,
            "bias": self.bias,
            "seed": self.seed,
        }

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class GraphLayerWeights:
    W: np.ndarray
    bias: Optional[np.ndarray] = None
    activation: str = "relu"

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64)
            if self.bias.shape != (self.W.shape[1],):
                raise NetworkError("bias length must match W's output width")
        if not np.all(np.isfinite(self.W)):
            raise NetworkError("non-finite weight")


def glorot(rng, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_weights(config: NetworkConfig, seed: Optional[int] = None) -> list:
    rng = np.random.default_rng(config.seed if seed is None else seed)
    layers = []
    for k in range(config.num_layers):
        fi, fo = config.feat_dims[k], config.feat_dims[k + 1]
        layers.append(GraphLayerWeights(
            glorot(rng, fi, fo),
            np.zeros(fo) if config.bias else None,
            config.activation,
        ))
    return layers


def identity_weights(dim: int, num_layers: int = 1, activation: str = "identity") -> list:
    return [GraphLayerWeights(np.eye(dim), None, activation) for _ in range(num_layers)]


# -- weight container ---------------------------------------------------------

MAGIC = b"GGNW"
VERSION = 1


def save_weights(path, arrays: dict, config_hash: str = "", meta: Optional[dict] = None) -> None:
    """Named float64 arrays: magic, version, config hash, then little-endian blocks."""
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        h = config_hash.encode("ascii")
        f.write(struct.pack("<H", len(h)) + h)
        f.write(struct.pack("<I", len(meta_bytes)) + meta_bytes)
        f.write(struct.pack("<I", len(arrays)))
        for name in arrays:
            a = np.ascontiguousarray(arrays[name], dtype="<f8")
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)) + nb)
            f.write(struct.pack("<B", a.ndim))
            f.write(struct.pack(f"<{a.ndim}I", *a.shape))
            f.write(a.tobytes())


def load_weights(path, expected_hash: Optional[str] = None):
    """Returns (arrays, config_hash, meta)."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise NetworkError("not a weight file (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise NetworkError(f"weight file version {version} != supported {VERSION}")
    off = 8
    (hl,) = struct.unpack_from("<H", data, off)
    off += 2
    config_hash = data[off:off + hl].decode("ascii")
    off += hl
    if expected_hash is not None and config_hash != expected_hash:
        raise NetworkError("weight file config hash mismatch")
    (ml,) = struct.unpack_from("<I", data, off)
    off += 4
    meta = json.loads(data[off:off + ml].decode())
    off += ml
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (nl,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nl].decode()
        off += nl
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
    return arrays, config_hash, meta


def layers_to_arrays(layers, prefix: str = "layer") -> dict:
    out = {}
    for k, layer in enumerate(layers):
        out[f"{prefix}{k}.W"] = layer.W
        if layer.bias is not None:
            out[f"{prefix}{k}.b"] = layer.bias
    return out


def layers_from_arrays(arrays: dict, activation: str, prefix: str = "layer") -> list:
    layers = []
    k = 0
    while f"{prefix}{k}.W" in arrays:
        layers.append(GraphLayerWeights(arrays[f"{prefix}{k}.W"], arrays.get(f"{prefix}{k}.b"), activation))
        k += 1
    return layers


# -- forward ------------------------------------------------------------------

def gather_matrix(E: EdgeOperator, aggregation: str = "mean") -> sp.csr_matrix:
    """Sparse (targets x sources) matrix realising E^{j->i} with the chosen aggregation."""
    counts = E.counts
    if aggregation == "mean":
        data = np.repeat(1.0 / np.maximum(counts, 1), counts)
        return sp.csr_matrix((data, E.src, E.indptr), shape=(E.num_targets, E.num_sources))
    if aggregation == "sum":
        return sp.csr_matrix((np.ones(E.nnz), E.src, E.indptr), shape=(E.num_targets, E.num_sources))
    if aggregation == "nearest-depth":
        occupied = np.flatnonzero(counts > 0)
        first = E.src[E.indptr[occupied]]
        return sp.csr_matrix((np.ones(len(occupied)), (occupied, first)),
                             shape=(E.num_targets, E.num_sources))
    raise NetworkError(f"unknown aggregation {aggregation!r}")


def gather_features(E: EdgeOperator, f_j, aggregation: str = "mean") -> np.ndarray:
    f_j = np.asarray(f_j, dtype=np.float64)
    if f_j.ndim != 2 or f_j.shape[0] != E.num_sources:
        raise NetworkError(f"feature rows {f_j.shape[0]} do not match operator sources {E.num_sources}")
    if E.is_identity():
        return f_j.copy()
    return np.asarray(gather_matrix(E, aggregation) @ f_j)


def aggregate(graph: GaussianGraph, features, aggregation: str = "mean") -> list:
    """Per node i: sum over retained j (ascending) of a~_ij * E^{j->i} f_j."""
    n = graph.num_nodes
    if len(features) != n:
        raise NetworkError("need one feature array per node")
    dims = {np.shape(f)[1] for f in features}
    if len(dims) != 1:
        raise NetworkError("feature dimension differs between nodes")
    out = []
    for i in range(n):
        acc = None
        for j in graph.neighbors(i):
            w = graph.scaled_adjacency[i, j]
            if w == 0:
                continue
            term = w * gather_features(graph.operator(i, j), features[j], aggregation)
            acc = term if acc is None else acc + term
        out.append(acc)
    return out


def dense_layer(x, layer: GraphLayerWeights):
    if x.shape[1] != layer.W.shape[0]:
        raise NetworkError(f"input width {x.shape[1]} != weight rows {layer.W.shape[0]}")
    z = x @ layer.W
    if layer.bias is not None:
        z = z + layer.bias
    return z


def graph_linear(graph: GaussianGraph, features, layer: GraphLayerWeights, aggregation: str = "mean") -> list:
    gathered = aggregate(graph, features, aggregation)
    return [activate(dense_layer(g, layer), layer.activation) for g in gathered]


def forward(graph: GaussianGraph, features, weights, config: Optional[NetworkConfig] = None) -> list:
    """Apply the graph layers in sequence; geometry stays fixed across layers."""
    aggregation = "mean"
    if config is not None:
        if len(weights) != config.num_layers:
            raise NetworkError(f"expected {config.num_layers} layers, got {len(weights)}")
        for k, layer in enumerate(weights):
            if layer.W.shape != (config.feat_dims[k], config.feat_dims[k + 1]):
                raise NetworkError(f"layer {k} shape {layer.W.shape} does not match config")
        aggregation = config.aggregation
    f = [np.asarray(x, dtype=np.float64) for x in features]
    for layer in weights:
        f = graph_linear(graph, f, layer, aggregation)
    return f
