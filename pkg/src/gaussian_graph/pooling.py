"""Gaussian Graph pooling: collapse each connected component into one node.

Within a component, nodes are merged one at a time into an accumulated node
that keeps the anchor view's camera. A Gaussian of the incoming node is
dropped when the accumulated node already has a Gaussian within the merge
threshold at the pixel it projects to in the anchor camera.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .gaussians import GaussianNode
from .geometry import Z_NEAR, project_points
from .graph import GaussianGraph, build_edge_operator_from_means, connected_components


class PoolingError(ValueError):
    pass


@dataclass
class PoolingConfig:
    lam_mode: str = "relative"  # "relative": kappa * pixel footprint; "absolute": lam world units
    kappa: float = 1.5
    lam: float = 0.0
    traversal: str = "deterministic-bfs"
    seed: int = 0
    tau: float = 0.25
    similarity: str = "min"  # "max" reproduces the literal max-over-matches rule

    def __post_init__(self):
        if self.lam_mode not in ("relative", "absolute"):
            raise PoolingError(f"unknown lambda mode {self.lam_mode!r}")
        if self.kappa < 0 or self.lam < 0:
            raise PoolingError("merge threshold must be non-negative")
        if self.traversal not in ("deterministic-bfs", "seeded-random"):
            raise PoolingError(f"unknown traversal {self.traversal!r}")
        if self.similarity not in ("min", "max"):
            raise PoolingError(f"unknown similarity reduction {self.similarity!r}")


@dataclass(eq=False)
class PooledSet:
    node: GaussianNode  # merged Gaussians; camera is meaningless across components
    cameras: list  # source camera per view index
    components: list = field(default_factory=list)  # per-component stats dicts

    def __len__(self):
        return len(self.node)

    @property
    def means(self):
        return self.node.means

    @property
    def features(self):
        return self.node.features

    @property
    def source_view(self):
        return self.node.source_view

    @property
    def origin_ids(self):
        return self.node.origin_ids

    def survivor_counts(self) -> dict:
        views, counts = np.unique(self.node.source_view, return_counts=True)
        return {int(v): int(c) for v, c in zip(views, counts)}

    def base_scales(self) -> np.ndarray:
        """Pixel footprint at each Gaussian's lift depth in its source camera."""
        fx = np.array([c.fx for c in self.cameras])
        return self.node.source_depth / fx[self.node.source_view]

    def stats(self) -> dict:
        return {
            "count": len(self),
            "survivors_per_view": {str(k): v for k, v in self.survivor_counts().items()},
            "components": self.components,
        }


def similarities(v_j: GaussianNode, v_i: GaussianNode, reduction: str = "min", z_near: float = Z_NEAR):
    """Similarity of every Gaussian of v_j against v_i, seen through v_i's camera.

    Returns (sim, matched_depth): sim is inf where the Gaussian lands on no
    occupied pixel; matched_depth is the camera depth of the Gaussian of v_i
    that realised the distance (nan where sim is inf).
    """
    cam = v_i.camera
    occ = build_edge_operator_from_means(v_i.means, cam, z_near)
    pixels, valid, _, _ = project_points(v_j.means, cam, z_near)
    m = len(v_j)
    sim = np.full(m, np.inf)
    matched_depth = np.full(m, np.nan)
    target = pixels[:, 1] * cam.width + pixels[:, 0]
    cnt = np.where(valid, occ.counts[np.where(valid, target, 0)], 0)
    has = np.flatnonzero(cnt > 0)
    if len(has) == 0:
        return sim, matched_depth
    c = cnt[has]
    seg_start = np.cumsum(c) - c
    offs = np.arange(c.sum()) - np.repeat(seg_start, c)
    entry = np.repeat(occ.indptr[target[has]], c) + offs
    seg = np.repeat(np.arange(len(has)), c)
    diff = v_j.means[has][seg] - v_i.means[occ.src[entry]]
    dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    key = dist if reduction == "min" else -dist
    # first entry per segment after ordering by (segment, distance, occupancy order)
    order = np.lexsort((offs, key, seg))
    best = order[seg_start]
    sim[has] = dist[best]
    matched_depth[has] = occ.depth[entry[best]]
    return sim, matched_depth


def similarity(v_j: GaussianNode, m: int, v_i: GaussianNode, reduction: str = "min") -> float:
    sim, _ = similarities(v_j.take(np.array([m])), v_i, reduction)
    return float(sim[0])


def merge_thresholds(matched_depth, cam, config: PoolingConfig) -> np.ndarray:
    if config.lam_mode == "absolute":
        return np.full(len(matched_depth), float(config.lam))
    return config.kappa * matched_depth / cam.fx


def merge_nodes(v_j: GaussianNode, v_i: GaussianNode, config: PoolingConfig):
    """v_i plus the Gaussians of v_j that are not within the threshold of v_i.

    Returns (merged node, stats).
    """
    sim, depth = similarities(v_j, v_i, config.similarity)
    thresh = merge_thresholds(depth, v_i.camera, config)
    with np.errstate(invalid="ignore"):
        drop = np.isfinite(sim) & (sim < thresh)
    keep = np.flatnonzero(~drop)
    merged = v_i.concat(v_j.take(keep))
    finite = np.isfinite(thresh)
    stats = {
        "incoming": len(v_j),
        "dropped": int(drop.sum()),
        "lambda_effective": thresh[finite],
    }
    return merged, stats


def _component_edges(graph: GaussianGraph, comp, tau):
    members = set(comp)
    return [(i, j) for i, j in graph.edges
            if i in members and j in members and graph.edge_weight(i, j) >= tau]


def merge_order(comp, graph: GaussianGraph, config: PoolingConfig) -> list:
    """Order in which the nodes of a component are folded together."""
    comp = sorted(comp)
    if len(comp) == 1:
        return comp
    edges = _component_edges(graph, comp, config.tau)
    weight = {}
    for i, j in edges:
        weight[(i, j)] = weight[(j, i)] = graph.edge_weight(i, j)

    if config.traversal == "seeded-random":
        rng = np.random.default_rng([config.seed, *comp])
        order = [comp[int(rng.integers(len(comp)))]]
    else:
        totals = {k: sum(w for (a, b), w in weight.items() if a == k) for k in comp}
        order = [min(comp, key=lambda k: (-totals[k], k))]
    done = set(order)
    while len(order) < len(comp):
        frontier = {}
        for (a, b), w in weight.items():
            if a in done and b not in done:
                frontier[b] = max(frontier.get(b, -np.inf), w)
        if not frontier:
            raise PoolingError("component is not connected")
        if config.traversal == "seeded-random":
            cands = sorted(frontier)
            nxt = cands[int(rng.integers(len(cands)))]
        else:
            nxt = min(frontier, key=lambda k: (-frontier[k], k))
        order.append(nxt)
        done.add(nxt)
    return order


def pool_component(comp, graph: GaussianGraph, features, config: PoolingConfig):
    """Fold a connected component into one node; returns (node, stats)."""
    order = merge_order(comp, graph, config)
    acc = graph.nodes[order[0]].with_features(features[order[0]])
    stats = {"nodes": order, "input": len(acc), "merges": []}
    lam = []
    for j in order[1:]:
        incoming = graph.nodes[j].with_features(features[j])
        stats["input"] += len(incoming)
        acc, s = merge_nodes(incoming, acc, config)
        lam.append(s.pop("lambda_effective"))
        stats["merges"].append({"node": j, **s})
    stats["output"] = len(acc)
    stats["drop_ratio"] = 1.0 - stats["output"] / stats["input"]
    if lam and sum(len(x) for x in lam):
        values = np.concatenate(lam)
        hist, edges = np.histogram(values, bins=10)
        stats["lambda_histogram"] = {"counts": hist.tolist(), "edges": edges.tolist()}
    return acc, stats


def union_nodes(nodes, features) -> GaussianNode:
    acc = nodes[0].with_features(features[0])
    for node, f in zip(nodes[1:], features[1:]):
        acc = acc.concat(node.with_features(f))
    return acc


def pool_graph(graph: GaussianGraph, features, config: Optional[PoolingConfig] = None) -> PooledSet:
    config = config or PoolingConfig()
    comps = connected_components(graph, config.tau)
    parts, stats = [], []
    for comp in comps:
        node, s = pool_component(comp, graph, features, config)
        parts.append(node)
        stats.append(s)
    merged = parts[0]
    for p in parts[1:]:
        merged = merged.concat(p)
    return PooledSet(merged, [n.camera for n in graph.nodes], stats)


def no_pooling(graph: GaussianGraph, features) -> PooledSet:
    node = union_nodes(graph.nodes, features)
    stats = [{"nodes": [i], "input": len(n), "output": len(n), "drop_ratio": 0.0, "merges": []}
             for i, n in enumerate(graph.nodes)]
    return PooledSet(node, [n.camera for n in graph.nodes], stats)
