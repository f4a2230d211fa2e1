"""Gaussian Graph construction: overlap adjacency, pruning, scaling, edge operators."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gaussians import GaussianNode
from .geometry import Camera, Z_NEAR, project_points


class GraphError(ValueError):
    pass


@dataclass(eq=False)
class EdgeOperator:
    """Sparse pixel correspondence from a source node onto a target pixel grid.

    Target pixel n owns entries indptr[n]:indptr[n+1] of `src` (source
    Gaussian indices) and `depth` (their depths in the target camera),
    ordered by depth, then source index.
    """

    num_targets: int
    num_sources: int
    indptr: np.ndarray
    src: np.ndarray
    depth: np.ndarray

    @property
    def counts(self) -> np.ndarray:
        return np.diff(self.indptr)

    @property
    def nnz(self) -> int:
        return len(self.src)

    def sources_at(self, n: int) -> list:
        return self.src[self.indptr[n]:self.indptr[n + 1]].tolist()

    def target_of_entries(self) -> np.ndarray:
        return np.repeat(np.arange(self.num_targets), self.counts)

    def is_identity(self) -> bool:
        return (self.num_targets == self.num_sources and self.nnz == self.num_targets
                and np.array_equal(self.src, np.arange(self.num_targets))
                and np.array_equal(self.indptr, np.arange(self.num_targets + 1)))

    def dense(self) -> np.ndarray:
        """Binary (targets x sources) matrix; for tests on tiny inputs."""
        m = np.zeros((self.num_targets, self.num_sources))
        m[self.target_of_entries(), self.src] = 1.0
        return m

    def stats(self) -> dict:
        c = self.counts
        return {
            "entries": int(self.nnz),
            "occupied_pixels": int((c > 0).sum()),
            "max_per_pixel": int(c.max()) if len(c) else 0,
            "mean_per_occupied": float(c[c > 0].mean()) if (c > 0).any() else 0.0,
        }


def build_edge_operator_from_means(means, cam_i: Camera, z_near: float = Z_NEAR) -> EdgeOperator:
    pixels, valid, _, z = project_points(means, cam_i, z_near)
    src = np.flatnonzero(valid)
    target = pixels[src, 1] * cam_i.width + pixels[src, 0]
    depth = z[src]
    order = np.lexsort((src, depth, target))
    src, target, depth = src[order], target[order], depth[order]
    indptr = np.zeros(cam_i.num_pixels + 1, dtype=np.int64)
    np.cumsum(np.bincount(target, minlength=cam_i.num_pixels), out=indptr[1:])
    return EdgeOperator(cam_i.num_pixels, len(means), indptr, src.astype(np.int64), depth)


def build_edge_operator(v_j: GaussianNode, v_i: GaussianNode, z_near: float = Z_NEAR) -> EdgeOperator:
    """E^{j->i}: each Gaussian of v_j recorded at the pixel it occupies in v_i's camera."""
    return build_edge_operator_from_means(v_j.means, v_i.camera, z_near)


def overlap_ratio(v_j: GaussianNode, cam_i: Camera, z_near: float = Z_NEAR) -> float:
    """Fraction of v_j's means that land inside camera i's image in front of it."""
    if len(v_j) == 0:
        raise GraphError("empty node")
    _, valid, _, _ = project_points(v_j.means, cam_i, z_near)
    return float(np.count_nonzero(valid)) / len(v_j)


def build_adjacency(nodes) -> np.ndarray:
    """a_ii = 1; a_ij = share of node j visible from camera i."""
    n = len(nodes)
    if n < 1:
        raise GraphError("need at least one node")
    a = np.eye(n)
    for i in range(n):
        for j in range(n):
            if i != j:
                a[i, j] = overlap_ratio(nodes[j], nodes[i].camera)
    return a


def prune_topn(adjacency, n: int) -> list:
    """Undirected edges (i < j) kept when either endpoint ranks them in its top n.

    Zero-weight edges are never kept.
    """
    if n < 0:
        raise GraphError("top-n must be non-negative")
    a = np.asarray(adjacency, dtype=np.float64)
    size = len(a)
    kept = set()
    for i in range(size):
        cands = [j for j in range(size) if j != i and a[i, j] > 0]
        cands.sort(key=lambda j: (-a[i, j], j))
        for j in cands[:n]:
            kept.add((min(i, j), max(i, j)))
    return sorted(kept)


def masked_adjacency(adjacency, edges) -> np.ndarray:
    a = np.asarray(adjacency, dtype=np.float64)
    m = np.zeros_like(a)
    np.fill_diagonal(m, np.diag(a))
    for i, j in edges:
        m[i, j] = a[i, j]
        m[j, i] = a[j, i]
    return m


def scale_adjacency(adjacency, edges, mode: str = "row") -> np.ndarray:
    """D^-1 A (row) or D^-1/2 A D^-1/2 (symmetric) over retained entries."""
    m = masked_adjacency(adjacency, edges)
    deg = m.sum(axis=1)
    if np.any(deg <= 0):
        raise GraphError("zero degree")
    if mode == "row":
        return m / deg[:, None]
    if mode == "symmetric":
        s = 1.0 / np.sqrt(deg)
        return s[:, None] * m * s[None, :]
    raise GraphError(f"unknown adjacency mode {mode!r}")


@dataclass(eq=False)
class GaussianGraph:
    nodes: list
    adjacency: np.ndarray
    edges: list  # retained undirected pairs (i < j)
    scaled_adjacency: np.ndarray
    edge_operators: dict = field(default_factory=dict)  # (i, j) -> E^{j->i}

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    def neighbors(self, i: int) -> list:
        """Retained sources j feeding node i, including i itself, ascending."""
        out = {i}
        for a, b in self.edges:
            if a == i:
                out.add(b)
            elif b == i:
                out.add(a)
        return sorted(out)

    def edge_weight(self, i: int, j: int) -> float:
        return float(max(self.adjacency[i, j], self.adjacency[j, i]))

    def operator(self, i: int, j: int) -> EdgeOperator:
        key = (i, j)
        if key not in self.edge_operators:
            self.edge_operators[key] = build_edge_operator(self.nodes[j], self.nodes[i])
        return self.edge_operators[key]

    def summary(self) -> dict:
        return {
            "num_nodes": self.num_nodes,
            "adjacency": self.adjacency.tolist(),
            "scaled_adjacency": self.scaled_adjacency.tolist(),
            "edges": [list(e) for e in self.edges],
            "operators": {f"{j}->{i}": op.stats() for (i, j), op in sorted(self.edge_operators.items())},
        }


def build_graph(nodes, top_n: int = 3, mode: str = "row", build_operators: bool = True) -> GaussianGraph:
    adjacency = build_adjacency(nodes)
    edges = prune_topn(adjacency, top_n)
    graph = GaussianGraph(list(nodes), adjacency, edges, scale_adjacency(adjacency, edges, mode))
    if build_operators:
        for i in range(len(nodes)):
            for j in graph.neighbors(i):
                graph.operator(i, j)
    return graph


def connected_components(graph: GaussianGraph, tau: float = 0.25) -> list:
    """Components over retained edges whose weight reaches tau, ordered by smallest member."""
    n = graph.num_nodes
    adj = {i: [] for i in range(n)}
    for i, j in graph.edges:
        if graph.edge_weight(i, j) >= tau:
            adj[i].append(j)
            adj[j].append(i)
    seen = [False] * n
    comps = []
    for start in range(n):
        if seen[start]:
            continue
        stack, comp = [start], []
        seen[start] = True
        while stack:
            k = stack.pop()
            comp.append(k)
            for m in adj[k]:
                if not seen[m]:
                    seen[m] = True
                    stack.append(m)
        comps.append(sorted(comp))
    return comps
