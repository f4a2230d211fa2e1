import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import yaw_camera
from gaussian_graph.gaussians import lift_view
from gaussian_graph.geometry import look_at, make_camera, to_camera_frame
from gaussian_graph.graph import (GaussianGraph, GraphError, build_adjacency, build_edge_operator, build_graph,
                                  connected_components, overlap_ratio, prune_topn, scale_adjacency)
from gaussian_graph.synth import encode_features, oracle_depth, raytrace


def lift(scene, cams, feat_dim=8):
    out = []
    for k, cam in enumerate(cams):
        view = raytrace(scene, cam)
        out.append(lift_view(cam, oracle_depth(view), encode_features(view, feat_dim), k))
    return out


def brute_force_visible(means, cam):
    """Count means that fall inside cam's image in front of it, one at a time."""
    count = 0
    for p in means:
        x, y, z = to_camera_frame(p[None], cam)[0]
        if z <= 1e-4:
            continue
        u = np.floor(cam.fx * x / z + cam.cx)
        v = np.floor(cam.fy * y / z + cam.cy)
        count += 0 <= u < cam.width and 0 <= v < cam.height
    return count


def test_identical_cameras_overlap_fully(object_scene, front_rig):
    cam = front_rig.camera_at(0.0, 16, 16)
    node, = lift(object_scene, [cam])
    assert overlap_ratio(node, cam) == 1.0


def test_back_to_back_cameras_do_not_overlap(plane_scene):
    front = make_camera(16, 16, 60.0, look_at((0, 0, 0), (0, 0, 1)))
    back = make_camera(16, 16, 60.0, look_at((0, 0, 0), (0, 0, -1)))
    node, = lift(plane_scene, [front])
    assert overlap_ratio(node, back) == 0.0


def test_overlap_matches_brute_force(plane_scene):
    cams = [yaw_camera(24, -15.0, radius=2.0, target=(0, 0, 2)), yaw_camera(24, 15.0, radius=2.0, target=(0, 0, 2))]
    nodes = lift(plane_scene, cams)
    expected = brute_force_visible(nodes[1].means, cams[0]) / 576
    assert overlap_ratio(nodes[1], cams[0]) == expected
    assert 0.0 < expected < 1.0


def test_empty_node_is_rejected(plane_scene):
    cam = yaw_camera(8, 0.0, target=(0, 0, 2))
    node, = lift(plane_scene, [cam])
    with pytest.raises(GraphError, match="empty node"):
        overlap_ratio(node.take(np.array([], dtype=np.int64)), cam)


def test_adjacency_single_and_duplicate(plane_scene):
    cam = yaw_camera(12, 0.0, target=(0, 0, 2))
    n1 = lift(plane_scene, [cam])
    np.testing.assert_array_equal(build_adjacency(n1), [[1.0]])
    np.testing.assert_array_equal(build_adjacency(lift(plane_scene, [cam, cam])), np.ones((2, 2)))


def test_adjacency_is_asymmetric_for_different_fov(plane_scene):
    pose = look_at((0, 0, -1), (0, 0, 2))
    wide, narrow = make_camera(20, 20, 90.0, pose), make_camera(20, 20, 30.0, pose)
    nodes = lift(plane_scene, [wide, narrow])
    a = build_adjacency(nodes)
    assert a[0, 1] == brute_force_visible(nodes[1].means, wide) / 400
    assert a[1, 0] == brute_force_visible(nodes[0].means, narrow) / 400
    assert a[0, 1] == 1.0 and a[1, 0] < 0.5


def test_prune_examples():
    a = np.array([[1, 0.9, 0.2], [0.9, 1, 0.5], [0.2, 0.5, 1]])
    assert prune_topn(a, 1) == [(0, 1), (1, 2)]
    assert prune_topn(a, 2) == [(0, 1), (0, 2), (1, 2)]
    assert prune_topn(a, 5) == [(0, 1), (0, 2), (1, 2)]
    assert prune_topn(a, 0) == []
    with pytest.raises(GraphError):
        prune_topn(a, -1)


def test_prune_ties_prefer_smaller_index_and_skip_zero():
    a = np.array([[1, 0.5, 0.5, 0.0], [0.5, 1, 0, 0], [0.5, 0, 1, 0], [0, 0, 0, 1]])
    # node 0 ties between 1 and 2 and keeps 1; node 2 keeps 0 on its own; node 3 has nothing
    assert prune_topn(a, 1) == [(0, 1), (0, 2)]


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.integers(0, 6), st.integers(0, 2**31 - 1))
def test_prune_rule_property(size, n, seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0, 1, (size, size)) * (rng.uniform(size=(size, size)) > 0.2)
    np.fill_diagonal(a, 1.0)
    kept = set(prune_topn(a, n))
    for i in range(size):
        mine = [(min(i, j), max(i, j)) for j in range(size) if j != i and a[i, j] > 0]
        mine.sort(key=lambda e: (-a[i, e[0] + e[1] - i], e[0] + e[1] - i))
        assert set(mine[:n]) <= kept
    for i, j in kept:
        assert a[i, j] > 0 or a[j, i] > 0
    if n >= size - 1:
        assert kept == {(i, j) for i in range(size) for j in range(i + 1, size) if a[i, j] > 0 or a[j, i] > 0}


def test_scale_examples():
    ones = np.ones((2, 2))
    np.testing.assert_array_equal(scale_adjacency(ones, [(0, 1)], "row"), np.full((2, 2), 0.5))
    np.testing.assert_allclose(scale_adjacency(ones, [(0, 1)], "symmetric"), np.full((2, 2), 0.5), rtol=1e-15)
    np.testing.assert_array_equal(scale_adjacency(np.eye(1), [], "row"), [[1.0]])
    a = np.array([[1, 0.8, 0.3], [0.6, 1, 0.1], [0.2, 0.4, 1]])
    row = scale_adjacency(a, [(0, 1)], "row")
    np.testing.assert_allclose(row.sum(axis=1), 1.0)
    assert row[0, 2] == 0 and row[2, 0] == 0 and row[2, 2] == 1.0
    with pytest.raises(GraphError):
        scale_adjacency(a, [], "bogus")


def test_self_operator_is_identity(object_scene, front_rig):
    node, = lift(object_scene, [front_rig.camera_at(0.0, 10, 10)])
    op = build_edge_operator(node, node)
    assert op.is_identity()
    assert all(op.sources_at(n) == [n] for n in range(100))


def test_identical_views_give_identity(object_scene, front_rig):
    cam = front_rig.camera_at(5.0, 10, 10)
    a, b = lift(object_scene, [cam, cam])
    assert build_edge_operator(a, b).is_identity()


def test_outside_frustum_gives_empty_operator(plane_scene):
    front = make_camera(8, 8, 60.0, look_at((0, 0, 0), (0, 0, 1)))
    back = make_camera(8, 8, 60.0, look_at((0, 0, 0), (0, 0, -1)))
    node, = lift(plane_scene, [front])
    other, = lift(plane_scene, [front])
    other.camera = back
    op = build_edge_operator(node, other)
    assert op.nnz == 0 and op.counts.sum() == 0


def test_operator_matches_brute_force(object_scene, front_rig):
    cams = [front_rig.camera_at(-12.0, 12, 12), front_rig.camera_at(9.0, 12, 12)]
    vj, vi = lift(object_scene, cams)
    op = build_edge_operator(vj, vi)
    cam = vi.camera
    expected = {n: [] for n in range(144)}
    for m, p in enumerate(vj.means):
        x, y, z = to_camera_frame(p[None], cam)[0]
        u, v = np.floor(cam.fx * x / z + cam.cx), np.floor(cam.fy * y / z + cam.cy)
        if z > 1e-4 and 0 <= u < 12 and 0 <= v < 12:
            expected[int(v) * 12 + int(u)].append((z, m))
    for n in range(144):
        assert op.sources_at(n) == [m for _, m in sorted(expected[n])]
    assert op.nnz == sum(len(v) for v in expected.values())


def _graph_from(a, edges):
    a = np.asarray(a, dtype=np.float64)
    return GaussianGraph([None] * len(a), a, edges, scale_adjacency(a, edges))


def test_components_edgeless_full_and_chain():
    a = np.array([[1, 0.6, 0.0], [0.6, 1, 0.1], [0.0, 0.1, 1]])
    assert connected_components(_graph_from(a, []), 0.25) == [[0], [1], [2]]
    assert connected_components(_graph_from(np.ones((3, 3)), [(0, 1), (0, 2), (1, 2)]), 0.25) == [[0, 1, 2]]
    assert connected_components(_graph_from(a, [(0, 1), (1, 2)]), 0.25) == [[0, 1], [2]]


def test_components_use_the_larger_direction():
    a = np.array([[1, 0.1], [0.4, 1]])
    assert connected_components(_graph_from(a, [(0, 1)]), 0.25) == [[0, 1]]


def test_build_graph_summary(object_scene, front_rig):
    nodes = lift(object_scene, front_rig.cameras(3, 10, 10))
    g = build_graph(nodes, top_n=1)
    s = g.summary()
    assert s["num_nodes"] == 3
    assert s["edges"] == [list(e) for e in g.edges]
    assert set(s["operators"]) >= {"0->0", "1->1", "2->2"}
    assert g.neighbors(1) == sorted({1, *[j for e in g.edges for j in e if 1 in e]})
    edgeless = build_graph(nodes, top_n=0)
    assert edgeless.edges == [] and np.array_equal(edgeless.scaled_adjacency, np.eye(3))
