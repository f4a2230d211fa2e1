import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import identity_camera
from gaussian_graph.gaussians import (SceneGaussians, SplatFileError, assemble_covariance, lift_view,
                                      parse_splats, quat_to_rotmat, read_splats, write_splats)
from gaussian_graph.geometry import GeometryError, make_camera, project_points
from gaussian_graph.synth import encode_features, raytrace


def random_splats(n, seed=0):
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return SceneGaussians(rng.standard_normal((n, 3)), q, rng.uniform(0.01, 2.0, (n, 3)),
                          rng.uniform(0.01, 0.99, n), rng.uniform(0.01, 0.99, (n, 3)))


# -- lifting -----------------------------------------------------------------------

def test_lift_count_full_resolution(plane_scene):
    cam = make_camera(256, 256, 60.0)
    view = raytrace(plane_scene, cam)
    node = lift_view(cam, view.depth, encode_features(view, 8))
    assert len(node) == 65536


def test_lift_fronto_parallel_plane_depth(plane_scene):
    cam = identity_camera(32, 16.0)
    view = raytrace(plane_scene, cam)
    node = lift_view(cam, view.depth, encode_features(view, 8))
    np.testing.assert_allclose(node.means[:, 2], 2.0, rtol=1e-14)


def test_lift_is_pixel_aligned(object_scene, front_rig):
    cam = front_rig.camera_at(-15.0, 20, 20)
    view = raytrace(object_scene, cam)
    node = lift_view(cam, view.depth, encode_features(view, 8), view_index=2)
    pix, valid, _, _ = project_points(node.means, cam)
    assert valid.all()
    np.testing.assert_array_equal(pix, node.pixels)
    np.testing.assert_array_equal(node.origin_ids, 2 * 400 + np.arange(400))
    g = node[21]
    assert g.pixel == (1, 1) and g.source_view == 2


def test_lift_rejects_bad_depth():
    cam = identity_camera(4, 4.0)
    depth = np.ones((4, 4))
    depth[1, 2] = 0.0
    with pytest.raises(GeometryError, match="invalid depth"):
        lift_view(cam, depth, np.zeros((16, 8)))
    with pytest.raises(ValueError):
        lift_view(cam, np.ones((3, 4)), np.zeros((16, 8)))


# -- covariance --------------------------------------------------------------------

def test_covariance_closed_forms():
    np.testing.assert_array_equal(assemble_covariance([1, 0, 0, 0], [1, 1, 1]), np.eye(3))
    np.testing.assert_array_equal(assemble_covariance([1, 0, 0, 0], [2, 1, 1]), np.diag([4.0, 1, 1]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 1e-3))
def test_covariance_eigenvalues(q):
    q = np.array(q) / np.linalg.norm(q)
    sigma = assemble_covariance(q, [3.0, 2.0, 1.0])
    np.testing.assert_allclose(np.linalg.eigvalsh(sigma), [1.0, 4.0, 9.0], atol=1e-9)
    np.testing.assert_allclose(sigma, sigma.T, atol=0)


def test_quaternion_convention():
    # 90 degrees about z, (w, x, y, z) order
    r = quat_to_rotmat([np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)])
    np.testing.assert_allclose(r @ [1, 0, 0], [0, 1, 0], atol=1e-15)


def test_covariance_errors():
    with pytest.raises(GeometryError, match="degenerate scale"):
        assemble_covariance([1, 0, 0, 0], [1.0, 0.0, 1.0])
    with pytest.raises(GeometryError):
        assemble_covariance([0, 0, 0, 0], [1.0, 1.0, 1.0])


# -- PLY ---------------------------------------------------------------------------

def test_round_trip_double_is_bit_exact(tmp_path):
    s = random_splats(50)
    write_splats(s, tmp_path / "s.ply", precision="double")
    back = read_splats(tmp_path / "s.ply")
    np.testing.assert_array_equal(back.means, s.means)
    np.testing.assert_array_equal(back.quats, s.quats)
    np.testing.assert_allclose(back.scales, s.scales, rtol=1e-12)
    np.testing.assert_allclose(back.opacities, s.opacities, atol=1e-6)
    np.testing.assert_allclose(back.colors, s.colors, atol=1e-6)


def test_round_trip_float(tmp_path):
    s = random_splats(50, seed=1)
    s.means = s.means.astype(np.float32).astype(np.float64)  # representable values survive exactly
    write_splats(s, tmp_path / "s.ply")
    back = read_splats(tmp_path / "s.ply")
    np.testing.assert_array_equal(back.means, s.means)
    np.testing.assert_allclose(back.opacities, s.opacities, atol=1e-6)
    np.testing.assert_allclose(back.colors, s.colors, atol=1e-6)
    np.testing.assert_allclose(back.scales, s.scales, rtol=1e-6)


def test_empty_set_is_valid_ply(tmp_path):
    write_splats(SceneGaussians.empty(), tmp_path / "e.ply")
    data = (tmp_path / "e.ply").read_bytes()
    assert b"element vertex 0\n" in data and data.endswith(b"end_header\n")
    assert len(read_splats(tmp_path / "e.ply")) == 0


def test_half_opacity_stores_zero_logit(tmp_path):
    s = random_splats(3)
    s.opacities = np.full(3, 0.5)
    write_splats(s, tmp_path / "o.ply")
    data = (tmp_path / "o.ply").read_bytes()
    body = data[data.index(b"end_header\n") + len(b"end_header\n"):]
    rows = np.frombuffer(body, dtype="<f4").reshape(3, 17)
    np.testing.assert_array_equal(rows[:, 9], 0.0)


def test_header_layout(tmp_path):
    write_splats(random_splats(2), tmp_path / "h.ply", comments=["config_hash abc"])
    header = (tmp_path / "h.ply").read_bytes().split(b"end_header")[0].decode()
    lines = header.strip().split("\n")
    assert lines[:4] == ["ply", "format binary_little_endian 1.0", "comment config_hash abc", "element vertex 2"]
    props = [line.split()[-1] for line in lines[4:]]
    assert props == ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
                     "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]


def test_parse_errors_report_offsets(tmp_path):
    write_splats(random_splats(4), tmp_path / "t.ply")
    good = (tmp_path / "t.ply").read_bytes()
    with pytest.raises(SplatFileError) as e:
        parse_splats(good[:-10])
    assert "truncated" in str(e.value) and e.value.offset == len(good) - 10
    with pytest.raises(SplatFileError, match="magic"):
        parse_splats(b"plx\n" + good[4:])
    with pytest.raises(SplatFileError, match="unsupported format") as e:
        parse_splats(good.replace(b"binary_little_endian", b"ascii"))
    assert e.value.offset == 4
    with pytest.raises(SplatFileError, match="unterminated"):
        parse_splats(b"ply\nformat binary_little_endian 1.0\n")
    with pytest.raises(SplatFileError, match="missing property"):
        parse_splats(good.replace(b"property float rot_3\n", b""))
