import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from hfbrimae.errors import EmptyCloudError, ParseError
from hfbrimae.pcio import (
    CYLINDER_HALF_HEIGHT, PointCloud, generate_synthetic, load_point_cloud,
    normalize_unit_sphere, save_point_cloud,
)


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_off_three_vertices_in_order(tmp_path):
    p = write(tmp_path, "a.off", "OFF\n3 0 0\n0 0 0\n1 0 0\n0 1 0\n")
    c = load_point_cloud(p)
    assert len(c) == 3
    np.testing.assert_array_equal(c.points, [[0, 0, 0], [1, 0, 0], [0, 1, 0]])


def test_off_ignores_faces_and_comments(tmp_path):
    text = "OFF\n# comment\n4 1 0\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n3 0 1 2\n"
    c = load_point_cloud(write(tmp_path, "f.off", text))
    assert len(c) == 4


def test_off_counts_glued_to_magic(tmp_path):
    c = load_point_cloud(write(tmp_path, "g.off", "OFF3 0 0\n0 0 0\n1 1 1\n2 2 2\n"))
    assert c.points[2].tolist() == [2, 2, 2]


def test_xyz_two_points(tmp_path):
    c = load_point_cloud(write(tmp_path, "a.xyz", "0 0 0\n1 2 3\n"))
    assert len(c) == 2
    assert c.points[1].tolist() == [1.0, 2.0, 3.0]


def test_ply_short_vertex_list_names_short_read(tmp_path):
    header = "ply\nformat ascii 1.0\nelement vertex 5\nproperty float x\nproperty float y\n" \
             "property float z\nend_header\n"
    body = "".join(f"{i} 0 0\n" for i in range(4))
    with pytest.raises(ParseError, match="expected 5 vertex"):
        load_point_cloud(write(tmp_path, "s.ply", header + body))


def test_ply_skips_extra_properties_and_elements(tmp_path):
    text = (
        "ply\nformat ascii 1.0\ncomment hi\nelement vertex 2\nproperty float nx\n"
        "property float x\nproperty float y\nproperty float z\nproperty uchar red\n"
        "element face 1\nproperty list uchar int vertex_indices\nend_header\n"
        "9 1 2 3 255\n9 4 5 6 0\n3 0 1 1\n"
    )
    c = load_point_cloud(write(tmp_path, "p.ply", text))
    np.testing.assert_array_equal(c.points, [[1, 2, 3], [4, 5, 6]])


def test_malformed_line_reports_line_number(tmp_path):
    with pytest.raises(ParseError, match="line 2"):
        load_point_cloud(write(tmp_path, "bad.xyz", "0 0 0\n1 x 3\n"))


def test_empty_file_is_empty_cloud_error(tmp_path):
    with pytest.raises(EmptyCloudError):
        load_point_cloud(write(tmp_path, "e.xyz", "\n"))
    with pytest.raises(EmptyCloudError):
        load_point_cloud(write(tmp_path, "e.off", "OFF\n0 0 0\n"))


def test_binary_ply_rejected(tmp_path):
    text = "ply\nformat binary_little_endian 1.0\nelement vertex 1\nend_header\n"
    with pytest.raises(ParseError):
        load_point_cloud(write(tmp_path, "b.ply", text))


@pytest.mark.parametrize("suffix", [".off", ".ply", ".xyz"])
def test_save_load_round_trip(tmp_path, suffix):
    c = generate_synthetic("torus", 50, 3)
    p = tmp_path / f"c{suffix}"
    save_point_cloud(p, c)
    np.testing.assert_array_equal(load_point_cloud(p).points, c.points)


def test_synthetic_deterministic():
    a = generate_synthetic("sphere", 100, 7)
    b = generate_synthetic("sphere", 100, 7)
    assert a.points.tobytes() == b.points.tobytes()
    assert not np.array_equal(a.points, generate_synthetic("sphere", 100, 8).points)


def test_sphere_on_surface():
    c = generate_synthetic("sphere", 1000, 11)
    np.testing.assert_allclose(np.linalg.norm(c.points, axis=1), 1.0, atol=1e-9)


def test_cube_on_surface():
    p = generate_synthetic("cube", 1000, 2).points
    np.testing.assert_allclose(np.abs(p).max(axis=1), 1.0, atol=1e-12)


def test_cylinder_three_parts_consistent_with_geometry():
    c = generate_synthetic("cylinder", 1000, 1)
    assert len(np.unique(c.part_labels)) == 3
    z = c.points[:, 2]
    assert np.all(z[c.part_labels == 0] == -CYLINDER_HALF_HEIGHT)
    assert np.all(z[c.part_labels == 2] == CYLINDER_HALF_HEIGHT)


def test_torus_two_halves_and_labels():
    c = generate_synthetic("torus", 500, 4)
    assert set(np.unique(c.part_labels)) == {0, 1}
    assert [generate_synthetic(s, 10, 0).label for s in ("sphere", "cube", "cylinder", "torus")] == [0, 1, 2, 3]


def test_synthetic_rejects_tiny_counts():
    with pytest.raises(ValueError):
        generate_synthetic("sphere", 7, 0)


def test_point_cloud_validation():
    with pytest.raises(ValueError):
        PointCloud(np.array([[0.0, np.nan, 0.0]]))
    with pytest.raises(ValueError):
        PointCloud(np.zeros((3, 3)), part_labels=[0, 1])
    with pytest.raises(EmptyCloudError):
        PointCloud(np.zeros((0, 3)))


def test_normalize_examples():
    out = normalize_unit_sphere(PointCloud(np.array([[0.0, 0, 0], [2.0, 0, 0]])))
    np.testing.assert_allclose(out.points, [[-1, 0, 0], [1, 0, 0]], atol=1e-12)
    out = normalize_unit_sphere(PointCloud(np.full((4, 3), 5.0)))
    assert np.all(out.points == 0.0)
    c = normalize_unit_sphere(generate_synthetic("cube", 200, 1))
    np.testing.assert_allclose(normalize_unit_sphere(c).points, c.points, atol=1e-9)


clouds = arrays(np.float64, st.tuples(st.integers(1, 40), st.just(3)),
                elements=st.floats(-100, 100, allow_nan=False))


@settings(max_examples=100, deadline=None)
@given(clouds)
def test_normalize_properties(pts):
    out = normalize_unit_sphere(PointCloud(pts)).points
    if np.allclose(out, 0.0):
        return
    np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-9)
    assert abs(np.linalg.norm(out, axis=1).max() - 1.0) < 1e-9
    again = normalize_unit_sphere(PointCloud(out)).points
    np.testing.assert_allclose(again, out, atol=1e-9)
