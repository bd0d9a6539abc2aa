import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hfbrimae.errors import SizeError
from hfbrimae.geom import (
    apply_rotation, farthest_point_sample, knn, knn_all, nearest_patch, patchify,
    sample_rotation,
)
from hfbrimae.pcio import PointCloud, generate_synthetic


def fps_oracle(pts, count, start):
    """Textbook greedy FPS over full distance recomputation."""
    chosen = [start]
    while len(chosen) < count:
        best, best_d = None, -1.0
        for i in range(len(pts)):
            if i in chosen:
                continue
            d = min(float(np.sum((pts[i] - pts[j]) ** 2)) for j in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return chosen


def knn_oracle(pts, c, k):
    d = [(float(np.sum((pts[i] - pts[c]) ** 2)), i) for i in range(len(pts))]
    order = sorted(d)
    # the center leads even if another point coincides with it
    idx = [c] + [i for _, i in order if i != c]
    return idx[:k]


@pytest.mark.parametrize("setting", ["A", "Z", "R"])
def test_rotation_matrices_are_proper(setting):
    for s in range(1000):
        r = sample_rotation(setting, s)
        np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-9)
        assert abs(np.linalg.det(r) - 1.0) < 1e-9


def test_rotation_settings():
    assert np.array_equal(sample_rotation("A", 99), np.eye(3))
    for s in range(50):
        np.testing.assert_allclose(sample_rotation("Z", s) @ [0, 0, 1.0], [0, 0, 1.0], atol=1e-12)
    np.testing.assert_array_equal(sample_rotation("R", 5), sample_rotation("R", 5))
    with pytest.raises(ValueError):
        sample_rotation("Q", 0)


def test_so3_uniformity_monte_carlo():
    v = np.array([sample_rotation("R", s)[:, 2] for s in range(10_000)])
    assert np.linalg.norm(v.mean(axis=0)) < 0.05
    # uniform directions have E[z^2] = 1/3 along every axis
    np.testing.assert_allclose((v ** 2).mean(axis=0), 1 / 3, atol=0.02)


def test_apply_rotation_examples():
    c = generate_synthetic("cube", 64, 0)
    assert apply_rotation(c, np.eye(3)).points.tobytes() == c.points.tobytes()
    t = np.pi / 2
    rz = np.array([[np.cos(t), -np.sin(t), 0], [np.sin(t), np.cos(t), 0], [0, 0, 1]])
    out = apply_rotation(PointCloud(np.array([[1.0, 0, 0]])), rz)
    np.testing.assert_allclose(out.points[0], [0, 1, 0], atol=1e-12)
    r = sample_rotation("R", 3)
    rot = apply_rotation(c, r)
    d0 = np.linalg.norm(c.points[:, None] - c.points[None], axis=-1)
    d1 = np.linalg.norm(rot.points[:, None] - rot.points[None], axis=-1)
    np.testing.assert_allclose(d0, d1, atol=1e-9)
    assert rot.label == c.label


def test_fps_examples():
    pts = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0.0]])
    assert farthest_point_sample(pts, 1, start_index=2).tolist() == [2]
    assert farthest_point_sample(pts, 2, start_index=0).tolist() == [0, 2]
    full = farthest_point_sample(pts, 4)
    assert sorted(full.tolist()) == [0, 1, 2, 3]
    with pytest.raises(SizeError):
        farthest_point_sample(pts, 5)


def test_knn_examples():
    pts = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0.0]])
    assert knn(pts, 1, 1).tolist() == [1]
    assert knn(pts, 1, 3).tolist() == [1, 0, 2]
    with pytest.raises(SizeError):
        knn(pts, 0, 5)


def test_fps_and_knn_match_oracles():
    rng = np.random.default_rng(0)
    for trial in range(200):
        n = int(rng.integers(2, 65))
        # quantized coordinates produce plenty of exact distance ties
        pts = rng.integers(-3, 4, size=(n, 3)).astype(float) if trial % 2 else rng.normal(size=(n, 3))
        count = int(rng.integers(1, n + 1))
        start = int(rng.integers(0, n))
        assert farthest_point_sample(pts, count, start).tolist() == fps_oracle(pts, count, start)
        k = int(rng.integers(1, n + 1))
        c = int(rng.integers(0, n))
        assert knn(pts, c, k).tolist() == knn_oracle(pts, c, k)


def test_knn_all_matches_oracle_large():
    rng = np.random.default_rng(5)
    for n in (100, 256):
        pts = rng.integers(-4, 5, size=(n, 3)).astype(float)
        rows = knn_all(pts, 16)
        for c in range(0, n, 7):
            assert rows[c].tolist() == knn_oracle(pts, c, 16)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 48), st.integers(0, 2**32 - 1))
def test_fps_max_min_property(n, seed):
    pts = np.random.default_rng(seed).normal(size=(n, 3))
    count = max(2, n // 3)
    sel = farthest_point_sample(pts, count)
    others = np.setdiff1d(np.arange(n), sel)
    if others.size == 0:
        return
    p = pts[sel]
    dsel = np.sum((p[:, None] - p[None]) ** 2, axis=-1)
    min_sel = dsel[~np.eye(count, dtype=bool)].min()
    d_other = np.sum((pts[others][:, None] - p[None]) ** 2, axis=-1).min(axis=1)
    assert min_sel >= d_other.max() - 1e-12


def test_patchify_contract():
    c = generate_synthetic("torus", 128, 2)
    ps = patchify(c, 16, 8)
    assert ps.member_indices.shape == (16, 8)
    assert ps.center_indices[0] == 0
    assert np.all(ps.member_indices[:, 0] == ps.center_indices)
    singletons = patchify(c, 128, 1)
    np.testing.assert_array_equal(singletons.member_indices[:, 0], singletons.center_indices)
    with pytest.raises(SizeError):
        patchify(c, 129, 4)


def test_patchify_full_scale_shapes():
    c = generate_synthetic("sphere", 1024, 0)
    ps = patchify(c, 256, 64)
    assert ps.member_indices.shape == (256, 64)
    assert len(set(ps.center_indices.tolist())) == 256


def test_patchify_rotation_invariant_indices():
    c = generate_synthetic("cube", 256, 9)
    base = patchify(c, 32, 16)
    for s in range(20):
        rot = patchify(apply_rotation(c, sample_rotation("R", s)), 32, 16)
        assert np.array_equal(base.center_indices, rot.center_indices)
        assert np.array_equal(base.member_indices, rot.member_indices)


def test_nearest_patch():
    pts = np.array([[0, 0, 0], [0.1, 0, 0], [5, 0, 0], [5.1, 0, 0.0]])
    ps = patchify(pts, 2, 2)
    near = nearest_patch(pts, ps, k=1)[:, 0]
    centers = ps.center_indices[near]
    assert (pts[centers, 0] < 1).tolist() == [True, True, False, False]
