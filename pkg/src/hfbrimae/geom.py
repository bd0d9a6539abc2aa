"""Rotations, farthest point sampling, KNN grouping and patch decomposition.

Every distance comparison uses squared Euclidean distance with ties broken by
the smallest point index, so index outputs depend only on pairwise distances
and are unchanged by rotating the cloud.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SizeError
from .pcio import PointCloud

ROTATION_SETTINGS = ("A", "Z", "R")


def _as_points(cloud):
    if isinstance(cloud, PointCloud):
        return cloud.points
    return np.asarray(cloud, dtype=np.float64)


def quaternion_to_matrix(q):
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def sample_rotation(setting, seed):
    """Draw a rotation matrix for training/testing regime ``setting``.

    ``A`` is the identity, ``Z`` a uniform angle about the z axis and ``R``
    a Haar-uniform element of SO(3) from a normalized Gaussian quaternion.
    """
    if setting == "A":
        return np.eye(3)
    rng = np.random.default_rng(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    if setting == "Z":
        t = rng.uniform(0.0, 2.0 * np.pi)
        c, s = np.cos(t), np.sin(t)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    if setting == "R":
        q = rng.standard_normal(4)
        q /= np.linalg.norm(q)
        return quaternion_to_matrix(q)
    raise ValueError(f"unknown rotation setting {setting!r}; expected one of {ROTATION_SETTINGS}")


def apply_rotation(cloud, r):
    r = np.asarray(r, dtype=np.float64)
    if isinstance(cloud, PointCloud):
        if np.array_equal(r, np.eye(3)):
            return cloud
        return cloud.with_points(cloud.points @ r.T)
    return _as_points(cloud) @ r.T


def pairwise_sq_dists(a, b=None):
    b = a if b is None else b
    out = np.zeros((a.shape[0], b.shape[0]))
    for c in range(a.shape[1]):
        diff = np.subtract.outer(a[:, c], b[:, c])
        diff *= diff
        out += diff
    return out


def farthest_point_sample(cloud, count, start_index=0, d2=None):
    """Greedy max-min selection of ``count`` indices starting at ``start_index``.

    ``d2`` optionally supplies the precomputed N x N squared-distance matrix.
    """
    pts = _as_points(cloud)
    n = pts.shape[0]
    if not 1 <= count <= n:
        raise SizeError(f"cannot sample {count} points from a cloud of {n}")
    if not 0 <= start_index < n:
        raise SizeError(f"start_index {start_index} out of range for {n} points")
    selected = np.empty(count, dtype=np.int64)
    selected[0] = start_index

    def dists_from(i):
        if d2 is not None:
            return d2[i]
        diff = pts - pts[i]
        return np.einsum("ij,ij->i", diff, diff)

    min_d2 = dists_from(start_index).copy()
    min_d2[start_index] = -1.0
    for i in range(1, count):
        # argmax returns the first (smallest) index among equal maxima
        nxt = int(np.argmax(min_d2))
        selected[i] = nxt
        np.minimum(min_d2, dists_from(nxt), out=min_d2)
        min_d2[selected[: i + 1]] = -1.0
    return selected


def _knn_rows(d2, k):
    """Row-wise k smallest entries ordered by (value, column index)."""
    n = d2.shape[-1]
    if k >= n or n <= 64:
        # stable sort keeps index order among equal distances
        return np.argsort(d2, axis=-1, kind="stable")[..., :k]
    part = np.argpartition(d2, k - 1, axis=-1)[..., :k]
    vals = np.take_along_axis(d2, part, axis=-1)
    order = np.lexsort((part, vals), axis=-1)
    out = np.take_along_axis(part, order, axis=-1)
    # rows where the k-th value is tied outside the selection need the full stable sort
    kth = vals.max(axis=-1, keepdims=True)
    tied = (d2 <= kth).sum(axis=-1) > k
    if np.any(tied):
        out[tied] = np.argsort(d2[tied], axis=-1, kind="stable")[..., :k]
    return out


def knn(cloud, center_index, k):
    """Indices of the ``k`` points nearest to ``center_index``, sorted by (distance, index)."""
    pts = _as_points(cloud)
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise SizeError(f"cannot take {k} neighbors from a cloud of {n}")
    diff = pts - pts[center_index]
    d2 = np.einsum("ij,ij->i", diff, diff)
    d2[center_index] = -1.0
    return _knn_rows(d2, k)


def knn_all(cloud, k, centers=None, d2=None):
    """Batched :func:`knn` for every index in ``centers`` (default: all points)."""
    pts = _as_points(cloud)
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise SizeError(f"cannot take {k} neighbors from a cloud of {n}")
    centers = np.arange(n) if centers is None else np.asarray(centers)
    d2 = pairwise_sq_dists(pts[centers], pts) if d2 is None else d2[centers]
    # a center always leads its own row, even when duplicated points exist
    d2[np.arange(centers.shape[0]), centers] = -1.0
    return _knn_rows(d2, k)


@dataclass(frozen=True)
class PatchSet:
    """FPS centers and their KNN member rows (center included, K per row)."""

    center_indices: np.ndarray
    member_indices: np.ndarray
    source: PointCloud | None = None

    @property
    def n_patches(self):
        return self.center_indices.shape[0]

    @property
    def points_per_patch(self):
        return self.member_indices.shape[1]


def patchify(cloud, n_patches, points_per_patch, start_index=0, d2=None):
    pts = _as_points(cloud)
    n = pts.shape[0]
    if n_patches > n or points_per_patch > n:
        raise SizeError(
            f"{n_patches} patches x {points_per_patch} points requested from a cloud of {n}"
        )
    centers = farthest_point_sample(pts, n_patches, start_index, d2=d2)
    members = knn_all(pts, points_per_patch, centers, d2=d2)
    source = cloud if isinstance(cloud, PointCloud) else None
    return PatchSet(centers, members, source)


def nearest_patch(cloud, patches, k=1):
    """For every point, the ``k`` nearest patch centers (by squared distance, then index)."""
    pts = _as_points(cloud)
    centers = pts[patches.center_indices]
    k = min(k, centers.shape[0])
    return _knn_rows(pairwise_sq_dists(pts, centers), k)
