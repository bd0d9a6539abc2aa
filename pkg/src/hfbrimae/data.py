"""Datasets, seed derivation and batched feature extraction."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .geom import apply_rotation, sample_rotation
from .pcio import SHAPES, PointCloud, generate_synthetic, load_point_cloud, normalize_unit_sphere
from .rihf import cloud_features

CLOUD_SUFFIXES = (".off", ".ply", ".xyz")


def derive_seed(*parts):
    """Stable 64-bit seed from a tuple of non-negative integers."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint64)[0])


@dataclass
class Dataset:
    """Aligned (canonical-pose) clouds with class labels."""

    clouds: list
    class_names: tuple

    def __len__(self):
        return len(self.clouds)

    @property
    def labels(self):
        return np.array([c.label for c in self.clouds], dtype=np.int64)

    def subset(self, indices):
        return Dataset([self.clouds[i] for i in indices], self.class_names)


def synthetic_dataset(shapes=SHAPES, per_class=200, n_points=512, seed=0, split="train"):
    """Normalized synthetic clouds; train and test draw from disjoint seed streams."""
    split_id = {"train": 0, "test": 1}.get(split)
    if split_id is None:
        raise DataError(f"unknown split {split!r}")
    clouds = []
    for label, shape in enumerate(shapes):
        for i in range(per_class):
            c = generate_synthetic(shape, n_points, derive_seed(seed, split_id, SHAPES.index(shape), i))
            c = normalize_unit_sphere(c)
            clouds.append(PointCloud(c.points, label=label, part_labels=c.part_labels))
    return Dataset(clouds, tuple(shapes))


def directory_dataset(root, n_points=None, seed=0):
    """Clouds under ``root/<class_name>/*.{off,ply,xyz}``, labels by sorted class name."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"data directory {root} does not exist")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise DataError(f"no class subdirectories under {root}")
    clouds = []
    for label, name in enumerate(classes):
        files = sorted(f for f in (root / name).iterdir() if f.suffix.lower() in CLOUD_SUFFIXES)
        for j, f in enumerate(files):
            c = normalize_unit_sphere(load_point_cloud(f, label=label))
            if n_points is not None:
                c = resample(c, n_points, derive_seed(seed, label, j))
            clouds.append(c)
    if not clouds:
        raise DataError(f"no point-cloud files found under {root}")
    return Dataset(clouds, tuple(classes))


def resample(cloud, n_points, seed):
    n = len(cloud)
    rng = np.random.default_rng(seed)
    idx = rng.choice(n, size=n_points, replace=n < n_points)
    idx.sort()
    parts = None if cloud.part_labels is None else cloud.part_labels[idx]
    return PointCloud(cloud.points[idx], label=cloud.label, part_labels=parts)


def split_dataset(dataset, test_fraction, seed):
    """Deterministic per-class split."""
    labels = dataset.labels
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.shape[0])]
        n_test = int(round(test_fraction * idx.shape[0]))
        test.extend(idx[:n_test].tolist())
        train.extend(idx[n_test:].tolist())
    return dataset.subset(sorted(train)), dataset.subset(sorted(test))


@dataclass
class FeatureBatch:
    rilf: np.ndarray  # (B, N_p, K, 8)
    rigf: np.ndarray  # (B, N_p, 5)
    members: np.ndarray  # (B, N_p, K) cloud indices in RILF row order
    centers: np.ndarray  # (B, N_p)
    points: np.ndarray  # (B, N, 3) coordinates the features were computed from
    margin: np.ndarray  # (B, N_p)

    def __len__(self):
        return self.rilf.shape[0]


def featurize(points_list, n_patches, points_per_patch, start_index=0, drop_groups=(), threads=1):
    """Extract features for each cloud; index-addressed, so any thread count gives the same result."""

    def one(pts):
        return cloud_features(pts, n_patches, points_per_patch, start_index, drop_groups)

    if threads > 1 and len(points_list) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            feats = list(pool.map(one, points_list))
    else:
        feats = [one(p) for p in points_list]
    members = np.stack([f.ordered_members for f in feats])
    return FeatureBatch(
        rilf=np.stack([f.rilf for f in feats]),
        rigf=np.stack([f.rigf for f in feats]),
        members=members,
        centers=np.stack([f.center_indices for f in feats]),
        points=np.stack([np.asarray(p, dtype=np.float64) for p in points_list]),
        margin=np.stack([f.margin for f in feats]),
    )


def rotate_clouds(clouds, setting, seeds):
    """Rotate each cloud by a fresh draw of ``setting``; returns (points list, rotations)."""
    pts, rots = [], []
    for cloud, s in zip(clouds, seeds):
        r = sample_rotation(setting, s)
        pts.append(apply_rotation(cloud.points, r))
        rots.append(r)
    return pts, rots
