"""Rotation-invariant handcrafted features.

Per patch member, eight local values (RILF)::

    d_pxi, alpha0, alpha1, alpha2, phi, beta0, beta1, beta2

and per patch, five values describing the patch's neighborhood ball (RIGF)::

    d_p, d_pm, d_sm, alpha, beta

Vectors written ``a->b`` below mean ``b - a``. All geometry runs in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geom import PatchSet, _as_points, knn_all, pairwise_sq_dists, patchify
from .lra import EPS, clockwise_order, compute_lras

RILF_COLUMNS = ("d_pxi", "alpha0", "alpha1", "alpha2", "phi", "beta0", "beta1", "beta2")
RIGF_COLUMNS = ("d_p", "d_pm", "d_sm", "alpha", "beta")
RILF_GROUPS = {
    "distance": (0,),
    "reference": (1, 2, 3),
    "neighbor": (4, 5, 6, 7),
}


def vector_angle(a, b):
    """Unsigned angle in [0, pi]; zero when either vector is shorter than EPS."""
    cross = np.linalg.norm(np.cross(a, b), axis=-1)
    dot = np.einsum("...i,...i->...", a, b)
    ang = np.arctan2(cross, dot)
    short = (np.linalg.norm(a, axis=-1) < EPS) | (np.linalg.norm(b, axis=-1) < EPS)
    return np.where(short, 0.0, ang)


def _signed(angle, triple):
    sign = np.where(triple < 0.0, -1.0, 1.0)
    sign = np.where(np.abs(triple) < EPS, 1.0, sign)
    out = sign * angle
    # keep signed angles in (-pi, pi]
    return np.where(out <= -np.pi, np.pi, out)


def rilf_rows(ordered, reference, reference_lra, ordered_lras, return_margin=False):
    """RILF for already-ordered patches; shapes (B, K, 3), (B, 3), (B, 3), (B, K, 3)."""
    x = ordered
    lx = ordered_lras
    x_next = np.roll(x, -1, axis=1)
    l_next = np.roll(lx, -1, axis=1)
    to_p = reference[:, None, :] - x  # x_i -> p
    next_to_p = reference[:, None, :] - x_next  # x_{i+1} -> p
    step = x_next - x  # x_i -> x_{i+1}
    lp = np.broadcast_to(reference_lra[:, None, :], x.shape)

    d = np.linalg.norm(to_p, axis=-1)
    a0 = vector_angle(lx, to_p)
    a1 = vector_angle(lp, to_p)
    t_a = np.einsum("bki,bki->bk", np.cross(lx, lp), to_p)
    a2 = _signed(vector_angle(lx, lp), t_a)
    phi = vector_angle(next_to_p, to_p)
    b0 = vector_angle(lx, step)
    b1 = vector_angle(l_next, step)
    t_b = np.einsum("bki,bki->bk", np.cross(lx, l_next), step)
    b2 = _signed(vector_angle(lx, l_next), t_b)
    feats = np.stack([d, a0, a1, a2, phi, b0, b1, b2], axis=-1)
    if not return_margin:
        return feats
    # a sign can only flip if its triple product straddles the EPS cutoff;
    # report the relative distance to that cutoff
    margin = np.minimum(
        (np.abs(np.abs(t_a) - EPS) / EPS).min(axis=1),
        (np.abs(np.abs(t_b) - EPS) / EPS).min(axis=1),
    )
    return feats, margin


def compute_rilf(patch_points, reference, reference_lra, point_lras, ordering):
    """K x 8 RILF matrix of one patch, rows in ``ordering`` order."""
    order = np.asarray(ordering)
    x = np.asarray(patch_points, dtype=np.float64)[order]
    lx = np.asarray(point_lras, dtype=np.float64)[order]
    return rilf_rows(
        x[None], np.asarray(reference, dtype=np.float64)[None],
        np.asarray(reference_lra, dtype=np.float64)[None], lx[None],
    )[0]


def rigf_rows(patch_points, reference):
    """RIGF for a batch of patches (B, K, 3) with reference points (B, 3)."""
    x = np.asarray(patch_points, dtype=np.float64)
    p = np.asarray(reference, dtype=np.float64)
    radius = np.linalg.norm(x - p[:, None, :], axis=-1).max(axis=1)
    m = x.mean(axis=1)
    d_p = np.linalg.norm(p, axis=-1)
    at_origin = d_p < EPS
    direction = np.where(
        at_origin[:, None], np.array([0.0, 0.0, 1.0]), p / np.where(at_origin, 1.0, d_p)[:, None]
    )
    # far intersection of the ray origin->p with the ball around p
    s = np.where(
        at_origin[:, None], p + radius[:, None] * direction, direction * (d_p + radius)[:, None]
    )
    d_pm = np.linalg.norm(p - m, axis=-1)
    d_sm = np.linalg.norm(s - m, axis=-1)
    alpha = vector_angle(m - p, m - s)
    beta = vector_angle(s - p, s - m)
    return np.stack([d_p, d_pm, d_sm, alpha, beta], axis=-1)


def compute_rigf(patch_points, reference):
    """Five-value ball descriptor of one patch around ``reference``."""
    return rigf_rows(np.asarray(patch_points, dtype=np.float64)[None],
                     np.asarray(reference, dtype=np.float64)[None])[0]


@dataclass
class PatchFeatures:
    """Features of one cloud; ``ordered_members`` maps RILF rows to cloud indices."""

    rilf: np.ndarray  # (N_p, K, 8)
    rigf: np.ndarray  # (N_p, 5)
    ordered_members: np.ndarray  # (N_p, K)
    center_indices: np.ndarray  # (N_p,)
    margin: np.ndarray  # (N_p,) smallest decision margin seen while building the patch


def point_lras(points, indices, k, anchor, d2=None):
    """LRA of each point in ``indices`` from its own ``k`` nearest neighbors."""
    k = min(k, points.shape[0])
    nbrs = knn_all(points, k, indices, d2=d2)
    return compute_lras(points[nbrs], anchor, return_margin=True)


def extract_features(cloud, patches: PatchSet, drop_groups=(), lra_anchor=None, d2=None):
    """RILF and RIGF for every patch of ``cloud``, in patch order.

    Per-point LRAs come from each point's own KNN neighborhood (same size as
    the patch) and are oriented toward ``lra_anchor``, the cloud centroid by
    default. ``drop_groups`` zeroes RILF column groups (see ``RILF_GROUPS``).
    ``d2`` optionally supplies the cloud's squared-distance matrix.
    """
    pts = _as_points(cloud)
    centers = patches.center_indices
    members = patches.member_indices
    n_p, k = members.shape
    anchor = pts.mean(axis=0) if lra_anchor is None else np.asarray(lra_anchor, dtype=np.float64)

    used, inverse = np.unique(members, return_inverse=True)
    used_lras, lra_margin = point_lras(pts, used, k, anchor, d2=d2)
    member_lras = used_lras[inverse.reshape(n_p, k)]
    member_lra_margin = lra_margin[inverse.reshape(n_p, k)].min(axis=1)

    # the center's own LRA comes from its KNN row, i.e. the patch itself
    center_lras, center_margin = compute_lras(pts[members], anchor, return_margin=True)
    refs = pts[centers]
    patch_pts = pts[members]
    order, order_margin = clockwise_order(patch_pts, refs, center_lras, return_margin=True)
    rows = np.arange(n_p)[:, None]
    ordered = patch_pts[rows, order]
    rilf, sign_margin = rilf_rows(
        ordered, refs, center_lras, member_lras[rows, order], return_margin=True
    )
    rigf = rigf_rows(patch_pts, refs)
    for group in drop_groups:
        if group not in RILF_GROUPS:
            raise ValueError(f"unknown RILF group {group!r}; expected one of {tuple(RILF_GROUPS)}")
        rilf[..., list(RILF_GROUPS[group])] = 0.0
    margin = np.minimum.reduce([member_lra_margin, center_margin, order_margin, sign_margin])
    return PatchFeatures(rilf, rigf, members[rows, order], centers, margin)


def cloud_features(cloud, n_patches, points_per_patch, start_index=0, drop_groups=()):
    """Patchify and extract in one pass, sharing a single distance matrix."""
    pts = _as_points(cloud)
    d2 = pairwise_sq_dists(pts)
    patches = patchify(pts, n_patches, points_per_patch, start_index, d2=d2)
    return extract_features(pts, patches, drop_groups=drop_groups, d2=d2)
