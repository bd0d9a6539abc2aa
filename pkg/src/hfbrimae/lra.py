"""Local reference axes and tangent-plane clockwise ordering of patch points."""

from __future__ import annotations

import numpy as np

from .errors import EmptyCloudError

EPS = 1e-12
FALLBACK_AXIS = np.array([0.0, 0.0, 1.0])


def symmetric_eigh(cov):
    """Ascending eigenvalues and column eigenvectors of (batched) symmetric 3x3 matrices."""
    return np.linalg.eigh(cov)


def _fix_sign(axes, disambig):
    # flip so axis . (anchor - mean) >= 0; near-zero dot falls back to
    # making the first component with |c| > EPS positive
    sign = np.where(disambig < 0.0, -1.0, 1.0)
    weak = np.abs(disambig) <= EPS
    if np.any(weak):
        nz = np.abs(axes[weak]) > EPS
        first = np.argmax(nz, axis=1)
        lead = axes[weak][np.arange(first.shape[0]), first]
        sign[weak] = np.where(lead < 0.0, -1.0, 1.0)
    return axes * sign[:, None]


def compute_lras(neighborhoods, anchors, return_margin=False):
    """Batched LRA: ``neighborhoods`` is (B, M, 3), ``anchors`` is (B, 3) or (3,).

    The axis is the smallest-eigenvalue eigenvector of the unweighted
    covariance about the neighborhood mean, oriented toward the anchor.
    With ``return_margin`` also returns, per row, the smaller of the sign
    margin ``|axis . (anchor - mean)|`` and the relative eigen-gap.
    """
    nb = np.asarray(neighborhoods, dtype=np.float64)
    if nb.shape[-2] == 0:
        raise EmptyCloudError("LRA of an empty neighborhood")
    mean = nb.mean(axis=-2)
    centered = nb - mean[:, None, :]
    cov = np.einsum("bmi,bmj->bij", centered, centered) / nb.shape[-2]
    evals, evecs = symmetric_eigh(cov)
    axes = evecs[:, :, 0].copy()
    anchors = np.broadcast_to(np.asarray(anchors, dtype=np.float64), mean.shape)
    disambig = np.einsum("bi,bi->b", axes, anchors - mean)
    axes = _fix_sign(axes, disambig)
    scale = evals[:, 2]
    degenerate = scale <= EPS * EPS
    axes[degenerate] = FALLBACK_AXIS
    if not return_margin:
        return axes
    with np.errstate(divide="ignore", invalid="ignore"):
        gap = np.where(degenerate, 0.0, (evals[:, 1] - evals[:, 0]) / np.maximum(scale, EPS))
    return axes, np.minimum(np.abs(disambig), gap)


def compute_lra(neighborhood, anchor):
    """Unit normal surrogate of an M x 3 neighborhood, sign fixed by ``anchor``."""
    nb = np.asarray(neighborhood, dtype=np.float64)
    if nb.ndim != 2 or nb.shape[0] == 0:
        raise EmptyCloudError("LRA needs at least one point")
    return compute_lras(nb[None], np.asarray(anchor, dtype=np.float64)[None])[0]


def clockwise_order(patch_points, references, axes, return_margin=False):
    """Batched ordering; ``patch_points`` (B, K, 3), ``references`` and ``axes`` (B, 3).

    Position 0 is the point farthest from the reference (smallest index on
    ties). The rest follow by increasing clockwise angle about the axis, seen
    from the axis tip, measured from the position-0 tangent direction.
    Points whose tangent projection vanishes go last in index order.
    """
    x = np.asarray(patch_points, dtype=np.float64)
    b, k, _ = x.shape
    rows = np.arange(b)
    offsets = x - references[:, None, :]
    d2 = np.einsum("bki,bki->bk", offsets, offsets)
    first = np.argmax(d2, axis=1)

    height = np.einsum("bki,bi->bk", offsets, axes)
    proj = offsets - height[..., None] * axes[:, None, :]
    pnorm = np.linalg.norm(proj, axis=-1)
    ok = pnorm >= EPS
    unit = np.where(ok[..., None], proj / np.where(ok, pnorm, 1.0)[..., None], 0.0)

    # reference direction: the farthest point whose projection is usable
    ref_key = np.where(ok, d2, -1.0)
    ref_idx = np.argmax(ref_key, axis=1)
    u0 = unit[rows, ref_idx]
    cos = np.einsum("bki,bi->bk", unit, u0)
    ccw = np.einsum("bki,bi->bk", np.cross(u0[:, None, :], unit), axes)
    clockwise = np.mod(-np.arctan2(ccw, cos), 2.0 * np.pi)
    key = np.where(ok, clockwise, np.inf)
    key[rows, first] = -1.0
    idx = np.broadcast_to(np.arange(k), (b, k))
    order = np.lexsort((idx, key), axis=-1)
    if not return_margin:
        return order

    sorted_d2 = np.sort(d2, axis=1)
    far_gap = sorted_d2[:, -1] - sorted_d2[:, -2] if k > 1 else np.full(b, np.inf)
    finite = np.where(np.isfinite(key) & (key >= 0.0), key, np.nan)
    finite[rows, ref_idx] = np.nan
    wrap = np.nanmin(np.minimum(finite, 2.0 * np.pi - finite), axis=1, initial=np.inf)
    srt = np.sort(np.where(np.isnan(finite), np.inf, finite), axis=1)
    with np.errstate(invalid="ignore"):
        gaps = np.diff(srt, axis=1)
    gaps = np.where(np.isfinite(gaps), gaps, np.inf)
    angle_gap = gaps.min(axis=1, initial=np.inf)
    near_degenerate = np.where(ok, pnorm, np.inf).min(axis=1, initial=np.inf) - EPS
    margin = np.minimum.reduce([far_gap, wrap, angle_gap, near_degenerate])
    return order, margin


def order_patch_points(patch_points, reference, reference_lra):
    """Permutation ordering one K x 3 patch clockwise around ``reference_lra``."""
    x = np.asarray(patch_points, dtype=np.float64)
    return clockwise_order(
        x[None], np.asarray(reference, dtype=np.float64)[None],
        np.asarray(reference_lra, dtype=np.float64)[None],
    )[0]
