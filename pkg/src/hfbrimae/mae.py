"""Masked autoencoder over rotation-invariant patch features.

Token embeddings come from the per-point RILF rows (shared MLP, then max over
the patch), position embeddings from the per-patch RIGF vector. Masked
patches are dropped from the encoder input; the decoder sees visible latents
plus copies of a learnable mask token and regresses the aligned coordinates
of every masked patch.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import adiff as A
from .adiff import Module, Parameter, Tensor
from .errors import ConfigError, ShapeError, SizeError


@dataclass
class ModelConfig:
    embed_dim: int = 64
    encoder_blocks: int = 3
    decoder_blocks: int = 2
    heads: int = 4
    n_patches: int = 32
    points_per_patch: int = 16
    mask_ratio: float = 0.6
    cls_dim: int = 4
    seg_dim: int = 3
    scale_tag: str = "desk"
    token_hidden: tuple = (64, 128)
    pos_hidden: int = 128
    cls_hidden: tuple = (128, 64)
    seg_hidden: tuple = (128, 64)
    seg_label_dim: int = 64
    seg_extra_blocks: int = 3
    seg_neighbors: int = 3
    mlp_ratio: int = 4
    head_dropout: float = 0.1
    start_index: int = 0
    init_seed: int = 0

    def __post_init__(self):
        self.token_hidden = tuple(self.token_hidden)
        self.cls_hidden = tuple(self.cls_hidden)
        self.seg_hidden = tuple(self.seg_hidden)
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must be in [0, 1), got {self.mask_ratio}")
        if self.scale_tag not in ("desk", "paper"):
            raise ConfigError(f"scale_tag must be 'desk' or 'paper', got {self.scale_tag!r}")
        for name in ("embed_dim", "encoder_blocks", "decoder_blocks", "heads", "n_patches",
                     "points_per_patch"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @classmethod
    def full_scale(cls, **overrides):
        """The full-size architecture: 384-d, 12 + 4 blocks, 8 heads, 256 x 64 patches."""
        base = dict(
            embed_dim=384, encoder_blocks=12, decoder_blocks=4, heads=8, n_patches=256,
            points_per_patch=64, mask_ratio=0.6, scale_tag="paper", cls_hidden=(512, 256),
            seg_hidden=(512, 256), cls_dim=40, seg_dim=50,
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {unknown}")
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def fingerprint(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @property
    def global_dim(self):
        """Width of the classification input: every encoder block's output, concatenated."""
        return self.encoder_blocks * self.embed_dim

    @property
    def seg_concat_dim(self):
        return 2 * self.seg_extra_blocks * self.embed_dim + self.seg_label_dim


def mask_count(n_patches, ratio):
    if not 0.0 <= ratio < 1.0:
        raise ConfigError(f"mask ratio must be in [0, 1), got {ratio}")
    n_m = int(math.floor(ratio * n_patches + 0.5))
    n_m = max(n_m, 1)
    if n_patches - n_m < 1:
        raise ConfigError(f"mask ratio {ratio} leaves no visible patch out of {n_patches}")
    return n_m


def sample_mask(n_patches, ratio, seed):
    """Boolean mask with exactly round(ratio * n_patches) True (masked) entries."""
    n_m = mask_count(n_patches, ratio)
    rng = np.random.default_rng(seed)
    mask = np.zeros(n_patches, dtype=bool)
    mask[rng.permutation(n_patches)[:n_m]] = True
    return mask


def chamfer(pred, gt):
    """Squared, unnormalized Chamfer distance between point sets.

    ``pred`` is a Tensor (..., M, 3), ``gt`` an array (..., M', 3); one value per
    leading index. The gradient flows to ``pred`` through the nearest-neighbor
    pairings in both directions.
    """
    pred = A.as_tensor(pred)
    gt = np.asarray(gt, dtype=pred.dtype)
    if pred.shape[-2] < 1 or gt.shape[-2] < 1:
        raise SizeError("chamfer distance of an empty point set")
    if pred.shape[:-2] != gt.shape[:-2] or pred.shape[-1] != gt.shape[-1]:
        raise ShapeError(f"chamfer of shapes {pred.shape} and {gt.shape}")
    p = pred.data
    diff = p[..., :, None, :] - gt[..., None, :, :]
    d2 = np.einsum("...ijk,...ijk->...ij", diff, diff, dtype=np.float64)
    nn_gt = d2.argmin(axis=-1)  # for each pred point, nearest gt
    nn_pred = d2.argmin(axis=-2)  # for each gt point, nearest pred
    value = d2.min(axis=-1).sum(axis=-1) + d2.min(axis=-2).sum(axis=-1)

    def _bw(g):
        g = np.asarray(g)[..., None, None]
        matched_gt = np.take_along_axis(gt, nn_gt[..., None], axis=-2)
        grad = 2.0 * (p - matched_gt)
        matched_pred = np.take_along_axis(p, nn_pred[..., None], axis=-2)
        contrib = 2.0 * (matched_pred - gt)
        lead = np.indices(nn_pred.shape, sparse=True)
        np.add.at(grad, tuple(lead[:-1]) + (nn_pred,), contrib)
        return ((g * grad).astype(p.dtype),)

    return A.custom_op(value.astype(pred.dtype), (pred,), _bw)


class TokenEmbedding(Module):
    """Shared pointwise MLP (affine, batch norm, ReLU per stage) and max over the patch."""

    def __init__(self, cfg, rng):
        super().__init__()
        dims = (8,) + cfg.token_hidden + (cfg.embed_dim,)
        self.layers = [A.Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.norms = [A.BatchNorm(b) for b in dims[1:]]

    def forward(self, rilf):
        x = A.as_tensor(rilf)
        for lin, bn in zip(self.layers, self.norms):
            x = A.relu(bn(lin(x)))
        return x.max(axis=-2)


class PositionEmbedding(Module):
    def __init__(self, cfg, rng):
        super().__init__()
        self.fc1 = A.Linear(5, cfg.pos_hidden, rng)
        self.fc2 = A.Linear(cfg.pos_hidden, cfg.embed_dim, rng)

    def forward(self, rigf):
        return self.fc2(A.gelu(self.fc1(A.as_tensor(rigf))))


class Encoder(Module):
    def __init__(self, cfg, rng, depth=None):
        super().__init__()
        depth = cfg.encoder_blocks if depth is None else depth
        self.blocks = [A.TransformerBlock(cfg.embed_dim, cfg.heads, rng, cfg.mlp_ratio)
                       for _ in range(depth)]
        self.norm = A.LayerNorm(cfg.embed_dim)

    def forward(self, tokens, positions, return_all=False):
        """Positions are re-added before every block; returns the normed final
        output and, with ``return_all``, the raw output of each block."""
        x = tokens
        outs = []
        for blk in self.blocks:
            x = blk(x + positions)
            outs.append(x)
        final = self.norm(x)
        return (final, outs) if return_all else final


class ClassificationHead(Module):
    """Mean over patches, then (affine, dropout, ReLU, batch norm) stages and a final affine."""

    def __init__(self, cfg, rng):
        super().__init__()
        dims = (cfg.global_dim,) + cfg.cls_hidden
        self.layers = [A.Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.drops = [A.Dropout(cfg.head_dropout) for _ in dims[1:]]
        self.norms = [A.BatchNorm(b) for b in dims[1:]]
        self.out = A.Linear(dims[-1], cfg.cls_dim, rng)

    def forward(self, pooled):
        x = pooled
        for lin, drop, bn in zip(self.layers, self.drops, self.norms):
            x = bn(A.relu(drop(lin(x))))
        return self.out(x)


class SegmentationHead(Module):
    def __init__(self, cfg, rng):
        super().__init__()
        self.cfg = cfg
        self.blocks = [A.TransformerBlock(cfg.embed_dim, cfg.heads, rng, cfg.mlp_ratio)
                       for _ in range(cfg.seg_extra_blocks)]
        self.label = A.Linear(cfg.cls_dim, cfg.seg_label_dim, rng)
        dims = (cfg.seg_concat_dim,) + cfg.seg_hidden
        self.layers = [A.Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.norms = [A.BatchNorm(b) for b in dims[1:]]
        self.drops = [A.Dropout(cfg.head_dropout) for _ in dims[1:]]
        self.out = A.Linear(dims[-1], cfg.seg_dim, rng)

    def forward(self, tokens, label_onehot, assignment):
        """``assignment`` (B, P, k) holds each point's k nearest patch indices."""
        b, n_p, d = tokens.shape
        assignment = np.asarray(assignment, dtype=np.int64)
        if assignment.ndim == 2:
            assignment = assignment[..., None]
        _, n_pts, k = assignment.shape
        x = tokens
        widened = []
        for blk in self.blocks:
            x = blk(x)
            widened.append(x)
        wide = A.concat(widened, axis=-1)  # (B, N_p, 3D)
        flat = wide.reshape(b * n_p, wide.shape[-1])
        offsets = (np.arange(b) * n_p)[:, None, None]
        local = A.gather_rows(flat, assignment + offsets)  # (B, P, k, 3D)
        avg = local.mean(axis=2)
        mx = local.max(axis=2)
        lab = self.label(A.as_tensor(label_onehot)).reshape(b, 1, self.cfg.seg_label_dim)
        lab = lab + Tensor(np.zeros((b, n_pts, self.cfg.seg_label_dim)))
        h = A.concat([avg, mx, lab], axis=-1)
        for lin, bn, drop in zip(self.layers, self.norms, self.drops):
            h = drop(A.relu(bn(lin(h))))
        return self.out(h)


class HfbriMae(Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.init_seed)
        d = cfg.embed_dim
        self.token_embed = TokenEmbedding(cfg, rng)
        self.pos_embed = PositionEmbedding(cfg, rng)
        self.encoder = Encoder(cfg, rng)
        self.decoder = Encoder(cfg, rng, depth=cfg.decoder_blocks)
        self.mask_token = Parameter(rng.normal(0.0, 0.02, size=d))
        self.recon = A.Linear(d, cfg.points_per_patch * 3, rng)
        self.cls_head = ClassificationHead(cfg, rng)
        self.seg_head = SegmentationHead(cfg, rng)
        self.reseed(np.random.default_rng([cfg.init_seed, 1]))

    # -- embeddings -------------------------------------------------------
    def embed_tokens(self, rilf):
        rilf = np.asarray(rilf)
        if rilf.shape[-1] != 8:
            raise ShapeError(f"RILF must have 8 columns, got {rilf.shape}")
        return self.token_embed(rilf)

    def embed_positions(self, rigf):
        rigf = np.asarray(rigf)
        if rigf.shape[-1] != 5:
            raise ShapeError(f"RIGF must have 5 entries, got {rigf.shape}")
        return self.pos_embed(rigf)

    def encode(self, tokens, positions, return_all=False):
        if tokens.shape != positions.shape or tokens.shape[-1] != self.cfg.embed_dim:
            raise ShapeError(f"encode: tokens {tokens.shape} vs positions {positions.shape}")
        return self.encoder(tokens, positions, return_all)

    # -- pretraining path --------------------------------------------------
    def decode(self, latent, positions_all, mask):
        """Reconstruct aligned coordinates of the masked patches.

        ``mask`` is (N_p,) or (B, N_p); the sequence is visible latents in
        ascending patch order followed by one mask token per masked patch,
        also ascending. Returns (B, N_m, K, 3).
        """
        b, n_p, d = positions_all.shape
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), (b, n_p))
        n_m = int(mask[0].sum())
        n_v = n_p - n_m
        if latent.shape != (b, n_v, d):
            raise ShapeError(f"decode: latent {latent.shape} does not match {n_v} visible patches")
        order = np.argsort(mask, axis=1, kind="stable")  # visible first, then masked
        pos = _gather_patches(positions_all, order)
        filler = Tensor(np.zeros((b, n_m, d))) + self.mask_token
        x = A.concat([latent, filler], axis=1)
        x = self.decoder(x, pos)
        masked_out = x[:, n_v:, :]
        k = self.cfg.points_per_patch
        return self.recon(masked_out).reshape(b, n_m, k, 3)

    def reconstruct(self, feats, masks):
        """Full masked-autoencoder forward on a FeatureBatch; returns (pred, masks)."""
        masks = np.asarray(masks, dtype=bool)
        b, n_p = masks.shape
        vis = np.stack([np.flatnonzero(~m) for m in masks])
        rows = np.arange(b)[:, None]
        tokens = self.embed_tokens(feats.rilf[rows, vis])
        positions = self.embed_positions(feats.rigf)
        latent = self.encode(tokens, _gather_patches(positions, vis))
        return self.decode(latent, positions, masks)

    # -- downstream paths --------------------------------------------------
    def encode_all(self, feats):
        """Encoder over every patch (masking disabled): (final, per-block outputs)."""
        tokens = self.embed_tokens(feats.rilf)
        positions = self.embed_positions(feats.rigf)
        return self.encode(tokens, positions, return_all=True)

    def classify(self, feats):
        _, outs = self.encode_all(feats)
        pooled = A.concat(outs, axis=-1).mean(axis=1)
        return self.cls_head(pooled)

    def segment(self, feats, label_onehot, assignment):
        final, _ = self.encode_all(feats)
        return self.seg_head(final, label_onehot, assignment)

    def encoder_parameters(self):
        heads = {id(p) for p in self.cls_head.parameters() + self.seg_head.parameters()}
        return [p for p in self.parameters() if id(p) not in heads]


def global_feature(tokens):
    """Elementwise max plus elementwise mean over the patch axis: (B, N_p, D) -> (B, D)."""
    return tokens.max(axis=1) + tokens.mean(axis=1)


def _gather_patches(x, idx):
    """Per-batch row gather: x (B, N, D), idx (B, M) -> (B, M, D)."""
    b, n, d = x.shape
    flat = x.reshape(b * n, d)
    return A.gather_rows(flat, np.asarray(idx) + (np.arange(b) * n)[:, None])


def masked_targets(feats, aligned_points, masks):
    """Aligned coordinates of every masked patch's members: (B, N_m, K, 3).

    ``feats.members`` index the rotated input; the indices are rotation
    invariant, so they address the same points in the aligned copy.
    """
    masks = np.asarray(masks, dtype=bool)
    out = []
    for b in range(masks.shape[0]):
        out.append(aligned_points[b][feats.members[b][masks[b]]])
    return np.stack(out)


def reconstruction_loss(model, feats, aligned_points, masks):
    """Mean Chamfer distance over all masked patches of the batch."""
    pred = model.reconstruct(feats, masks)
    target = masked_targets(feats, aligned_points, masks)
    return chamfer(pred, target).mean(), pred, target
