"""Pretraining, finetuning and frozen-feature extraction loops."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass

import numpy as np

from . import adiff as A
from .checkpoint import save_checkpoint
from .data import derive_seed, featurize, rotate_clouds
from .errors import DataError, NumericError
from .geom import nearest_patch, PatchSet
from .mae import global_feature, reconstruction_loss, sample_mask

log = logging.getLogger(__name__)

# seed stream tags, so that e.g. the mask of cloud 3 never shares a stream with its rotation
_ORDER, _ROTATE, _MASK, _DROPOUT, _TEST_ROTATE = range(5)


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    lr: float
    wall_seconds: float
    accuracy: float = float("nan")


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _check_finite(value, step):
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss {value}", step=step)


def rotated_features(model, clouds, setting, seed_fn, drop_groups=(), threads=1):
    cfg = model.cfg
    seeds = [seed_fn(i) for i in range(len(clouds))]
    pts, _ = rotate_clouds(clouds, setting, seeds)
    return featurize(pts, cfg.n_patches, cfg.points_per_patch, cfg.start_index, drop_groups, threads)


def pretrain(model, dataset, epochs, batch_size=16, lr=1e-3, weight_decay=0.05, rotation="R",
             seed=0, threads=1, drop_groups=(), checkpoint_every=0, checkpoint_dir=None,
             on_epoch=None):
    """Masked-reconstruction pretraining; returns one EpochRecord per epoch.

    Every epoch draws a fresh rotation per cloud (applied before feature
    extraction) and a fresh mask per cloud; the targets are the aligned
    coordinates. Raises NumericError naming the step on a non-finite loss.
    """
    cfg = model.cfg
    clouds = dataset.clouds
    if not clouds:
        raise DataError("pretraining needs at least one cloud")
    steps_per_epoch = math.ceil(len(clouds) / batch_size)
    total = epochs * steps_per_epoch
    opt = A.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    model.train()
    model.reseed(np.random.default_rng(derive_seed(seed, _DROPOUT)))
    history = []
    step = 0
    start = time.perf_counter()
    for epoch in range(epochs):
        rng = np.random.default_rng(derive_seed(seed, _ORDER, epoch))
        losses, current_lr = [], lr
        for idx in _batches(len(clouds), batch_size, rng):
            batch = [clouds[i] for i in idx]
            feats = rotated_features(
                model, batch, rotation, lambda j: derive_seed(seed, _ROTATE, epoch, idx[j]),
                drop_groups, threads,
            )
            aligned = np.stack([c.points for c in batch])
            masks = np.stack([
                sample_mask(cfg.n_patches, cfg.mask_ratio, derive_seed(seed, _MASK, epoch, i))
                for i in idx
            ])
            loss, _, _ = reconstruction_loss(model, feats, aligned, masks)
            value = float(loss.item())
            _check_finite(value, step)
            opt.zero_grad()
            loss.backward()
            current_lr = A.cosine_lr(step, total, lr)
            opt.step(current_lr)
            losses.append(value)
            step += 1
        rec = EpochRecord(epoch + 1, float(np.mean(losses)), current_lr, time.perf_counter() - start)
        history.append(rec)
        log.info("pretrain epoch %d loss %.5f lr %.2e", rec.epoch, rec.mean_loss, rec.lr)
        if checkpoint_every and checkpoint_dir is not None and (epoch + 1) % checkpoint_every == 0:
            save_checkpoint(f"{checkpoint_dir}/checkpoint_epoch{epoch + 1:04d}.hfbm", model, step)
        if on_epoch is not None:
            on_epoch(rec)
    model.eval()
    return history


def global_features(model, clouds, setting="A", seed=0, batch_size=32, threads=1, pooling="maxmean",
                    drop_groups=()):
    """Frozen encoder features for each cloud after rotating it by ``setting``.

    ``pooling="maxmean"`` sums max and mean pooling of the final encoder
    output; ``"concat"`` averages the concatenated per-block outputs (the
    classification-head input).
    """
    model.eval()
    out = []
    with A.no_grad():
        for lo in range(0, len(clouds), batch_size):
            batch = clouds[lo:lo + batch_size]
            feats = rotated_features(
                model, batch, setting, lambda j: derive_seed(seed, _TEST_ROTATE, lo + j),
                drop_groups, threads,
            )
            final, outs = model.encode_all(feats)
            if pooling == "maxmean":
                g = global_feature(final)
            elif pooling == "concat":
                g = A.concat(outs, axis=-1).mean(axis=1)
            else:
                raise ValueError(f"unknown pooling {pooling!r}")
            out.append(np.asarray(g.data, dtype=np.float64))
    return np.concatenate(out, axis=0)


def patch_assignment(feats, k):
    """Per point, its ``k`` nearest patch centers: (B, P, k)."""
    return np.stack([
        nearest_patch(pts, PatchSet(c, None, None), k) for pts, c in zip(feats.points, feats.centers)
    ])


def _onehot(labels, n):
    out = np.zeros((len(labels), n))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _task_logits(model, task, feats, batch):
    cfg = model.cfg
    if task == "classification":
        return model.classify(feats)
    labels = np.array([c.label for c in batch])
    logits = model.segment(feats, _onehot(labels, cfg.cls_dim), patch_assignment(feats, cfg.seg_neighbors))
    return logits.reshape(-1, cfg.seg_dim)


def _task_targets(task, batch):
    if task == "classification":
        return np.array([c.label for c in batch], dtype=np.int64)
    if any(c.part_labels is None for c in batch):
        raise DataError("segmentation finetuning needs per-point part labels")
    return np.concatenate([c.part_labels for c in batch]).astype(np.int64)


def task_parameters(model, task, head_only):
    head = model.cls_head if task == "classification" else model.seg_head
    if head_only:
        return head.parameters()
    return model.encoder_parameters() + head.parameters()


def predict(model, task, clouds, setting="A", seed=0, batch_size=32, threads=1):
    """Predicted class per cloud, or concatenated per-point part labels for segmentation."""
    model.eval()
    out = []
    with A.no_grad():
        for lo in range(0, len(clouds), batch_size):
            batch = clouds[lo:lo + batch_size]
            feats = rotated_features(
                model, batch, setting, lambda j: derive_seed(seed, _TEST_ROTATE, lo + j), (), threads,
            )
            out.append(_task_logits(model, task, feats, batch).data.argmax(axis=-1))
    return np.concatenate(out)


def evaluate(model, task, dataset, setting="A", seed=0, batch_size=32, threads=1):
    """Accuracy (per cloud, or per point for segmentation) under test rotation ``setting``."""
    pred = predict(model, task, dataset.clouds, setting, seed, batch_size, threads)
    target = _task_targets(task, dataset.clouds)
    return float(np.mean(pred == target))


def finetune(model, task, train_set, test_set=None, epochs=10, batch_size=16, lr=1e-3,
             weight_decay=0.05, rotation="R", test_rotation="R", head_only=False, seed=0,
             threads=1, on_epoch=None):
    """Supervised training of a task head with masking disabled.

    ``head_only`` trains just the head; the backbone runs in eval mode so
    neither its parameters nor its normalization statistics change.
    Returns EpochRecords whose ``accuracy`` is the test accuracy (or NaN
    without a test set).
    """
    if task not in ("classification", "segmentation"):
        raise ValueError(f"unknown task {task!r}")
    clouds = train_set.clouds
    params = task_parameters(model, task, head_only)
    head = model.cls_head if task == "classification" else model.seg_head
    steps_per_epoch = math.ceil(len(clouds) / batch_size)
    total = epochs * steps_per_epoch
    opt = A.AdamW(params, lr=lr, weight_decay=weight_decay)
    model.reseed(np.random.default_rng(derive_seed(seed, _DROPOUT)))
    history = []
    step = 0
    start = time.perf_counter()
    for epoch in range(epochs):
        if head_only:
            model.eval()
            head.train()
        else:
            model.train()
        rng = np.random.default_rng(derive_seed(seed, _ORDER, epoch))
        losses, current_lr = [], lr
        for idx in _batches(len(clouds), batch_size, rng):
            if len(idx) < 2:
                continue  # batch norm needs more than one row
            batch = [clouds[i] for i in idx]
            feats = rotated_features(
                model, batch, rotation, lambda j: derive_seed(seed, _ROTATE, epoch, idx[j]), (), threads,
            )
            logits = _task_logits(model, task, feats, batch)
            loss = A.cross_entropy(logits, _task_targets(task, batch))
            value = float(loss.item())
            _check_finite(value, step)
            model.zero_grad()
            loss.backward()
            current_lr = A.cosine_lr(step, total, lr)
            opt.step(current_lr)
            losses.append(value)
            step += 1
        acc = float("nan")
        if test_set is not None:
            acc = evaluate(model, task, test_set, test_rotation, seed, threads=threads)
        rec = EpochRecord(epoch + 1, float(np.mean(losses)), current_lr, time.perf_counter() - start, acc)
        history.append(rec)
        log.info("finetune %s epoch %d loss %.4f acc %.4f", task, rec.epoch, rec.mean_loss, acc)
        if on_epoch is not None:
            on_epoch(rec)
    model.eval()
    return history
