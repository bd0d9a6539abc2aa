"""scikit-learn style wrappers around the feature extractor and the model.

``X`` is a sequence of clouds: PointCloud objects or (N, 3) arrays, all in
their canonical pose. Rotations are applied internally per the configured
setting, so callers never rotate by hand.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, featurize
from .errors import DataError
from .mae import HfbriMae, ModelConfig
from .pcio import PointCloud
from .training import evaluate, finetune, global_features, predict, pretrain


def as_clouds(X, y=None):
    """Validate a cloud sequence; attach labels from ``y`` when given."""
    if isinstance(X, Dataset):
        X = X.clouds
    if isinstance(X, np.ndarray) and X.ndim == 2:
        X = [X]
    clouds = []
    for i, c in enumerate(X):
        if not isinstance(c, PointCloud):
            arr = np.asarray(c, dtype=np.float64)
            if arr.ndim != 2 or arr.shape[1] != 3:
                raise DataError(f"cloud {i} has shape {arr.shape}, expected (N, 3)")
            c = PointCloud(arr)
        if y is not None:
            c = PointCloud(c.points, label=int(y[i]), part_labels=c.part_labels)
        clouds.append(c)
    if not clouds:
        raise DataError("empty cloud sequence")
    if y is not None and len(y) != len(clouds):
        raise DataError(f"{len(clouds)} clouds but {len(y)} labels")
    return clouds


def _config(config):
    if config is None:
        return ModelConfig()
    if isinstance(config, ModelConfig):
        return config
    return ModelConfig.from_dict(dict(config))


class RIHFTransformer(TransformerMixin, BaseEstimator):
    """Stateless rotation-invariant feature extractor.

    ``transform`` returns one row per cloud: every patch's RILF matrix
    followed by every patch's RIGF vector, flattened.
    """

    def __init__(self, n_patches=32, points_per_patch=16, start_index=0, drop_groups=(), threads=1):
        self.n_patches = n_patches
        self.points_per_patch = points_per_patch
        self.start_index = start_index
        self.drop_groups = drop_groups
        self.threads = threads

    def fit(self, X=None, y=None):
        self.n_features_out_ = self.n_patches * (self.points_per_patch * 8 + 5)
        return self

    def transform_batch(self, X):
        clouds = as_clouds(X)
        return featurize([c.points for c in clouds], self.n_patches, self.points_per_patch,
                         self.start_index, tuple(self.drop_groups), self.threads)

    def transform(self, X):
        fb = self.transform_batch(X)
        b = len(fb)
        return np.concatenate([fb.rilf.reshape(b, -1), fb.rigf.reshape(b, -1)], axis=1)


class HFBRIMAE(TransformerMixin, BaseEstimator):
    """Masked-autoencoder pretraining; ``transform`` yields frozen global features."""

    def __init__(self, config=None, epochs=50, batch_size=16, lr=1e-3, weight_decay=0.05,
                 rotation="R", transform_rotation="R", pooling="maxmean", seed=0, threads=1):
        self.config = config
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.rotation = rotation
        self.transform_rotation = transform_rotation
        self.pooling = pooling
        self.seed = seed
        self.threads = threads

    def fit(self, X, y=None):
        cfg = _config(self.config)
        self.model_ = HfbriMae(cfg)
        data = Dataset(as_clouds(X), ())
        self.history_ = pretrain(self.model_, data, self.epochs, self.batch_size, self.lr,
                                 self.weight_decay, self.rotation, self.seed, self.threads)
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        return global_features(self.model_, as_clouds(X), self.transform_rotation, self.seed,
                               threads=self.threads, pooling=self.pooling)

    def save(self, path):
        check_is_fitted(self, "model_")
        step = sum(1 for _ in getattr(self, "history_", ()))
        return save_checkpoint(path, self.model_, step)

    @classmethod
    def from_checkpoint(cls, path, **params):
        model, _ = load_checkpoint(path)
        est = cls(config=model.cfg, **params)
        est.model_ = model
        return est


class HFBRIClassifier(ClassifierMixin, BaseEstimator):
    """Cloud classifier: encoder plus classification head, trained with masking off.

    Start from ``backbone`` (a fitted HFBRIMAE, or None for random weights);
    ``head_only`` freezes the encoder.
    """

    def __init__(self, backbone=None, config=None, epochs=20, batch_size=16, lr=1e-3,
                 weight_decay=0.05, rotation="R", test_rotation="R", head_only=False, seed=0,
                 threads=1):
        self.backbone = backbone
        self.config = config
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.rotation = rotation
        self.test_rotation = test_rotation
        self.head_only = head_only
        self.seed = seed
        self.threads = threads

    def _fresh_model(self, n_classes):
        if self.backbone is not None:
            check_is_fitted(self.backbone, "model_")
            src = self.backbone.model_
            cfg = ModelConfig.from_dict({**src.cfg.to_dict(), "cls_dim": n_classes})
            model = HfbriMae(cfg)
            keep = {k: v for k, v in src.state_dict().items() if not k.startswith("cls_head.")}
            model.load_state_dict({**model.state_dict(), **keep})
            return model
        base = _config(self.config).to_dict()
        return HfbriMae(ModelConfig.from_dict({**base, "cls_dim": n_classes}))

    def fit(self, X, y):
        y = np.asarray(y)
        self.classes_ = np.unique(y)
        codes = np.searchsorted(self.classes_, y)
        data = Dataset(as_clouds(X, codes), tuple(str(c) for c in self.classes_))
        self.model_ = self._fresh_model(len(self.classes_))
        self.history_ = finetune(self.model_, "classification", data, None, self.epochs,
                                 self.batch_size, self.lr, self.weight_decay, self.rotation,
                                 self.test_rotation, self.head_only, self.seed, self.threads)
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        pred = predict(self.model_, "classification", as_clouds(X), self.test_rotation, self.seed,
                       threads=self.threads)
        return self.classes_[pred]

    def score(self, X, y, sample_weight=None):
        y = np.asarray(y)
        if sample_weight is None and set(np.unique(y)) <= set(self.classes_):
            data = Dataset(as_clouds(X, np.searchsorted(self.classes_, y)), ())
            return evaluate(self.model_, "classification", data, self.test_rotation, self.seed,
                            threads=self.threads)
        return super().score(X, y, sample_weight)
