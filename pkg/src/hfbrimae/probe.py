"""Frozen-feature evaluation: a linear max-margin probe, rotation grids and few-shot episodes."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import Dataset, derive_seed
from .errors import DataError
from .geom import ROTATION_SETTINGS

GRID_HEADER = ("train_setting", "test_setting", "accuracy", "n_test", "seed")


def _hinge(W, b, X, y, lam):
    """Crammer-Singer hinge loss with L2 penalty, and its subgradient."""
    n = X.shape[0]
    scores = X @ W.T + b
    rows = np.arange(n)
    true = scores[rows, y]
    rival = scores.copy()
    rival[rows, y] = -np.inf
    j = rival.argmax(axis=1)
    slack = 1.0 + rival[rows, j] - true
    active = slack > 0
    loss = slack[active].sum() / n + 0.5 * lam * float((W * W).sum())
    coef = np.zeros_like(scores)
    coef[rows[active], j[active]] += 1.0
    coef[rows[active], y[active]] -= 1.0
    coef /= n
    return loss, coef.T @ X + lam * W, coef.sum(axis=0)


class LinearProbe(ClassifierMixin, BaseEstimator):
    """Multi-class linear SVM fitted by full-batch (sub)gradient descent.

    Features are standardized per dimension with statistics kept on the
    probe. A step that would raise the objective is halved until it does
    not (up to ``max_halvings`` times, then the epoch is skipped), so the
    training loss never increases.
    """

    def __init__(self, lam=1e-3, epochs=200, lr=0.1, seed=0, max_halvings=20):
        self.lam = lam
        self.epochs = epochs
        self.lr = lr
        self.seed = seed
        self.max_halvings = max_halvings

    def fit(self, X, y, classes=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = unique_labels(y) if classes is None else np.asarray(classes)
        missing = [c for c in self.classes_ if not np.any(y == c)]
        if missing:
            raise DataError(f"no training examples for class(es) {missing}")
        yi = np.searchsorted(self.classes_, y)
        self.mean_ = X.mean(axis=0)
        std = X.std(axis=0)
        self.scale_ = np.where(std > 1e-12, std, 1.0)
        Z = (X - self.mean_) / self.scale_
        n_cls, dim = len(self.classes_), X.shape[1]
        # tiny seeded start so symmetric classes do not tie at zero
        rng = np.random.default_rng(self.seed)
        W = 1e-6 * rng.standard_normal((n_cls, dim))
        b = np.zeros(n_cls)
        loss, gW, gb = _hinge(W, b, Z, yi, self.lam)
        self.loss_curve_ = [loss]
        for _ in range(self.epochs):
            step = self.lr
            for _ in range(self.max_halvings + 1):
                W_new, b_new = W - step * gW, b - step * gb
                new_loss, new_gW, new_gb = _hinge(W_new, b_new, Z, yi, self.lam)
                if new_loss <= loss:
                    W, b, loss, gW, gb = W_new, b_new, new_loss, new_gW, new_gb
                    break
                step *= 0.5
            self.loss_curve_.append(loss)
        self.coef_ = W / self.scale_
        self.intercept_ = b - self.coef_ @ self.mean_
        self.weights_, self.bias_ = W, b
        self.n_features_in_ = dim
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        Z = (X - self.mean_) / self.scale_
        return Z @ self.weights_.T + self.bias_

    def predict(self, X):
        check_is_fitted(self, "coef_")
        return self.classes_[self.decision_function(X).argmax(axis=1)]


def train_probe(features, labels, epochs=200, lr=0.1, seed=0, lam=1e-3, classes=None):
    return LinearProbe(lam=lam, epochs=epochs, lr=lr, seed=seed).fit(features, labels, classes)


def few_shot_episode(dataset: Dataset, ways, shots, queries, seed):
    """Sample ``ways`` classes, then disjoint support and query clouds per class."""
    labels = dataset.labels
    classes = np.unique(labels)
    if ways > classes.shape[0]:
        raise DataError(f"{ways}-way episode needs {ways} classes, dataset has {classes.shape[0]}")
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(classes, size=ways, replace=False))
    support, query = [], []
    for c in chosen:
        idx = np.flatnonzero(labels == c)
        if idx.shape[0] < shots + queries:
            name = dataset.class_names[c] if c < len(dataset.class_names) else c
            raise DataError(
                f"class {name!r} has {idx.shape[0]} examples, episode needs {shots + queries}"
            )
        pick = rng.permutation(idx)[:shots + queries]
        support.extend(sorted(pick[:shots].tolist()))
        query.extend(sorted(pick[shots:].tolist()))
    return dataset.subset(support), dataset.subset(query)


def evaluate_grid(extract, train_set, test_set, train_settings=ROTATION_SETTINGS,
                  test_settings=ROTATION_SETTINGS, seed=0, probe_params=None):
    """Probe accuracy for every (train rotation, test rotation) pair.

    ``extract(clouds, setting, seed)`` returns frozen features. Returns rows
    ``(train_setting, test_setting, accuracy, n_test, seed)``.
    """
    probe_params = dict(probe_params or {})
    y_train, y_test = train_set.labels, test_set.labels
    test_feats = {
        y: extract(test_set.clouds, y, derive_seed(seed, 1, ROTATION_SETTINGS.index(y)))
        for y in test_settings
    }
    rows = []
    for x in train_settings:
        feats = extract(train_set.clouds, x, derive_seed(seed, 0, ROTATION_SETTINGS.index(x)))
        probe = train_probe(feats, y_train, seed=seed, **probe_params)
        for y in test_settings:
            acc = float(np.mean(probe.predict(test_feats[y]) == y_test))
            rows.append((x, y, acc, len(y_test), seed))
    return rows


def few_shot_accuracies(extract, dataset, ways, shots, queries, episodes=10, seed=0,
                        train_setting="R", test_setting="R", probe_params=None):
    """Probe accuracy on each of ``episodes`` independently drawn episodes."""
    probe_params = dict(probe_params or {})
    accs = []
    for e in range(episodes):
        support, query = few_shot_episode(dataset, ways, shots, queries, derive_seed(seed, e))
        fs = extract(support.clouds, train_setting, derive_seed(seed, e, 0))
        fq = extract(query.clouds, test_setting, derive_seed(seed, e, 1))
        probe = train_probe(fs, support.labels, seed=seed, **probe_params)
        accs.append(float(np.mean(probe.predict(fq) == query.labels)))
    return accs
