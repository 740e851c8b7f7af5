"""scikit-learn compatible wrapper around a binary SE(2,N) classifier."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.model_selection import train_test_split
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import ConfigurationError, DataError
from .models import build_model, preset
from .training import Dataset, TrainConfig, train


def _as_images(X, channels=None) -> np.ndarray:
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float32)
    if X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4:
        raise DataError(f"expected images [n, H, W] or [n, H, W, C], got {X.ndim} dims")
    if channels is not None and X.shape[-1] != channels:
        raise DataError(f"expected {channels} channels, got {X.shape[-1]}")
    return X


class SE2CNNClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Binary image classifier built from a ``task`` preset at ``N`` orientations.

    ``transform`` returns the rotation-invariant features that feed the head
    (the projected map, flattened per sample).
    """

    def __init__(self, task="synth-cls", N=8, epochs=8, lr=0.01, momentum=0.9,
                 weight_decay=5e-4, batch_size=64, patience=5, augment=True,
                 validation_fraction=0.1, random_state=0):
        self.task = task
        self.N = N
        self.epochs = epochs
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.patience = patience
        self.augment = augment
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def fit(self, X, y):
        cfg = preset(self.task, self.N)
        if cfg.layers[-1].activation != "sigmoid":
            raise ConfigurationError(f"{self.task} is not a binary classification preset")
        X = _as_images(X, cfg.input_shape[-1])
        y = np.asarray(y)
        if len(y) != len(X):
            raise DataError(f"{len(X)} images but {len(y)} labels")
        check_classification_targets(y)
        self.classes_ = np.unique(y)
        if len(self.classes_) != 2:
            raise DataError(f"need exactly 2 classes, got {len(self.classes_)}")
        yi = np.searchsorted(self.classes_, y)
        if not 0 < self.validation_fraction < 1:
            raise ConfigurationError("validation_fraction must lie in (0, 1)")
        Xt, Xv, yt, yv = train_test_split(X, yi, test_size=self.validation_fraction,
                                          stratify=yi, random_state=self.random_state)
        self.model_ = build_model(cfg, self.random_state)
        tc = TrainConfig(lr=self.lr, momentum=self.momentum, weight_decay=self.weight_decay,
                         batch_size=self.batch_size, epochs=self.epochs, patience=self.patience,
                         seed=self.random_state, augment=self.augment)
        self.history_ = train(self.model_, Dataset(Xt, yt), Dataset(Xv, yv, split="val"), tc)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def _forward(self, X, batch_size=256):
        check_is_fitted(self, "model_")
        X = _as_images(X, self.model_.config.input_shape[-1])
        return np.concatenate([self.model_.forward(X[s:s + batch_size])
                               for s in range(0, len(X), batch_size)])

    def predict_proba(self, X):
        p = self._forward(X).reshape(len(X), -1)[:, 0].astype(np.float64)
        return np.stack([1 - p, p], axis=1)

    def predict(self, X):
        positive = self.predict_proba(X)[:, 1] >= 0.5
        return self.classes_[positive.astype(int)]

    def transform(self, X, batch_size=256):
        check_is_fitted(self, "model_")
        X = _as_images(X, self.model_.config.input_shape[-1])
        m = self.model_
        out = []
        for s in range(0, len(X), batch_size):
            h = m.forward(X[s:s + batch_size], upto=len(m.blocks))
            out.append(m.projection.forward(h, False).reshape(len(h), -1))
        return np.concatenate(out)
