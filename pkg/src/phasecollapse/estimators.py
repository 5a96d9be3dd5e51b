"""scikit-learn style front ends.

:class:`ScatteringTransform` is a stateless transformer producing plain
scattering features; :class:`LearnedScatteringClassifier` trains a learned
scattering network with its linear classifier.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_is_fitted

from .exceptions import ParameterError
from .io import DatasetBatch
from .learn import Model, SGDConfig, train
from .network import CIFAR_WIDTHS, NetworkConfig, ScatteringNetwork


def check_images(X, in_channels=None, image_size=None) -> np.ndarray:
    """Validate a batch of real images and return it as ``(n, C, H, W)`` float64.

    Accepts ``(n, C, H, W)``, ``(n, H, W)`` (single channel) or flat
    ``(n, C*H*W)`` rows, the last only when ``in_channels`` and
    ``image_size`` pin down the layout.
    """
    X = np.asarray(X)
    if np.iscomplexobj(X):
        raise ParameterError("images must be real")
    X = X.astype(np.float64, copy=False)
    if X.ndim == 2:
        if in_channels is None or image_size is None:
            raise ParameterError("flat input needs in_channels and image_size")
        expected = in_channels * image_size * image_size
        if X.shape[1] != expected:
            raise ParameterError(f"flat rows must have {expected} entries, got {X.shape[1]}")
        X = X.reshape(len(X), in_channels, image_size, image_size)
    elif X.ndim == 3:
        X = X[:, None]
    elif X.ndim != 4:
        raise ParameterError(f"expected 2-, 3- or 4-d image batch, got shape {X.shape}")
    if len(X) == 0:
        raise ParameterError("empty image batch")
    if in_channels is not None and X.shape[1] != in_channels:
        raise ParameterError(f"expected {in_channels} channels, got {X.shape[1]}")
    if X.shape[2] != X.shape[3]:
        raise ParameterError(f"images must be square, got {X.shape[2]}x{X.shape[3]}")
    if image_size is not None and X.shape[2] != image_size:
        raise ParameterError(f"expected {image_size}x{image_size} images, got {X.shape[2]}x{X.shape[3]}")
    if not np.all(np.isfinite(X)):
        raise ParameterError("images contain NaN or infinity")
    return X


def _batched(fn, X, batch_size):
    return np.concatenate([fn(X[s:s + batch_size]) for s in range(0, len(X), batch_size)])


class ScatteringTransform(TransformerMixin, BaseEstimator):
    """Plain scattering features ``|W ... |W x| ...|`` of depth ``J``.

    ``transform`` returns real features flattened to ``(n, C*H*W)``; with
    ``flatten=False`` the ``(n, C, H, W)`` maps are returned instead.
    """

    def __init__(self, J=3, L=4, grid=None, flatten=True, batch_size=256):
        self.J = J
        self.L = L
        self.grid = grid
        self.flatten = flatten
        self.batch_size = batch_size

    def _config(self, X):
        return NetworkConfig.plain(self.J, L=self.L, in_channels=X.shape[1],
                                   image_size=X.shape[2], grid=self.grid)

    def fit(self, X, y=None):
        X = check_images(X)
        self.config_ = self._config(X)
        self.config_.output_shape()
        self.network_ = ScatteringNetwork(self.config_)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.output_shape_ = self.config_.output_shape()
        return self

    def transform(self, X):
        check_is_fitted(self, "network_")
        X = check_images(X, self.config_.in_channels, self.config_.image_size)
        out = _batched(lambda b: self.network_.forward(b)[0].real, X, self.batch_size)
        return out.reshape(len(out), -1) if self.flatten else out


class LearnedScatteringClassifier(ClassifierMixin, BaseEstimator):
    """Learned scattering network with a linear classifier, trained by SGD.

    ``widths=None`` uses the desk-scale CIFAR widths truncated to ``depth``.
    Labels may be arbitrary hashable values; they are encoded internally.
    """

    def __init__(self, depth=6, widths=None, L=4, nonlin="modulus", skip=False, learned=True,
                 subsample_period=2, grid=None, lr=0.01, momentum=0.9, weight_decay=1e-4,
                 batch_size=128, epochs=30, lr_period=70, augment=False, random_state=0):
        self.depth = depth
        self.widths = widths
        self.L = L
        self.nonlin = nonlin
        self.skip = skip
        self.learned = learned
        self.subsample_period = subsample_period
        self.grid = grid
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.lr_period = lr_period
        self.augment = augment
        self.random_state = random_state

    def _network_config(self, X):
        if not self.learned:
            return NetworkConfig.plain(self.depth, L=self.L, in_channels=X.shape[1], image_size=X.shape[2],
                                       grid=self.grid, subsample_period=self.subsample_period,
                                       seed=self.random_state)
        widths = self.widths
        if widths is None:
            widths = tuple(w // 2 for w in CIFAR_WIDTHS)[:self.depth]
            widths = widths + (widths[-1],) * (self.depth - len(widths))
        return NetworkConfig(depth=self.depth, widths=tuple(widths), L=self.L, nonlin=self.nonlin,
                             skip=self.skip, subsample_period=self.subsample_period,
                             seed=self.random_state, in_channels=X.shape[1], image_size=X.shape[2],
                             grid=self.grid)

    def _sgd_config(self):
        return SGDConfig(lr=self.lr, momentum=self.momentum, weight_decay=self.weight_decay,
                         batch_size=self.batch_size, epochs=self.epochs, lr_period=self.lr_period,
                         augment=self.augment, checkpoint_every=0)

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_images(X)
        y = np.asarray(y)
        if len(y) != len(X):
            raise ParameterError(f"{len(X)} images but {len(y)} labels")
        self.classes_ = unique_labels(y)
        labels = np.searchsorted(self.classes_, y)
        config = self._network_config(X)
        self.model_ = Model(config, len(self.classes_))
        val = None
        if X_val is not None:
            X_val = check_images(X_val, config.in_channels, config.image_size)
            val = DatasetBatch(X_val, np.searchsorted(self.classes_, np.asarray(y_val)))
        self.report_ = train(self.model_, DatasetBatch(X, labels), val, self._sgd_config(),
                             seed=self.random_state)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def _images(self, X):
        check_is_fitted(self, "model_")
        c = self.model_.config
        return check_images(X, c.in_channels, c.image_size)

    def decision_function(self, X):
        return self.model_.logits(self._images(X), self.batch_size)

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]
