"""scikit-learn wrapper around an SDNN: fit on base classes, then imprint novel ones."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import tensor as T
from .heads import imprint_weights, predict_labels
from .model import SdnnModel, TrainConfig, default_blocks, fit, forward_eval
from .noise import NO_NOISE, NoiseSpec


def check_images(X, estimator=None) -> np.ndarray:
    """Validate an N x H x W x C image batch and return it as float32."""
    X = check_array(X, allow_nd=True, dtype=np.float32, estimator=estimator)
    if X.ndim != 4:
        raise ValueError(f"expected images shaped N x H x W x C, got an array with {X.ndim} dimensions")
    return X


class SDNNClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Self-denoising network with cosine heads.

    ``fit`` pretrains on labelled images; ``transform`` returns the
    concatenated, L2-normalised per-head embeddings; ``imprint`` swaps in
    class weights built from a few labelled examples of new classes.
    Images are standardised per channel with statistics from ``fit``.
    """

    def __init__(self, channels=(16, 16, 32, 64), convs_per_block=2, embed_dim=64, aux=True,
                 noise="gaussian", spatial=False, sigma=0.06, p_drop=0.1, noise_blocks=None,
                 pool_mode="max", pool_target=2, epochs=26, lr=0.1, milestones=(20, 23), momentum=0.9,
                 batch_size=32, gamma_init=10.0, random_state=0):
        self.channels = channels
        self.convs_per_block = convs_per_block
        self.embed_dim = embed_dim
        self.aux = aux
        self.noise = noise
        self.spatial = spatial
        self.sigma = sigma
        self.p_drop = p_drop
        self.noise_blocks = noise_blocks
        self.pool_mode = pool_mode
        self.pool_target = pool_target
        self.epochs = epochs
        self.lr = lr
        self.milestones = milestones
        self.momentum = momentum
        self.batch_size = batch_size
        self.gamma_init = gamma_init
        self.random_state = random_state

    def _build(self, in_channels: int, num_classes: int) -> SdnnModel:
        n_blocks = len(self.channels) - 1
        flags = self.noise_blocks if self.noise_blocks is not None else [True] * n_blocks
        spec = NoiseSpec(self.noise, self.spatial, self.sigma, self.p_drop)
        blocks = default_blocks(tuple(self.channels), self.convs_per_block,
                                [spec if on else NO_NOISE for on in flags],
                                [self.aux] * (n_blocks - 1) + [True])
        return SdnnModel(in_channels, num_classes, blocks, self.channels[0], self.embed_dim,
                         self.pool_target, self.pool_mode, self.gamma_init, int(self.random_state or 0))

    def _standardize(self, X):
        return ((X - self.mean_) / self.std_).astype(np.float32)

    def fit(self, X, y):
        X = check_images(X, self)
        _, y = check_X_y(X.reshape(X.shape[0], -1), y, estimator=self)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise ValueError("need at least two classes to fit")
        self.mean_ = X.mean(axis=(0, 1, 2))
        self.std_ = np.maximum(X.std(axis=(0, 1, 2)), 1e-6)
        self.model_ = self._build(X.shape[3], self.classes_.size)
        cfg = TrainConfig(epochs=self.epochs, lr=self.lr, milestones=tuple(self.milestones),
                          momentum=self.momentum, batch_size=self.batch_size, seed=int(self.random_state or 0))
        self.history_ = fit(self.model_, self._standardize(X), y_enc, cfg)
        self.class_weights_ = None
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = check_images(X, self)
        embs = self.model_.embed(self._standardize(X))
        return np.hstack([e / np.sqrt(np.sum(e * e, axis=1, keepdims=True) + 1e-12) for e in embs])

    def imprint(self, X, y):
        """Replace every head's class weights by normalised-mean support embeddings of ``y``'s classes."""
        check_is_fitted(self, "model_")
        X = check_images(X, self)
        _, y = check_X_y(X.reshape(X.shape[0], -1), y, estimator=self)
        classes = np.unique(y)
        embs = self.model_.embed(self._standardize(X))
        self.class_weights_ = [imprint_weights([e[y == c] for c in classes]) for e in embs]
        self.classes_ = classes
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        X = check_images(X, self)
        return forward_eval(self.model_, self._standardize(X), self.class_weights_)

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[predict_labels(proba)]
