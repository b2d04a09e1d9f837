"""Cosine-classifier heads: pool -> FC -> cosine against class weights -> gamma scaling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .noise import Rng

GAMMA_FLOOR = 1e-3
NORM_EPS = 1e-12


@dataclass
class HeadOutput:
    embedding: T.Tensor  # pre-normalisation FC output, N x D
    logits: T.Tensor  # gamma * cosine, N x classes
    probs: np.ndarray


class CosineHead:
    """Per-block classifier whose logits are gamma-scaled cosine similarities.

    Each head owns its own learnable inverse temperature ``gamma``.
    """

    def __init__(self, in_channels: int, num_classes: int, embed_dim: int, rng: Rng,
                 pool_target=(2, 2), pool_mode: str = "max", gamma_init: float = 10.0):
        if isinstance(pool_target, int):
            pool_target = (pool_target, pool_target)
        if embed_dim < 1:
            raise ValueError(f"embed_dim must be >= 1, got {embed_dim}")
        if pool_mode not in ("max", "avg"):
            raise ValueError(f"pool_mode must be 'max' or 'avg', got {pool_mode!r}")
        self.pool_target = tuple(int(v) for v in pool_target)
        self.pool_mode = pool_mode
        self.in_channels = in_channels
        pooled = self.pool_target[0] * self.pool_target[1] * in_channels
        bound = np.sqrt(6.0 / pooled)
        fc = (2.0 * rng.child(0).uniform(pooled * embed_dim) - 1.0) * bound
        cw = rng.child(1).normal(num_classes * embed_dim) / np.sqrt(embed_dim)
        self.fc_weight = T.Tensor(fc.reshape(pooled, embed_dim), requires_grad=True)
        self.fc_bias = T.Tensor(np.zeros(embed_dim), requires_grad=True)
        self.class_weights = T.Tensor(cw.reshape(num_classes, embed_dim), requires_grad=True)
        self.gamma = T.Tensor([gamma_init], requires_grad=True)

    @property
    def embed_dim(self) -> int:
        return self.fc_weight.shape[1]

    @property
    def num_classes(self) -> int:
        return self.class_weights.shape[0]

    def parameters(self) -> dict:
        return {
            "fc_weight": self.fc_weight,
            "fc_bias": self.fc_bias,
            "class_weights": self.class_weights,
            "gamma": self.gamma,
        }

    def clamp_gamma(self) -> None:
        np.maximum(self.gamma.data, T.DTYPE(GAMMA_FLOOR), out=self.gamma.data)

    def embed(self, f: T.Tensor) -> T.Tensor:
        pooled = T.pool2d(f, self.pool_mode, self.pool_target)
        return T.dense(T.flatten(pooled), self.fc_weight, self.fc_bias)

    def __call__(self, f: T.Tensor, class_weights=None) -> HeadOutput:
        return head_forward(self, f, class_weights)


def cosine_logits(embedding: T.Tensor, class_weights: T.Tensor, gamma: T.Tensor) -> T.Tensor:
    e = T.l2_normalize(embedding, NORM_EPS)
    w = T.l2_normalize(class_weights, NORM_EPS)
    return T.scale(T.matmul(e, T.transpose(w)), gamma)


def head_forward(head: CosineHead, f: T.Tensor, class_weights=None) -> HeadOutput:
    """Run one head on a block output.

    ``class_weights`` overrides the trained weights (e.g. with imprinted
    novel-class weights) without touching the head.
    """
    if f.data.ndim != 4:
        raise T.ShapeError(f"head input must be N x H x W x C, got {f.shape}")
    emb = head.embed(f)
    w = head.class_weights if class_weights is None else T._as_tensor(class_weights)
    logits = cosine_logits(emb, w, head.gamma)
    return HeadOutput(emb, logits, T.softmax(logits.data))


def imprint_weights(support_embeddings: Sequence[np.ndarray], normalize_first: bool = True) -> np.ndarray:
    """Novel-class weight matrix from support embeddings, one row per class.

    ``support_embeddings[i]`` is a K_i x D array (or list of D-vectors) for
    class ``i``. Each row is the mean of the L2-normalised embeddings; with
    ``normalize_first=False`` the raw embeddings are averaged instead.
    """
    rows = []
    for i, emb in enumerate(support_embeddings):
        emb = np.atleast_2d(np.asarray(emb, dtype=T.DTYPE))
        if emb.shape[0] == 0 or emb.size == 0:
            raise ValueError(f"class {i} has no support embeddings")
        if normalize_first:
            emb = emb / np.sqrt(np.sum(emb * emb, axis=1, keepdims=True) + T.DTYPE(NORM_EPS))
        rows.append(emb.mean(axis=0, dtype=T.DTYPE))
    if not rows:
        raise ValueError("no classes to imprint")
    return np.stack(rows).astype(T.DTYPE)


def average_predictions(per_head_probs: Sequence[np.ndarray]) -> np.ndarray:
    """Mean of the per-head probability matrices (argmax matches their sum)."""
    if len(per_head_probs) == 0:
        raise ValueError("average_predictions needs at least one head")
    first = np.asarray(per_head_probs[0])
    for p in per_head_probs[1:]:
        if np.shape(p) != first.shape:
            raise T.ShapeError(f"average_predictions: shape mismatch between {first.shape} and {np.shape(p)}")
    return np.mean(np.stack(per_head_probs), axis=0, dtype=T.DTYPE)


def predict_labels(probs: np.ndarray) -> np.ndarray:
    """Argmax per row; ties go to the lowest class index."""
    return np.argmax(probs, axis=1)

