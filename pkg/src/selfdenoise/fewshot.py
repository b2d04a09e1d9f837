"""Episodic N-way K-shot evaluation by weight imprinting."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import FewShotDataset, normalize_batch
from .heads import average_predictions, cosine_logits, imprint_weights, predict_labels
from .model import SdnnModel
from .noise import Rng

Z95 = 1.96


class EpisodeError(ValueError):
    pass


@dataclass(frozen=True)
class EpisodeSpec:
    n_way: int = 5
    k_shot: int = 1
    m_query: int = 15
    num_episodes: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.n_way < 1 or self.k_shot < 1 or self.m_query < 1 or self.num_episodes < 1:
            raise ValueError(f"episode sizes must be positive: {self}")


@dataclass
class Episode:
    classes: np.ndarray  # n_way dataset class ids
    support: np.ndarray  # n_way x K image indices
    query: np.ndarray  # n_way x M image indices


@dataclass
class EvalReport:
    n_way: int
    k_shot: int
    m_query: int
    num_episodes: int
    seed: int
    mean_acc: float
    ci95: float
    per_episode: List[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def ci95_halfwidth(accuracies: Sequence[float]) -> float:
    """1.96 * sample std (Bessel) / sqrt(n); zero for fewer than two values."""
    a = np.asarray(accuracies, dtype=np.float64)
    if a.size < 2 or np.all(a == a[0]):
        return 0.0
    return float(Z95 * a.std(ddof=1) / math.sqrt(a.size))


def sample_episode(ds: FewShotDataset, spec: EpisodeSpec, episode_index: int,
                   split: str = "novel") -> Episode:
    """Episode fully determined by ``(spec.seed, episode_index)``."""
    pool = ds.classes_in(split)
    if spec.n_way > len(pool):
        raise EpisodeError(f"{spec.n_way}-way episodes need {spec.n_way} {split} classes, dataset has {len(pool)}")
    rng = Rng(spec.seed, (3, episode_index))
    by_class = ds.indices_by_class()
    classes = np.array(pool)[rng.child(0).choice(len(pool), spec.n_way)]
    need = spec.k_shot + spec.m_query
    support, query = [], []
    for pos, c in enumerate(classes):
        idx = by_class[c]
        if len(idx) < need:
            raise EpisodeError(f"class {ds.class_names[c]} has {len(idx)} images, episodes need {need}")
        pick = idx[rng.child(1, pos).choice(len(idx), need)]
        support.append(pick[:spec.k_shot])
        query.append(pick[spec.k_shot:])
    return Episode(classes, np.stack(support), np.stack(query))


def embed_images(model: SdnnModel, ds: FewShotDataset, indices) -> List[np.ndarray]:
    return model.embed(normalize_batch(ds, indices))


def embedding_table(model: SdnnModel, ds: FewShotDataset, split: str = "novel") -> List[np.ndarray]:
    """Per-head embeddings for every image of ``split``; rows of other splits stay zero.

    Lets many episodes reuse one noiseless pass over the data.
    """
    idx = np.flatnonzero(np.isin(ds.labels, ds.classes_in(split)))
    embs = embed_images(model, ds, idx)
    tables = []
    for e in embs:
        full = np.zeros((ds.images.shape[0], e.shape[1]), dtype=T.DTYPE)
        full[idx] = e
        tables.append(full)
    return tables


def episode_predictions(model: SdnnModel, support_emb: Sequence[np.ndarray], query_emb: Sequence[np.ndarray],
                        n_way: int, k_shot: int, normalize_first: bool = True) -> np.ndarray:
    """Head-averaged query probabilities after imprinting each head from its supports.

    ``support_emb[h]`` holds head h's support embeddings grouped by class
    (n_way * k_shot rows, class-major).
    """
    probs = []
    for head, s_emb, q_emb in zip(model.active_heads, support_emb, query_emb):
        groups = s_emb.reshape(n_way, k_shot, -1)
        w = imprint_weights(list(groups), normalize_first)
        logits = cosine_logits(T.Tensor(q_emb), T.Tensor(w), head.gamma)
        probs.append(T.softmax(logits.data))
    return average_predictions(probs)


def run_episode(model: SdnnModel, ds: FewShotDataset, ep: Episode,
                embeddings: Optional[Sequence[np.ndarray]] = None, normalize_first: bool = True) -> float:
    """Imprint novel weights from the supports and return query accuracy.

    The model's own class weights and gammas are never modified.
    ``embeddings`` may carry a precomputed :func:`embedding_table`.
    """
    n_way, k_shot = ep.support.shape
    s_idx = ep.support.reshape(-1)
    q_idx = ep.query.reshape(-1)
    if embeddings is None:
        s_emb = embed_images(model, ds, s_idx)
        q_emb = embed_images(model, ds, q_idx)
    else:
        s_emb = [e[s_idx] for e in embeddings]
        q_emb = [e[q_idx] for e in embeddings]
    probs = episode_predictions(model, s_emb, q_emb, n_way, k_shot, normalize_first)
    truth = np.repeat(np.arange(n_way), ep.query.shape[1])
    return float(np.mean(predict_labels(probs) == truth))


def evaluate(model: SdnnModel, ds: FewShotDataset, spec: EpisodeSpec, split: str = "novel",
             normalize_first: bool = True) -> EvalReport:
    table = embedding_table(model, ds, split)
    accs = [run_episode(model, ds, sample_episode(ds, spec, i, split), table, normalize_first)
            for i in range(spec.num_episodes)]
    return report_from_accuracies(accs, spec)


def report_from_accuracies(accs: Sequence[float], spec: EpisodeSpec) -> EvalReport:
    accs = [float(a) for a in accs]
    return EvalReport(spec.n_way, spec.k_shot, spec.m_query, len(accs), spec.seed,
                      float(np.mean(accs)) if accs else 0.0, ci95_halfwidth(accs), accs)
