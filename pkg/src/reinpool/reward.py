"""Similarity, ranking, graded NDCG@k and the inverse-retrieval reward."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class RewardSpec:
    k: int = 3
    # None means "all candidates"
    candidate_pool_size: int | None = None

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("ndcg cutoff k must be >= 1")
        if self.candidate_pool_size is not None and self.candidate_pool_size < 1:
            raise ConfigError("candidate_pool_size must be positive or None")


@dataclass(frozen=True)
class RankedList:
    ids: tuple[str, ...]
    scores: tuple[float, ...]


def similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(a @ b)


def rank(ids: Sequence[str], scores) -> RankedList:
    """Sort descending by score; equal scores break ties by ascending id."""
    scores = np.asarray(scores, dtype=np.float64)
    # lexsort sorts by the last key first
    id_rank = np.argsort(np.array(ids, dtype=object), kind="stable")
    id_pos = np.empty(len(ids), dtype=np.int64)
    id_pos[id_rank] = np.arange(len(ids))
    order = np.lexsort((id_pos, -scores))
    return RankedList(tuple(ids[i] for i in order), tuple(float(scores[i]) for i in order))


def _discounts(n: int) -> np.ndarray:
    return 1.0 / np.log2(np.arange(2, n + 2, dtype=np.float64))


def ndcg_at_k(ranking, relevant: Mapping[str, int], k: int) -> float:
    """Graded NDCG@k with gain ``grade / log2(rank + 1)``; 0 when no item is relevant."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    ids = ranking.ids if isinstance(ranking, RankedList) else tuple(ranking)
    ideal = sorted((g for g in relevant.values() if g > 0), reverse=True)[:k]
    if not ideal:
        return 0.0
    top = ids[:k]
    gains = np.array([relevant.get(i, 0) for i in top], dtype=np.float64)
    dcg = float(gains @ _discounts(len(top)))
    idcg = float(np.asarray(ideal, dtype=np.float64) @ _discounts(len(ideal)))
    return dcg / idcg


def inverse_retrieval_reward(v_pool, positives, pool, spec: RewardSpec = RewardSpec(),
                             rng=None, pooled_matrix=None) -> float:
    """Rank the pooled queries in ``pool`` against a pooled document vector.

    ``positives`` maps (or lists) the document's own query ids. When
    ``spec.candidate_pool_size`` is set, the candidates are all positives plus
    that many negatives drawn with ``rng``.
    """
    if not isinstance(positives, Mapping):
        positives = {p: 1 for p in positives}
    id_pos = {qid: i for i, qid in enumerate(pool.ids)}
    missing = [p for p in positives if p not in id_pos]
    if missing:
        raise ConfigError(f"positive queries missing from candidate pool: {missing[:5]}")
    v = np.asarray(v_pool, dtype=np.float64)
    matrix = pooled_matrix if pooled_matrix is not None else pool.vectors.astype(np.float64)
    if v.shape != (matrix.shape[1],):
        raise ShapeError(f"pooled vector has shape {v.shape}, index dim is {matrix.shape[1]}")

    if spec.candidate_pool_size is None or spec.candidate_pool_size >= len(pool.ids) - len(positives):
        rows = np.arange(len(pool.ids))
    else:
        if rng is None:
            raise ConfigError("negative sampling needs a random stream")
        pos_rows = np.array(sorted(id_pos[p] for p in positives), dtype=np.int64)
        neg_mask = np.ones(len(pool.ids), dtype=bool)
        neg_mask[pos_rows] = False
        negatives = rng.choice(np.flatnonzero(neg_mask), size=spec.candidate_pool_size, replace=False)
        rows = np.concatenate([pos_rows, np.sort(negatives)])
    scores = matrix[rows] @ v
    ranking = rank([pool.ids[i] for i in rows], scores)
    return ndcg_at_k(ranking, positives, spec.k)

