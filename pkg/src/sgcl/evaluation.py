"""P@K and MRR@K over next-item predictions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .encoder import ModelParams, encode
from .ingest import MASK_INDEX, Session, truncate_recent
from .objectives import ln_affine, predict_next, similarity_matrix


@dataclass(frozen=True)
class Metrics:
    p_at_k: float
    mrr_at_k: float
    k: int
    n_examples: int

    def line(self) -> str:
        return f"P@{self.k}={100 * self.p_at_k:.4f},MRR@{self.k}={100 * self.mrr_at_k:.4f}"


def rank_target(scores: np.ndarray, target: int, k: int) -> int | None:
    """1-based rank of ``target``, or None when it falls below ``k``.

    Ties go to the lower item index.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    scores = np.asarray(scores)
    if not 0 <= target < scores.shape[-1]:
        raise ValueError(f"target {target} outside {scores.shape[-1]} candidates")
    rank = int(_ranks(scores[None, :], np.array([target]))[0])
    return rank if rank <= k else None


def _ranks(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    own = scores[np.arange(len(targets)), targets][:, None]
    ahead = (scores > own).sum(axis=1)
    lower = np.arange(scores.shape[1])[None, :] < targets[:, None]
    ties = ((scores == own) & lower).sum(axis=1)
    return 1 + ahead + ties


def metrics_from_ranks(ranks: Sequence[int | None], k: int) -> Metrics:
    if not ranks:
        raise ValueError("no examples to evaluate")
    hits = [r for r in ranks if r is not None and r <= k]
    return Metrics(
        p_at_k=len(hits) / len(ranks),
        mrr_at_k=float(np.sum([1.0 / r for r in hits])) / len(ranks),
        k=k,
        n_examples=len(ranks),
    )


def score_items(sessions: Sequence[Sequence[int]], params: ModelParams) -> np.ndarray:
    """Similarity of each predicted next click to every item row, (B, |V|)."""
    t = predict_next(encode(sessions, params), params)
    return similarity_matrix(t, params["item_embeddings"], ln_affine(params)).data


def evaluate(params: ModelParams, examples: Sequence[Session], k: int = 20, batch_size: int = 500) -> Metrics:
    """Rank each labelled example's target among real items (mask excluded)."""
    if not examples:
        raise ValueError("empty evaluation set")
    max_len = params.config.max_len
    ranks: list[int | None] = []
    for lo in range(0, len(examples), batch_size):
        chunk = [truncate_recent(s, max_len) for s in examples[lo : lo + batch_size]]
        scores = score_items([s.items for s in chunk], params)
        scores[:, MASK_INDEX] = -np.inf
        targets = np.array([s.label for s in chunk], dtype=np.intp)
        if (targets <= MASK_INDEX).any() or (targets >= scores.shape[1]).any():
            raise ValueError("evaluation target outside the real-item range")
        ranks.extend(int(r) if r <= k else None for r in _ranks(scores, targets))
    return metrics_from_ranks(ranks, k)
