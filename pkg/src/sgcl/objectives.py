"""Prediction layer, projection head, and the joint training losses."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .encoder import ModelParams
from .tensor import Tensor


@dataclass(frozen=True)
class LossConfig:
    tau_main: float = 0.085
    tau_cl: float = 0.005
    lam: float = 0.7
    # SupCon-style ablation: drop the query from its own keys and positives
    exclude_self: bool = False

    def __post_init__(self):
        if self.tau_main <= 0 or self.tau_cl <= 0:
            raise ValueError("temperatures must be positive")
        if self.lam < 0:
            raise ValueError(f"contrastive weight must be >= 0, got {self.lam}")


def predict_next(r, params: ModelParams) -> Tensor:
    """Linear map R^{2d} -> R^d producing the predicted next-click vector."""
    return T.matmul(r, T.transpose(params["W_pred"])) + params["b_pred"]


def project(r, params: ModelParams) -> Tensor:
    """Two-layer ReLU projection head R^{2d} -> R^d for the contrastive branch."""
    hidden = T.relu(T.matmul(r, T.transpose(params["W_h1"])) + params["b_h1"])
    return T.matmul(hidden, T.transpose(params["W_h2"])) + params["b_h2"]


def ln_affine(params: ModelParams):
    """``(gain, bias)`` when the model learns LayerNorm affine terms, else None."""
    return (params["ln_gain"], params["ln_bias"]) if params.config.ln_affine else None


def _norm(x, affine):
    y = T.layer_norm(x)
    return y if affine is None else T.add(T.mul(y, affine[0]), affine[1])


def similarity(v1, v2, affine=None) -> Tensor:
    """Dot product of layer-normalized vectors (batched over leading axes)."""
    return T.sum(T.mul(_norm(v1, affine), _norm(v2, affine)), axis=-1)


def similarity_matrix(a, b, affine=None) -> Tensor:
    """All-pairs similarity between rows of ``a`` (n, d) and ``b`` (m, d)."""
    return T.matmul(_norm(a, affine), T.transpose(_norm(b, affine)))


def main_loss(t, targets: Sequence[int], item_embeddings, tau: float, affine=None) -> Tensor:
    """Mean cross-entropy of temperature-scaled similarities against every item row.

    The [mask] row takes part in the normalizer like any other row.
    """
    targets = np.asarray(targets, dtype=np.intp).reshape(-1)
    n_rows = item_embeddings.shape[0]
    if targets.size and (targets.min() < 0 or targets.max() >= n_rows):
        raise ValueError(f"target outside vocabulary of size {n_rows}")
    scores = similarity_matrix(T.reshape(t, (-1, t.shape[-1])), item_embeddings, affine)
    if scores.shape[0] != targets.size:
        raise ValueError(f"{scores.shape[0]} predictions but {targets.size} targets")
    logp = T.log_softmax(T.scalar_mul(scores, 1.0 / tau), axis=-1)
    flat = np.arange(targets.size) * n_rows + targets
    picked = T.row_gather(T.reshape(logp, (-1,)), flat)
    return T.scalar_mul(T.mean(picked), -1.0)


@dataclass(frozen=True)
class ContrastiveBatch:
    """Projected views ordered method-major: view ``m * N + n`` is session n under method m.

    The first method block is the query set.
    """

    z: Tensor  # (M * N, d)
    n_methods: int

    @property
    def n_sessions(self) -> int:
        return self.z.shape[0] // self.n_methods

    def origin(self, view: int) -> tuple[int, int]:
        """(method slot, source session) of a view."""
        return divmod(view, self.n_sessions)


def contrastive_loss(batch: ContrastiveBatch, tau: float, exclude_self: bool = False, affine=None) -> Tensor:
    """Multi-positive InfoNCE averaged over the first-method queries.

    Positives of query q are all M views of its source session, the query
    itself included unless ``exclude_self``.
    """
    m, n = batch.n_methods, batch.n_sessions
    if m < 1 or n < 1 or m * n != batch.z.shape[0]:
        raise ValueError(f"{batch.z.shape[0]} views do not split into {m} methods")
    if m * n < 2:
        warnings.warn("contrastive batch with a single view; loss is identically 0", stacklevel=2)
    queries = T.row_gather(batch.z, np.arange(n))
    scores = T.scalar_mul(similarity_matrix(queries, batch.z, affine), 1.0 / tau)
    positives = np.zeros((n, m * n))
    for slot in range(m):
        positives[np.arange(n), slot * n + np.arange(n)] = 1.0
    keys = None
    if exclude_self:
        if m < 2:
            raise ValueError("excluding the query leaves no positives when M = 1")
        keys = np.ones((n, m * n), dtype=bool)
        keys[np.arange(n), np.arange(n)] = False
        positives[np.arange(n), np.arange(n)] = 0.0
    logp = T.log_softmax(scores, axis=-1, mask=keys)
    per_query = T.sum(T.mul(logp, positives), axis=-1)
    n_pos = positives.sum(axis=-1)
    return T.scalar_mul(T.mean(T.mul(per_query, 1.0 / n_pos)), -1.0)


def total_loss(main, cl, lam: float) -> Tensor:
    return T.add(main, T.scalar_mul(cl, lam))
