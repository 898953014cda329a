"""Per-session directed graphs and their padded batch form."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T


@dataclass(frozen=True)
class SessionGraph:
    """Item nodes of one session plus row-normalized adjacency.

    ``nodes`` holds unique items in first-occurrence order and
    ``alias[p]`` is the node index of session position ``p``. The star
    node is implicit: it is not a row of ``a_in``/``a_out``.
    """

    nodes: tuple[int, ...]
    alias: tuple[int, ...]
    a_in: np.ndarray
    a_out: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)


def _row_normalize(counts: np.ndarray) -> np.ndarray:
    totals = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)


def build_session_graph(items: Sequence[int]) -> SessionGraph:
    if len(items) == 0:
        raise ValueError("cannot build a graph for an empty session")
    index: dict[int, int] = {}
    alias = []
    for item in items:
        alias.append(index.setdefault(int(item), len(index)))
    n = len(index)
    counts = np.zeros((n, n))
    for u, v in zip(alias, alias[1:]):
        counts[u, v] += 1.0
    return SessionGraph(
        nodes=tuple(index),
        alias=tuple(alias),
        a_in=_row_normalize(counts.T),
        a_out=_row_normalize(counts),
    )


def init_star(h0, mask=None):
    """Mean of the node states along the node axis (-2).

    ``mask`` (same leading shape as ``h0`` without the feature axis) marks
    real nodes when ``h0`` is padded.
    """
    if mask is None:
        return T.mean(h0, axis=-2)
    mask = np.asarray(mask, dtype=np.float64)
    total = T.sum(T.mul(h0, mask[..., None]), axis=-2)
    return T.mul(total, 1.0 / mask.sum(axis=-1, keepdims=True))


@dataclass(frozen=True)
class GraphBatch:
    """Session graphs padded to common node/position counts.

    Flat index arrays point into ``(batch * n_nodes)`` node rows and
    ``(batch * n_positions)`` position rows so gathers stay 2-D.
    """

    node_ids: np.ndarray  # (B, N) item ids, 0 where padded
    node_mask: np.ndarray  # (B, N) 1.0 for real nodes
    a_in: np.ndarray  # (B, N, N)
    a_out: np.ndarray  # (B, N, N)
    alias_flat: np.ndarray  # (B, P)
    position_mask: np.ndarray  # (B, P)
    last_flat: np.ndarray  # (B,)
    lengths: np.ndarray  # (B,)

    @property
    def size(self) -> int:
        return self.node_ids.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.node_ids.shape[1]

    @property
    def n_positions(self) -> int:
        return self.alias_flat.shape[1]


def pack_graphs(graphs: Sequence[SessionGraph]) -> GraphBatch:
    b = len(graphs)
    if b == 0:
        raise ValueError("empty batch")
    n = max(g.n_nodes for g in graphs)
    p = max(len(g.alias) for g in graphs)
    node_ids = np.zeros((b, n), dtype=np.intp)
    node_mask = np.zeros((b, n))
    a_in = np.zeros((b, n, n))
    a_out = np.zeros((b, n, n))
    alias_flat = np.zeros((b, p), dtype=np.intp)
    position_mask = np.zeros((b, p))
    lengths = np.zeros(b, dtype=np.intp)
    for i, g in enumerate(graphs):
        k, length = g.n_nodes, len(g.alias)
        node_ids[i, :k] = g.nodes
        node_mask[i, :k] = 1.0
        a_in[i, :k, :k] = g.a_in
        a_out[i, :k, :k] = g.a_out
        alias_flat[i] = i * n
        alias_flat[i, :length] += g.alias
        position_mask[i, :length] = 1.0
        lengths[i] = length
    last_flat = np.arange(b) * p + lengths - 1
    return GraphBatch(node_ids, node_mask, a_in, a_out, alias_flat, position_mask, last_flat, lengths)


def dump_csv(graph: SessionGraph) -> str:
    """Render both adjacency matrices as CSV blocks (debug aid)."""
    lines = ["matrix,row," + ",".join(str(v) for v in graph.nodes)]
    for label, mat in (("in", graph.a_in), ("out", graph.a_out)):
        for node, row in zip(graph.nodes, mat):
            lines.append(f"{label},{node}," + ",".join(repr(float(x)) for x in row))
    return "\n".join(lines) + "\n"
