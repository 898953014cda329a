"""Global item transition graph and degree-damped synonym sampling."""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .ingest import MASK_INDEX


class IsolatedItemError(LookupError):
    """The item has no neighbors in the global graph."""


@dataclass(frozen=True)
class GlobalGraph:
    """``neighbors[x]`` lists ``(neighbor, count)`` sorted by neighbor id."""

    neighbors: dict[int, tuple[tuple[int, int], ...]]
    total_items: int
    directed: bool = False

    def degree(self, item: int) -> int:
        return len(self.neighbors.get(item, ()))

    def count(self, src: int, dst: int) -> int:
        return dict(self.neighbors.get(src, ())).get(dst, 0)


def build_global_graph(
    sessions: Iterable[Sequence[int]], total_items: int, directed: bool = False
) -> GlobalGraph:
    """Accumulate adjacent click pairs of raw sessions, with multiplicity.

    Self-transitions are dropped. Undirected by default: each transition
    counts toward both endpoints.
    """
    counts: dict[int, Counter] = defaultdict(Counter)
    for items in sessions:
        for a, b in zip(items, items[1:]):
            a, b = int(a), int(b)
            if a == b or MASK_INDEX in (a, b):
                continue
            counts[a][b] += 1
            if not directed:
                counts[b][a] += 1
    neighbors = {item: tuple(sorted(c.items())) for item, c in sorted(counts.items())}
    return GlobalGraph(neighbors, total_items, directed)


def degree_stats(graph: GlobalGraph) -> dict[int, int]:
    """Histogram degree -> number of real items (mask row excluded)."""
    hist = Counter(graph.degree(item) for item in range(1, graph.total_items))
    return dict(sorted(hist.items()))


@dataclass
class SynonymSampler:
    """Draw a 1-hop neighbor with probability proportional to count**k.

    Cumulative weight tables are built once; ``sample`` holds no state and
    takes the caller's generator.
    """

    graph: GlobalGraph
    k: float = 0.75
    _tables: dict[int, tuple[np.ndarray, np.ndarray]] = field(init=False, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.k <= 1.0:
            raise ValueError(f"damping exponent must lie in [0, 1], got {self.k}")
        self._tables = {}
        for item, nbrs in self.graph.neighbors.items():
            ids = np.array([n for n, _ in nbrs], dtype=np.int64)
            weights = np.array([c for _, c in nbrs], dtype=np.float64) ** self.k
            self._tables[item] = (ids, np.cumsum(weights))

    def has_neighbors(self, item: int) -> bool:
        return item in self._tables

    def probabilities(self, item: int) -> dict[int, float]:
        ids, cum = self._table(item)
        weights = np.diff(cum, prepend=0.0)
        return dict(zip(ids.tolist(), (weights / cum[-1]).tolist()))

    def _table(self, item: int):
        try:
            return self._tables[item]
        except KeyError:
            raise IsolatedItemError(f"item {item} has no neighbors in the global graph") from None

    def sample(self, item: int, rng: np.random.Generator) -> int:
        ids, cum = self._table(item)
        pick = np.searchsorted(cum, rng.random() * cum[-1], side="right")
        return int(ids[min(pick, len(ids) - 1)])


@dataclass
class UniformSampler:
    """Context-free replacement: any real item other than the original.

    Used to contrast against global-context sampling.
    """

    total_items: int

    def has_neighbors(self, item: int) -> bool:
        return self.total_items > 2

    def sample(self, item: int, rng: np.random.Generator) -> int:
        if not self.has_neighbors(item):
            raise IsolatedItemError("vocabulary too small for uniform replacement")
        while True:
            pick = int(rng.integers(1, self.total_items))
            if pick != item:
                return pick
