"""Synthetic click logs from a fixed first-order successor table.

Each session follows ``successor`` from a uniform start for a uniform
length in ``[min_len, max_len]``. A ``noise`` share of sessions gets one
uniformly random click inserted after a random position; the chain then
resumes where it left off.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ingest import DAY_MS, Corpus, RawEvent, build_corpus

EPOCH_START_MS = 1_400_000_000_000 - 1_400_000_000_000 % DAY_MS


@dataclass(frozen=True)
class SyntheticSpec:
    n_sessions: int = 2000
    n_items: int = 50
    noise: float = 0.1
    min_len: int = 2
    max_len: int = 10
    days: int = 5
    seed: int = 0


def successor_table(n_items: int, rng: np.random.Generator) -> np.ndarray:
    """One random cycle over all items, so no item is its own successor."""
    order = rng.permutation(n_items)
    succ = np.empty(n_items, dtype=np.int64)
    succ[order] = np.roll(order, -1)
    return succ


def generate_sessions(spec: SyntheticSpec) -> tuple[list[list[int]], np.ndarray]:
    rng = np.random.default_rng(spec.seed)
    succ = successor_table(spec.n_items, rng)
    sessions = []
    for _ in range(spec.n_sessions):
        item = int(rng.integers(spec.n_items))
        chain = [item]
        for _ in range(int(rng.integers(spec.min_len, spec.max_len + 1)) - 1):
            chain.append(int(succ[chain[-1]]))
        if rng.random() < spec.noise:
            chain.insert(int(rng.integers(1, len(chain) + 1)), int(rng.integers(spec.n_items)))
        sessions.append(chain)
    return sessions, succ


def generate_events(spec: SyntheticSpec) -> list[RawEvent]:
    """Sessions spread evenly over ``spec.days`` days, one second per click."""
    sessions, _ = generate_sessions(spec)
    span = spec.days * DAY_MS
    events = []
    for i, chain in enumerate(sessions):
        start = EPOCH_START_MS + (i * span) // spec.n_sessions
        events.extend(RawEvent(str(i + 1), start + 1000 * j, f"i{item}") for j, item in enumerate(chain))
    return events


def synthetic_corpus(spec: SyntheticSpec = SyntheticSpec()) -> Corpus:
    """Build the corpus with the last simulated day as the test split."""
    corpus = build_corpus(generate_events(spec), split_days=1)
    corpus.meta["synthetic"] = spec.__dict__.copy()
    return corpus
