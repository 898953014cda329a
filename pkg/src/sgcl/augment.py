"""Session augmentations: crop, mask, reorder, and the graph-aware change/inject.

Every operator is a pure function of its inputs and the generator it is
handed. Sessions are plain item sequences; outputs are tuples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .ingest import MASK_INDEX

METHODS = ("crop", "mask", "reorder", "change", "inject")
METHOD_IDS = {name: i for i, name in enumerate(METHODS)}


@dataclass(frozen=True)
class AugmentConfig:
    gamma_crop: float = 0.5
    gamma_mask: float = 0.5
    gamma_reorder: float = 0.5
    gamma_change: float = 0.5
    gamma_inject: float = 0.5
    pool: tuple[str, ...] = METHODS
    n_methods: int = 2
    max_len: int = 10

    def __post_init__(self):
        for name in METHODS:
            g = self.gamma(name)
            if not 0.0 <= g <= 1.0:
                raise ValueError(f"gamma_{name} must lie in [0, 1], got {g}")
        unknown = set(self.pool) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown augmentation methods: {sorted(unknown)}")
        if len(set(self.pool)) != len(self.pool):
            raise ValueError("augmentation pool contains duplicates")
        if not 1 <= self.n_methods <= len(self.pool):
            raise ValueError(f"n_methods={self.n_methods} needs 1 <= M <= {len(self.pool)}")

    def gamma(self, method: str) -> float:
        return getattr(self, f"gamma_{method}")


@dataclass
class AugmentStats:
    """Positions skipped because the item had no synonym."""

    isolated_change: int = 0
    isolated_inject: int = 0
    provenance: list[tuple[int, int, int]] = field(default_factory=list)


def _ratio(gamma: float) -> Fraction:
    # recover the decimal the user meant: 0.1 * 10 must be exactly 1
    return Fraction(gamma).limit_denominator(10**9)


def ceil_count(gamma: float, n: int) -> int:
    return math.ceil(_ratio(gamma) * n)


def floor_count(gamma: float, n: int) -> int:
    return math.floor(_ratio(gamma) * n)


def crop(items: Sequence[int], gamma: float, rng: np.random.Generator) -> tuple[int, ...]:
    n = max(1, floor_count(gamma, len(items)))
    start = int(rng.integers(0, len(items) - n + 1))
    return tuple(items[start : start + n])


def mask(items: Sequence[int], gamma: float, rng: np.random.Generator) -> tuple[int, ...]:
    out = list(items)
    for pos in rng.choice(len(out), size=ceil_count(gamma, len(out)), replace=False):
        out[pos] = MASK_INDEX
    return tuple(out)


def reorder(items: Sequence[int], gamma: float, rng: np.random.Generator) -> tuple[int, ...]:
    out = list(items)
    n = ceil_count(gamma, len(out))
    if n < 2:
        return tuple(out)
    start = int(rng.integers(0, len(out) - n + 1))
    window = out[start : start + n]
    out[start : start + n] = [window[i] for i in rng.permutation(n)]
    return tuple(out)


def change(
    items: Sequence[int],
    gamma: float,
    sampler,
    rng: np.random.Generator,
    stats: AugmentStats | None = None,
) -> tuple[int, ...]:
    """Replace ceil(gamma*|s|) distinct positions by sampled synonyms."""
    out = list(items)
    for pos in rng.choice(len(out), size=ceil_count(gamma, len(out)), replace=False):
        original = out[pos]
        if not sampler.has_neighbors(original):
            if stats is not None:
                stats.isolated_change += 1
            continue
        out[pos] = sampler.sample(original, rng)
        if stats is not None:
            stats.provenance.append((int(pos), original, out[pos]))
    return tuple(out)


def inject(
    items: Sequence[int],
    gamma: float,
    sampler,
    rng: np.random.Generator,
    max_len: int = 10,
    stats: AugmentStats | None = None,
) -> tuple[int, ...]:
    """Insert a synonym right after a random item, ceil(gamma*|s|) times.

    Each insertion draws its position from the grown sequence; the result
    keeps the most recent ``max_len`` items.
    """
    out = list(items)
    for _ in range(ceil_count(gamma, len(items))):
        pos = int(rng.integers(0, len(out)))
        anchor = out[pos]
        if not sampler.has_neighbors(anchor):
            if stats is not None:
                stats.isolated_inject += 1
            continue
        out.insert(pos + 1, sampler.sample(anchor, rng))
        if stats is not None:
            stats.provenance.append((pos + 1, anchor, out[pos + 1]))
    return tuple(out[-max_len:])


def apply(method: str, items, cfg: AugmentConfig, sampler, rng, stats=None) -> tuple[int, ...]:
    gamma = cfg.gamma(method)
    if method == "crop":
        return crop(items, gamma, rng)
    if method == "mask":
        return mask(items, gamma, rng)
    if method == "reorder":
        return reorder(items, gamma, rng)
    if method == "change":
        return change(items, gamma, sampler, rng, stats)
    if method == "inject":
        return inject(items, gamma, sampler, rng, cfg.max_len, stats)
    raise ValueError(f"unknown augmentation method {method!r}")


def select_methods(cfg: AugmentConfig, rng: np.random.Generator) -> list[str]:
    """Draw M distinct methods; the first one defines the query views."""
    picks = rng.choice(len(cfg.pool), size=cfg.n_methods, replace=False)
    return [cfg.pool[i] for i in picks]


def view_rng(key: Sequence[int], slot: int, method: str, index: int) -> np.random.Generator:
    return np.random.default_rng([*key, slot, METHOD_IDS[method], index])


def augment_batch(
    sessions: Sequence[Sequence[int]],
    methods: Sequence[str],
    cfg: AugmentConfig,
    sampler,
    key: Sequence[int],
    stats: AugmentStats | None = None,
) -> list[tuple[int, ...]]:
    """Return M*N views ordered method-major.

    Each view gets its own generator derived from ``key`` (e.g. seed,
    epoch, batch), the method slot, the method and the session index.
    """
    return [
        apply(method, items, cfg, sampler, view_rng(key, slot, method, i), stats)
        for slot, method in enumerate(methods)
        for i, items in enumerate(sessions)
    ]
