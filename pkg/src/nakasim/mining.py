"""The random-oracle mining lottery.

Every unit of mining power makes one hash attempt per round and succeeds
independently with probability ``p``. Draws are consumed in ascending unit
id order, which is what makes a run replayable from its seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

STREAMS = ("mining", "network", "adversary", "recovery")


@dataclass(frozen=True)
class MiningParams:
    p: float
    n: int
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p must lie in [0, 1], got {self.p}")
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")


@dataclass(frozen=True)
class MiningOutcome:
    round: int
    successes: frozenset = field(default_factory=frozenset)


def trial_streams(seed: int, trial: int) -> dict[str, np.random.Generator]:
    """Independent generators for one trial, derived from (seed, trial)."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(trial,))
    return {name: np.random.Generator(np.random.PCG64(child))
            for name, child in zip(STREAMS, ss.spawn(len(STREAMS)))}


def draw_round(active_units: Iterable[int], params: MiningParams, rng: np.random.Generator,
               round: int = 0) -> MiningOutcome:
    units = sorted(active_units)
    if not units:
        return MiningOutcome(round)
    hits = rng.random(len(units)) < params.p
    return MiningOutcome(round, frozenset(u for u, h in zip(units, hits) if h))


def expected_hashes_per_block(params: MiningParams) -> float:
    if params.p <= 0:
        raise ValueError("expected hashes per block undefined for p = 0")
    return 1.0 / params.p


class Lottery:
    """Chunked per-round lottery over a fixed universe of ``n_units`` units.

    Draws for all units every round (inactive units' draws are discarded by
    the caller), so the stream position depends only on the round number.
    """

    def __init__(self, n_units: int, p: float, rng: np.random.Generator, chunk: int = 1024):
        self.n_units = n_units
        self.p = p
        self.rng = rng
        self.chunk = chunk
        self._base = 0
        self._hits: dict[int, np.ndarray] = {}
        self._filled_to = 0

    def _fill(self) -> None:
        start = self._filled_to
        self._hits = {}
        if self.n_units:
            block = self.rng.random((self.chunk, self.n_units)) < self.p
            for row in np.flatnonzero(block.any(axis=1)):
                self._hits[start + int(row)] = np.flatnonzero(block[row])
        self._base = start
        self._filled_to = start + self.chunk

    def successes(self, round_index: int) -> np.ndarray:
        """Successful unit ids for the ``round_index``-th call (0-based, sequential)."""
        while round_index >= self._filled_to:
            self._fill()
        if round_index < self._base:
            raise ValueError("lottery rounds must be consumed in order")
        return self._hits.get(round_index, _EMPTY)


_EMPTY = np.empty(0, dtype=np.int64)
