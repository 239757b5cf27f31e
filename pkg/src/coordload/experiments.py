"""Small experiment drivers shared by the CLI and the test suite."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .cache import CacheConfig, LRUCache, MinIOCache, Policy, replay
from .core import RateSpec, SizeModel, keyed_rng, make_dataset
from .pipeline import PipelineConfig, StallReport, run_epochs

_TAG_TRACE = 7


def shuffled_traces(n_items: int, n_epochs: int, seed: int) -> list[np.ndarray]:
    return [keyed_rng(seed, _TAG_TRACE, e).permutation(n_items) for e in range(n_epochs)]


@dataclass
class PolicyComparison:
    n_items: int
    capacity_items: int
    seed: int
    minio: list[int]
    lru: list[int]

    def rows(self) -> list[dict]:
        return [{"n_items": self.n_items, "capacity_items": self.capacity_items, "seed": self.seed,
                 "epoch": e, "minio_misses": m, "lru_misses": l}
                for e, (m, l) in enumerate(zip(self.minio, self.lru))]


def compare_policies(n_items: int, capacity_items: int, n_epochs: int, seed: int) -> PolicyComparison:
    """MinIO and LRU (unit-size items) on the same shuffled epoch traces."""
    traces = shuffled_traces(n_items, n_epochs, seed)
    return PolicyComparison(n_items, capacity_items, seed,
                            replay(MinIOCache(capacity_items), traces),
                            replay(LRUCache(capacity_items), traces))


@dataclass
class MicroExample:
    n_items: int
    capacity: int
    minio_misses: set
    lru_min: int
    lru_max: int
    lru_histogram: dict

    def to_dict(self) -> dict:
        return {"n_items": self.n_items, "capacity": self.capacity,
                "minio_misses_per_epoch": sorted(self.minio_misses),
                "lru_min_misses_per_epoch": self.lru_min, "lru_max_misses_per_epoch": self.lru_max,
                "lru_histogram": {str(k): v for k, v in sorted(self.lru_histogram.items())}}


def micro_example(n_items: int = 4, capacity: int = 2) -> MicroExample:
    """Every (previous epoch, next epoch) ordering pair, counting next-epoch misses.

    LRU's state after a full epoch depends on that epoch's order, so the pair
    enumeration covers every reachable warm state and every next order.
    MinIO is warmed by the first epoch and then never changes.
    """
    perms = list(itertools.permutations(range(n_items)))
    minio, hist = set(), {}
    for prev in perms:
        m = MinIOCache(capacity)
        replay(m, [prev])
        for nxt in perms:
            lru = LRUCache(capacity)
            misses = replay(lru, [prev, nxt])[1]
            hist[misses] = hist.get(misses, 0) + 1
            mm = MinIOCache(capacity)
            minio.add(replay(mm, [prev, nxt])[1])
    return MicroExample(n_items, capacity, minio, min(hist), max(hist), hist)


def simulate_at_fraction(rates: RateSpec, n_items: int, x: float, batch_size: int = 50,
                         seed: int = 0, n_epochs: int = 2) -> StallReport:
    """Run a MinIO-cached pipeline holding fraction ``x`` of a unit-size dataset.

    Returns the last (warm) epoch's report.
    """
    ds = make_dataset(n_items, SizeModel.fixed(1), seed)
    cfg = PipelineConfig(batch_size, rates, CacheConfig(int(round(x * n_items)), Policy.MINIO))
    return run_epochs(ds, cfg, n_epochs, seed)[-1]


def relative_error(a: float, b: float) -> float:
    if b == 0:
        return math.inf if a else 0.0
    return abs(a - b) / abs(b)
