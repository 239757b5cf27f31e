"""Item-granular caches: MinIO (fill once, never evict) and an LRU baseline.

The LRU cache stands in for the OS page cache. Both share the same
accounting so per-epoch misses can be compared on identical traces.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import logging
import threading
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Iterable, Sequence

from .errors import ConfigError

log = logging.getLogger(__name__)


class Policy(str, enum.Enum):
    MINIO = "minio"
    LRU = "lru"


@dataclass(frozen=True)
class CacheConfig:
    capacity_bytes: int
    policy: Policy = Policy.MINIO

    def __post_init__(self):
        if self.capacity_bytes < 0:
            raise ConfigError(f"capacity_bytes must be >= 0, got {self.capacity_bytes}")
        object.__setattr__(self, "policy", Policy(self.policy))


@dataclass
class EpochStats:
    hits: int = 0
    misses: int = 0
    evictions: int = 0
    admissions: int = 0
    rejections: int = 0
    bytes_served_from_cache: int = 0
    bytes_fetched_from_storage: int = 0

    @property
    def lookups(self) -> int:
        return self.hits + self.misses

    def add(self, other: "EpochStats") -> None:
        for f in fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))


STAT_COLUMNS = ["epoch"] + [f.name for f in fields(EpochStats)]


@dataclass
class CacheStats:
    per_epoch: dict[int, EpochStats] = field(default_factory=dict)

    def epoch(self, epoch: int) -> EpochStats:
        st = self.per_epoch.get(epoch)
        if st is None:
            st = self.per_epoch[epoch] = EpochStats()
        return st

    @property
    def total(self) -> EpochStats:
        t = EpochStats()
        for st in self.per_epoch.values():
            t.add(st)
        return t

    def __getattr__(self, name):
        # hits, misses, ... resolve to run totals
        if name in EpochStats.__dataclass_fields__:
            return getattr(self.total, name)
        raise AttributeError(name)

    def rows(self, **extra: Any) -> list[dict]:
        out = []
        for ep in sorted(self.per_epoch):
            row = dict(extra)
            row.update({"epoch": ep, **asdict(self.per_epoch[ep])})
            out.append(row)
        return out

    def to_json(self) -> str:
        return json.dumps({"per_epoch": self.rows(), "total": asdict(self.total)}, indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=STAT_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(self.rows())
        return buf.getvalue()


@dataclass(frozen=True)
class AdmitResult:
    status: str  # "admitted" | "rejected" | "evicted"
    victims: tuple[int, ...] = ()

    @property
    def admitted(self) -> bool:
        return self.status != "rejected"


class Cache:
    """Shared bookkeeping; subclasses decide admission and recency."""

    policy: Policy

    def __init__(self, capacity_bytes: int):
        if capacity_bytes < 0:
            raise ConfigError("capacity must be non-negative")
        self.capacity_bytes = int(capacity_bytes)
        self.used_bytes = 0
        self.stats = CacheStats()
        self._lock = threading.RLock()
        self._entries: dict[int, tuple[int, Any]] = self._new_store()

    def _new_store(self) -> dict:
        return {}

    def __contains__(self, item_id: int) -> bool:
        with self._lock:
            return item_id in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def contents(self) -> set[int]:
        with self._lock:
            return set(self._entries)

    def lookup(self, item_id: int, epoch: int = 0) -> bool:
        with self._lock:
            entry = self._entries.get(item_id)
            st = self.stats.epoch(epoch)
            if entry is None:
                st.misses += 1
                return False
            st.hits += 1
            st.bytes_served_from_cache += entry[0]
            self._touch(item_id)
            return True

    def get(self, item_id: int) -> Any:
        """Stored value without touching stats or recency (peer serving path)."""
        with self._lock:
            entry = self._entries.get(item_id)
            return None if entry is None else entry[1]

    def record_storage_fetch(self, size_bytes: int, epoch: int = 0) -> None:
        with self._lock:
            self.stats.epoch(epoch).bytes_fetched_from_storage += int(size_bytes)

    def _touch(self, item_id: int) -> None:
        pass

    def admit(self, item_id: int, size_bytes: int, epoch: int = 0, value: Any = None) -> AdmitResult:
        raise NotImplementedError

    def clear(self) -> None:
        with self._lock:
            self._entries = self._new_store()
            self.used_bytes = 0


class MinIOCache(Cache):
    """Admit on first sight until full; cached items are never replaced."""

    policy = Policy.MINIO

    def admit(self, item_id, size_bytes, epoch=0, value=None):
        with self._lock:
            st = self.stats.epoch(epoch)
            if item_id in self._entries:
                return AdmitResult("admitted")
            if self.used_bytes + size_bytes > self.capacity_bytes:
                st.rejections += 1
                return AdmitResult("rejected")
            self._entries[item_id] = (int(size_bytes), value)
            self.used_bytes += int(size_bytes)
            st.admissions += 1
            return AdmitResult("admitted")


class LRUCache(Cache):
    policy = Policy.LRU

    def _new_store(self):
        return OrderedDict()

    def _touch(self, item_id):
        self._entries.move_to_end(item_id)

    def recency(self) -> list[int]:
        """Cached ids from least to most recently used."""
        with self._lock:
            return list(self._entries)

    def admit(self, item_id, size_bytes, epoch=0, value=None):
        with self._lock:
            st = self.stats.epoch(epoch)
            if item_id in self._entries:
                self._entries.move_to_end(item_id)
                return AdmitResult("admitted")
            if size_bytes > self.capacity_bytes:
                log.warning("item %d (%d B) exceeds LRU capacity %d B; bypassing cache",
                            item_id, size_bytes, self.capacity_bytes)
                st.rejections += 1
                return AdmitResult("rejected")
            victims = []
            while self.used_bytes + size_bytes > self.capacity_bytes:
                vid, (vsize, _) = self._entries.popitem(last=False)
                self.used_bytes -= vsize
                victims.append(vid)
            self._entries[item_id] = (int(size_bytes), value)
            self.used_bytes += int(size_bytes)
            st.admissions += 1
            st.evictions += len(victims)
            if victims:
                return AdmitResult("evicted", tuple(victims))
            return AdmitResult("admitted")


def make_cache(config: CacheConfig) -> Cache:
    if config.policy is Policy.MINIO:
        return MinIOCache(config.capacity_bytes)
    return LRUCache(config.capacity_bytes)


def steady_state_misses_per_epoch(n_items: int, capacity_items: int) -> int:
    """Per-epoch misses of a warmed MinIO cache over equal-size items."""
    return max(0, n_items - capacity_items)


def replay(cache: Cache, epochs: Iterable[Sequence[int]], sizes: Sequence[int] | None = None,
           first_epoch: int = 0) -> list[int]:
    """Drive ``cache`` with epoch-ordered id traces; return misses per epoch.

    Each miss is treated as a storage fetch followed by an admit, which is
    the access pattern of a data loader sitting on top of the cache.
    """
    misses = []
    for e, trace in enumerate(epochs, start=first_epoch):
        before = cache.stats.epoch(e).misses
        for i in trace:
            i = int(i)
            if not cache.lookup(i, e):
                size = 1 if sizes is None else int(sizes[i])
                cache.record_storage_fetch(size, e)
                cache.admit(i, size, e)
        misses.append(cache.stats.epoch(e).misses - before)
    return misses
