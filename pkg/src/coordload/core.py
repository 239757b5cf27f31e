"""Domain types, keyed randomness and epoch planning.

Every random decision in the package (item sizes, epoch order, payload
bytes) is drawn from a Philox counter-based generator keyed on the run seed
plus a stream tag, so any value can be regenerated independently of the
order in which it was first computed.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator, Mapping, Sequence

import numpy as np

from .errors import ConfigError

log = logging.getLogger(__name__)

_MASK64 = (1 << 64) - 1

# stream tags keep independent draws from colliding
_TAG_SIZES = 1
_TAG_SHUFFLE = 2
_TAG_PAYLOAD = 3


def keyed_rng(seed: int, tag: int, counter: int = 0) -> np.random.Generator:
    """Generator whose stream depends only on (seed, tag, counter)."""
    key = ((seed & _MASK64) << 64) | ((tag & 0xFFFF) << 48) | (counter & ((1 << 48) - 1))
    return np.random.Generator(np.random.Philox(key=key))


def item_payload(item_id: int, size_bytes: int, seed: int) -> bytes:
    """Synthetic content of an item; a pure function of its identity."""
    return keyed_rng(seed, _TAG_PAYLOAD, item_id).bytes(size_bytes)


def fingerprint_bytes(payload: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "big")


@dataclass(frozen=True)
class DataItem:
    id: int
    size_bytes: int
    seed: int = 0

    @cached_property
    def fingerprint(self) -> int:
        return fingerprint_bytes(self.payload())

    def payload(self) -> bytes:
        return item_payload(self.id, self.size_bytes, self.seed)


@dataclass(frozen=True)
class SizeModel:
    """Item size distribution: ``fixed``, ``uniform`` or ``lognormal``."""

    kind: str = "fixed"
    bytes: int = 1
    lo: int = 1
    hi: int = 1
    mu: float = 0.0
    sigma: float = 1.0

    def __post_init__(self):
        if self.kind == "fixed":
            if self.bytes < 1:
                raise ConfigError(f"fixed size must be >= 1 byte, got {self.bytes}")
        elif self.kind == "uniform":
            if self.lo < 1 or self.hi < 1:
                raise ConfigError("uniform size bounds must be >= 1 byte")
            if self.lo > self.hi:
                raise ConfigError(f"uniform size bounds inverted: lo={self.lo} > hi={self.hi}")
        elif self.kind == "lognormal":
            if not self.sigma > 0:
                raise ConfigError("lognormal sigma must be > 0")
        else:
            raise ConfigError(f"unknown size model {self.kind!r}")

    @classmethod
    def fixed(cls, nbytes: int) -> "SizeModel":
        return cls(kind="fixed", bytes=nbytes)

    @classmethod
    def uniform(cls, lo: int, hi: int) -> "SizeModel":
        return cls(kind="uniform", lo=lo, hi=hi)

    @classmethod
    def lognormal(cls, mu: float, sigma: float) -> "SizeModel":
        return cls(kind="lognormal", mu=mu, sigma=sigma)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "fixed":
            return np.full(n, self.bytes, dtype=np.int64)
        if self.kind == "uniform":
            return rng.integers(self.lo, self.hi, endpoint=True, size=n).astype(np.int64)
        raw = rng.lognormal(self.mu, self.sigma, size=n)
        return np.maximum(1, np.rint(raw)).astype(np.int64)

    def to_dict(self) -> dict:
        if self.kind == "fixed":
            return {"kind": "fixed", "bytes": self.bytes}
        if self.kind == "uniform":
            return {"kind": "uniform", "lo": self.lo, "hi": self.hi}
        return {"kind": "lognormal", "mu": self.mu, "sigma": self.sigma}

    @classmethod
    def from_dict(cls, d: Mapping) -> "SizeModel":
        try:
            return cls(**dict(d))
        except TypeError as e:
            raise ConfigError(f"bad size model {dict(d)!r}: {e}") from None


@dataclass
class Dataset:
    items: list[DataItem]
    seed: int
    size_model: SizeModel = field(default_factory=SizeModel)

    def __post_init__(self):
        self.sizes = np.array([it.size_bytes for it in self.items], dtype=np.int64)

    @property
    def n_items(self) -> int:
        return len(self.items)

    @property
    def total_bytes(self) -> int:
        return int(self.sizes.sum())

    @property
    def mean_item_bytes(self) -> float:
        return self.total_bytes / self.n_items

    def __len__(self) -> int:
        return len(self.items)

    def __getitem__(self, item_id: int) -> DataItem:
        if not 0 <= item_id < len(self.items):
            raise KeyError(item_id)
        return self.items[item_id]

    def size_in_samples(self, item_id: int) -> float:
        """Item size relative to the dataset mean; rates are in samples/s."""
        return float(self.sizes[item_id]) / self.mean_item_bytes

    def to_dict(self) -> dict:
        return {
            "n_items": self.n_items,
            "seed": self.seed,
            "size_model": self.size_model.to_dict(),
            "total_bytes": self.total_bytes,
            "items": [
                {"id": it.id, "size_bytes": it.size_bytes, "fingerprint": f"{it.fingerprint:016x}"}
                for it in self.items
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d: Mapping) -> "Dataset":
        seed = int(d["seed"])
        items = [DataItem(int(r["id"]), int(r["size_bytes"]), seed) for r in d["items"]]
        for pos, it in enumerate(items):
            if it.id != pos:
                raise ConfigError(f"dataset ids must be 0..N-1 in order; got {it.id} at {pos}")
        ds = cls(items, seed, SizeModel.from_dict(d.get("size_model", {"kind": "fixed", "bytes": 1})))
        for r, it in zip(d["items"], items):
            if "fingerprint" in r and int(r["fingerprint"], 16) != it.fingerprint:
                raise ConfigError(f"fingerprint mismatch for item {it.id}")
        return ds

    @classmethod
    def from_json(cls, text: str) -> "Dataset":
        return cls.from_dict(json.loads(text))


def make_dataset(n_items: int, size_model: SizeModel, seed: int) -> Dataset:
    if n_items < 1:
        raise ConfigError(f"n_items must be >= 1, got {n_items}")
    sizes = size_model.sample(n_items, keyed_rng(seed, _TAG_SIZES))
    items = [DataItem(i, int(s), seed) for i, s in enumerate(sizes)]
    return Dataset(items, seed, size_model)


@dataclass(frozen=True, order=True)
class MinibatchId:
    epoch_index: int
    batch_index: int

    def __str__(self) -> str:
        return f"{self.epoch_index}:{self.batch_index}"


class ShardAssignment:
    """Disjoint cover of the item ids by server."""

    def __init__(self, shards: Mapping[int, Sequence[int]]):
        self.shards = {int(k): tuple(int(i) for i in v) for k, v in shards.items()}
        self._owner: dict[int, int] = {}
        for server, ids in self.shards.items():
            for i in ids:
                if i in self._owner:
                    raise ValueError(f"item {i} assigned to servers {self._owner[i]} and {server}")
                self._owner[i] = server

    @property
    def servers(self) -> list[int]:
        return sorted(self.shards)

    def owner_of(self, item_id: int) -> int:
        try:
            return self._owner[item_id]
        except KeyError:
            raise KeyError(f"item {item_id} is not in the shard assignment") from None

    def __len__(self) -> int:
        return len(self._owner)

    def to_dict(self) -> dict:
        return {str(k): list(v) for k, v in sorted(self.shards.items())}

    def __eq__(self, other):
        return isinstance(other, ShardAssignment) and self.shards == other.shards


def owner_of(item_id: int, ownership: ShardAssignment) -> int:
    return ownership.owner_of(item_id)


@dataclass
class EpochPlan:
    epoch_index: int
    batch_size: int
    permutation: np.ndarray
    shard_assignment: ShardAssignment | None = None
    server_id: int | None = None

    @property
    def n_items(self) -> int:
        return len(self.permutation)

    @property
    def minibatches(self) -> list[np.ndarray]:
        bs = self.batch_size
        return [self.permutation[i:i + bs] for i in range(0, len(self.permutation), bs)]

    @property
    def n_batches(self) -> int:
        return math.ceil(len(self.permutation) / self.batch_size)

    def minibatch_ids(self) -> Iterator[MinibatchId]:
        for b in range(self.n_batches):
            yield MinibatchId(self.epoch_index, b)

    def for_server(self, server_id: int) -> "EpochPlan":
        """This server's processing shard, in epoch order."""
        if self.shard_assignment is None:
            if server_id != 0:
                raise KeyError(server_id)
            return self
        n = len(self.shard_assignment.shards)
        return EpochPlan(self.epoch_index, self.batch_size,
                         self.permutation[server_id::n], None, server_id)

    def to_dict(self) -> dict:
        d = {
            "epoch_index": self.epoch_index,
            "batch_size": self.batch_size,
            "permutation": [int(i) for i in self.permutation],
        }
        if self.shard_assignment is not None:
            d["shard_assignment"] = self.shard_assignment.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "EpochPlan":
        shards = d.get("shard_assignment")
        return cls(
            int(d["epoch_index"]),
            int(d["batch_size"]),
            np.asarray(d["permutation"], dtype=np.int64),
            ShardAssignment({int(k): v for k, v in shards.items()}) if shards else None,
        )


def plan_epoch(dataset: Dataset | int, epoch_index: int, batch_size: int,
               n_servers: int = 1, seed: int = 0) -> EpochPlan:
    """Shuffle the dataset for one epoch and cut it into minibatches.

    Servers take interleaved slices of the permutation, so shard sizes differ
    by at most one item and the per-server shards are re-randomized each epoch.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if n_servers < 1:
        raise ValueError(f"n_servers must be >= 1, got {n_servers}")
    n = dataset if isinstance(dataset, int) else dataset.n_items
    perm = keyed_rng(seed, _TAG_SHUFFLE, epoch_index).permutation(n)
    shards = None
    if n_servers > 1:
        shards = ShardAssignment({k: perm[k::n_servers] for k in range(n_servers)})
    return EpochPlan(epoch_index, batch_size, perm, shards)


def ownership_from_first_epoch(dataset: Dataset | int, n_servers: int, seed: int) -> ShardAssignment:
    """Frozen item->server map: the processing shards of the first epoch."""
    plan = plan_epoch(dataset, 0, 1, n_servers, seed)
    return plan.shard_assignment or ShardAssignment({0: plan.permutation})


@dataclass(frozen=True)
class RateSpec:
    """Pipeline rates, all in samples/second."""

    gpu_rate_G: float
    prep_rate_P: float
    cache_rate_C: float
    storage_rate_S: float
    network_rate: float = math.inf

    def __post_init__(self):
        for name in ("gpu_rate_G", "prep_rate_P", "cache_rate_C", "storage_rate_S", "network_rate"):
            v = getattr(self, name)
            if not v > 0:
                raise ConfigError(f"{name} must be > 0, got {v}")
        if self.cache_rate_C < self.storage_rate_S:
            log.warning("cache rate %.3g is below storage rate %.3g", self.cache_rate_C, self.storage_rate_S)

    @property
    def G(self) -> float:
        return self.gpu_rate_G

    @property
    def P(self) -> float:
        return self.prep_rate_P

    @property
    def C(self) -> float:
        return self.cache_rate_C

    @property
    def S(self) -> float:
        return self.storage_rate_S

    def to_dict(self) -> dict:
        return {k: _json_rate(getattr(self, k)) for k in
                ("gpu_rate_G", "prep_rate_P", "cache_rate_C", "storage_rate_S", "network_rate")}

    @classmethod
    def from_dict(cls, d: Mapping) -> "RateSpec":
        return cls(**{k: float(v) for k, v in d.items()})


def _json_rate(v: float):
    return "inf" if math.isinf(v) else v


def bytes_rate_to_samples(rate_bytes_per_s: float, dataset: Dataset) -> float:
    return rate_bytes_per_s / dataset.mean_item_bytes
