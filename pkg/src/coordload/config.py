"""Run configuration: one YAML file per experiment.

Example::

    dataset: {n_items: 4000, size_model: {kind: fixed, bytes: 1000}}
    rates: {gpu_rate_G: 400, prep_rate_P: 300, cache_rate_C: 100000, storage_rate_S: 100}
    cache: {policy: minio, capacity_fraction: 0.35}
    mode: {kind: single}
    baseline: true
    epochs: 3
    batch_size: 50
    seed: 1
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

import yaml

from .cache import CacheConfig, Policy
from .core import Dataset, RateSpec, SizeModel, make_dataset
from .errors import ConfigError
from .pipeline import PipelineConfig
from .storage import DeviceConfig, DeviceKind

MODES = ("single", "distributed", "hp_search")
CLOCKS = ("virtual", "wall")


@dataclass(frozen=True)
class DatasetSpec:
    n_items: int
    size_model: SizeModel = field(default_factory=lambda: SizeModel.fixed(1))
    seed: int | None = None

    def build(self, run_seed: int) -> Dataset:
        return make_dataset(self.n_items, self.size_model, run_seed if self.seed is None else self.seed)


@dataclass(frozen=True)
class CacheSpec:
    policy: Policy = Policy.MINIO
    capacity_fraction: float | None = None
    capacity_bytes: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "policy", Policy(self.policy))
        if (self.capacity_fraction is None) == (self.capacity_bytes is None):
            raise ConfigError("cache needs exactly one of capacity_fraction or capacity_bytes")
        if self.capacity_fraction is not None and not 0.0 <= self.capacity_fraction <= 1.0:
            raise ConfigError(f"capacity_fraction must lie in [0, 1], got {self.capacity_fraction}")
        if self.capacity_bytes is not None and self.capacity_bytes < 0:
            raise ConfigError("capacity_bytes must be >= 0")

    def resolve(self, dataset: Dataset, policy: Policy | None = None) -> CacheConfig:
        if self.capacity_bytes is not None:
            cap = self.capacity_bytes
        else:
            cap = int(round(self.capacity_fraction * dataset.total_bytes))
        return CacheConfig(cap, policy or self.policy)


@dataclass(frozen=True)
class ModeSpec:
    kind: str = "single"
    n_servers: int = 1
    n_jobs: int = 1

    def __post_init__(self):
        if self.kind not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.kind!r}")
        if self.n_servers < 1 or self.n_jobs < 1:
            raise ConfigError("n_servers and n_jobs must be >= 1")
        if self.kind == "distributed" and self.n_servers < 2:
            raise ConfigError("distributed mode needs n_servers >= 2")


@dataclass(frozen=True)
class Toggles:
    minio_on: bool = True
    partitioned_on: bool = False
    coord_prep_on: bool = False


@dataclass(frozen=True)
class HPTiming:
    """Wall-clock HP search only: failure-detector settings."""

    timeout_factor: float = 10.0


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetSpec
    rates: RateSpec
    cache: CacheSpec
    mode: ModeSpec = field(default_factory=ModeSpec)
    toggles: Toggles | None = None
    baseline: bool = False
    epochs: int = 2
    batch_size: int = 32
    seed: int = 0
    clock: str = "virtual"
    n_fetch_workers: int = 1
    n_prep_workers: int = 1
    queue_depth: int = 2
    devices: tuple[DeviceConfig, ...] = ()
    hp: HPTiming = field(default_factory=HPTiming)

    def __post_init__(self):
        if self.toggles is None:
            object.__setattr__(self, "toggles", Toggles(
                minio_on=self.cache.policy is Policy.MINIO,
                partitioned_on=self.mode.kind == "distributed",
                coord_prep_on=self.mode.kind == "hp_search"))
        if self.toggles.partitioned_on and self.mode.kind != "distributed":
            raise ConfigError("partitioned_on requires distributed mode")
        if self.toggles.coord_prep_on and self.mode.kind != "hp_search":
            raise ConfigError("coord_prep_on requires hp_search mode")
        if self.epochs < 2:
            raise ConfigError("epochs must be >= 2 (one warmup epoch plus at least one measured)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.clock not in CLOCKS:
            raise ConfigError(f"clock must be one of {CLOCKS}, got {self.clock!r}")

    def effective_rates(self, dataset: Dataset) -> RateSpec:
        """Rates with any device blocks (possibly in bytes/s) folded in."""
        r = self.rates
        names = {DeviceKind.LOCAL_STORAGE: "storage_rate_S", DeviceKind.LOCAL_CACHE: "cache_rate_C",
                 DeviceKind.REMOTE_CACHE: "network_rate"}
        for d in self.devices:
            r = replace(r, **{names[d.kind]: d.samples_per_s(dataset.mean_item_bytes)})
        return r

    def pipeline_config(self, dataset: Dataset, policy: Policy | None = None) -> PipelineConfig:
        return PipelineConfig(
            batch_size=self.batch_size,
            rates=self.effective_rates(dataset),
            cache=self.cache.resolve(dataset, policy),
            n_fetch_workers=self.n_fetch_workers,
            n_prep_workers=self.n_prep_workers,
            queue_depth=self.queue_depth,
        )

    # serialization

    def to_dict(self) -> dict:
        ds = {"n_items": self.dataset.n_items, "size_model": self.dataset.size_model.to_dict()}
        if self.dataset.seed is not None:
            ds["seed"] = self.dataset.seed
        cache = {"policy": self.cache.policy.value}
        if self.cache.capacity_fraction is not None:
            cache["capacity_fraction"] = self.cache.capacity_fraction
        else:
            cache["capacity_bytes"] = self.cache.capacity_bytes
        out = {
            "dataset": ds,
            "rates": {k: _plain(v) for k, v in self.rates.to_dict().items()},
            "cache": cache,
            "mode": {"kind": self.mode.kind, "n_servers": self.mode.n_servers, "n_jobs": self.mode.n_jobs},
            "toggles": {f.name: getattr(self.toggles, f.name) for f in fields(Toggles)},
            "baseline": self.baseline,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "clock": self.clock,
            "n_fetch_workers": self.n_fetch_workers,
            "n_prep_workers": self.n_prep_workers,
            "queue_depth": self.queue_depth,
            "hp": {"timeout_factor": self.hp.timeout_factor},
        }
        if self.devices:
            out["devices"] = [d.to_dict() for d in self.devices]
        return out

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RunConfig":
        if not isinstance(d, Mapping):
            raise ConfigError("config must be a mapping")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key in ("dataset", "rates", "cache"):
            if key not in d:
                raise ConfigError(f"missing required section {key!r}")
        try:
            ds = dict(d["dataset"])
            dataset = DatasetSpec(int(ds["n_items"]), SizeModel.from_dict(ds.get("size_model", {"kind": "fixed", "bytes": 1})),
                                  None if ds.get("seed") is None else int(ds["seed"]))
            if dataset.n_items < 1:
                raise ConfigError("dataset.n_items must be >= 1")
            rates = RateSpec.from_dict(d["rates"])
            cache = CacheSpec(**dict(d["cache"]))
            mode = ModeSpec(**dict(d.get("mode", {})))
            toggles = Toggles(**dict(d["toggles"])) if d.get("toggles") is not None else None
            devices = tuple(DeviceConfig(**dict(b)) for b in d.get("devices", ()) or ())
            hp = HPTiming(**dict(d.get("hp", {}) or {}))
            scalars = {k: d[k] for k in ("baseline", "epochs", "batch_size", "seed", "clock",
                                         "n_fetch_workers", "n_prep_workers", "queue_depth") if k in d}
            return cls(dataset=dataset, rates=rates, cache=cache, mode=mode, toggles=toggles,
                       devices=devices, hp=hp, **scalars)
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"invalid config: {e}") from None

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise ConfigError(f"config is not valid YAML: {e}") from None
        return cls.from_dict(data or {})

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        return cls.loads(text)


def _plain(v):
    return v if isinstance(v, str) else float(v)
