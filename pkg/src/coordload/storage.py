"""Rate-limited FIFO devices for storage, local cache and remote cache reads.

``Device`` runs on a virtual clock: ``read`` returns the completion time and
never sleeps. ``WallDevice`` serializes callers and sleeps for real, which is
what the loopback TCP path and the threaded runners use.
"""

from __future__ import annotations

import enum
import math
import threading
import time
from dataclasses import dataclass
from typing import Mapping

from .errors import ConfigError, FetchError


class DeviceKind(str, enum.Enum):
    LOCAL_STORAGE = "local_storage"
    LOCAL_CACHE = "local_cache"
    REMOTE_CACHE = "remote_cache"


@dataclass(frozen=True)
class DeviceConfig:
    kind: DeviceKind
    rate: float
    rate_unit: str = "samples_per_s"

    def __post_init__(self):
        object.__setattr__(self, "kind", DeviceKind(self.kind))
        if self.rate_unit not in ("samples_per_s", "bytes_per_s"):
            raise ConfigError(f"unknown rate_unit {self.rate_unit!r}")
        if not self.rate > 0:
            raise ConfigError(f"device rate must be > 0, got {self.rate}")

    def samples_per_s(self, mean_item_bytes: float) -> float:
        if self.rate_unit == "bytes_per_s":
            return self.rate / mean_item_bytes
        return self.rate

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "rate": self.rate, "rate_unit": self.rate_unit}


class Device:
    """Work-conserving FIFO server with a fixed rate, on a virtual clock."""

    def __init__(self, kind: DeviceKind | str, rate: float, n_items: int | None = None):
        if not rate > 0:
            raise ConfigError(f"device rate must be > 0, got {rate}")
        self.kind = DeviceKind(kind)
        self.rate = float(rate)
        self.n_items = n_items
        self.free_at = 0.0
        self.samples_served = 0.0
        self.reads = 0

    def service_time(self, size: float) -> float:
        return 0.0 if math.isinf(self.rate) else size / self.rate

    def _check(self, item_id: int) -> None:
        if self.n_items is not None and not 0 <= item_id < self.n_items:
            raise FetchError(f"{self.kind.value}: unknown item {item_id}")

    def read(self, item_id: int, size: float = 1.0, now: float = 0.0) -> float:
        """Queue a read of ``size`` samples issued at ``now``; return its completion time."""
        self._check(item_id)
        start = max(now, self.free_at)
        self.free_at = start + self.service_time(size)
        self.samples_served += size
        self.reads += 1
        return self.free_at

    def reset(self) -> None:
        self.free_at = 0.0
        self.samples_served = 0.0
        self.reads = 0


class WallDevice(Device):
    """Same FIFO model, but ``read`` blocks the caller for the service time."""

    def __init__(self, kind, rate, n_items=None):
        super().__init__(kind, rate, n_items)
        self._lock = threading.Lock()
        self._t0 = time.monotonic()

    def now(self) -> float:
        return time.monotonic() - self._t0

    def read(self, item_id, size=1.0, now=None):
        self._check(item_id)
        with self._lock:
            start = max(self.now(), self.free_at)
            done = start + self.service_time(size)
            self.free_at = done
            self.samples_served += size
            self.reads += 1
        delay = done - self.now()
        if delay > 0:
            time.sleep(delay)
        return done


def make_devices(storage_rate: float, cache_rate: float, network_rate: float = math.inf,
                 n_items: int | None = None, clock: str = "virtual") -> dict[str, Device]:
    cls = WallDevice if clock == "wall" else Device
    return {
        "local_storage": cls(DeviceKind.LOCAL_STORAGE, storage_rate, n_items),
        "local_cache": cls(DeviceKind.LOCAL_CACHE, cache_rate, n_items),
        "remote_cache": cls(DeviceKind.REMOTE_CACHE, network_rate, n_items),
    }


def devices_from_config(blocks: list[Mapping], mean_item_bytes: float, n_items: int | None = None,
                        clock: str = "virtual") -> dict[str, Device]:
    cls = WallDevice if clock == "wall" else Device
    out = {}
    for b in blocks:
        cfg = DeviceConfig(**dict(b))
        out[cfg.kind.value] = cls(cfg.kind, cfg.samples_per_s(mean_item_bytes), n_items)
    return out
