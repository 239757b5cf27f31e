"""Prefetch -> prep -> compute pipeline with bounded queues.

Virtual mode evaluates the pipeline as a max-plus recurrence over
minibatches (batch ``b`` cannot start a stage before its predecessor in that
stage finishes and before there is room downstream), so timings are exact
and deterministic. Wall mode runs real worker threads against ``WallDevice``
instances and measures.

Compute idle time is split into fetch and prep stalls by queue state: while
the compute stage waits, if some fetched minibatch is waiting for a prep
worker the stall is charged to prep, otherwise to fetch.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import threading
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .cache import Cache, CacheConfig, MinIOCache, Policy, make_cache
from .core import Dataset, EpochPlan, RateSpec, make_dataset, plan_epoch, SizeModel
from .errors import ConfigError, FetchError
from .storage import Device, make_devices

log = logging.getLogger(__name__)

Fetcher = Callable[[int, int], str]


@dataclass
class StallReport:
    epoch_index: int
    compute_seconds: float
    fetch_stall_seconds: float
    prep_stall_seconds: float
    epoch_seconds: float
    samples_processed: int
    throughput_samples_per_s: float
    steady_throughput_samples_per_s: float = math.nan
    storage_reads: int = 0
    cache_reads: int = 0
    remote_reads: int = 0
    prep_ops: int = 0
    server_id: int = 0
    failed: bool = False
    error: str = ""

    @property
    def stall_seconds(self) -> float:
        return self.fetch_stall_seconds + self.prep_stall_seconds

    def to_row(self) -> dict:
        return asdict(self)


REPORT_COLUMNS = [f.name for f in fields(StallReport)]


def reports_to_csv(reports: Sequence[StallReport], extra: Mapping | None = None) -> str:
    buf = io.StringIO()
    cols = list(extra or {}) + REPORT_COLUMNS
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow({**(extra or {}), **_round_row(r.to_row())})
    return buf.getvalue()


def _round_row(row: dict) -> dict:
    return {k: (float(f"{v:.9g}") if isinstance(v, float) else v) for k, v in row.items()}


@dataclass(frozen=True)
class PipelineConfig:
    batch_size: int
    rates: RateSpec
    cache: CacheConfig | None = None
    n_fetch_workers: int = 1
    n_prep_workers: int = 1
    queue_depth: int = 2

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.queue_depth < 1:
            raise ConfigError("queue_depth must be >= 1")
        if self.n_fetch_workers < 1 or self.n_prep_workers < 1:
            raise ConfigError("worker counts must be >= 1")


class LocalFetcher:
    """Local cache first, storage on miss (then offered to the cache)."""

    def __init__(self, cache: Cache | None, dataset: Dataset | None):
        self.cache = cache
        self.dataset = dataset

    def __call__(self, item_id: int, epoch: int) -> str:
        if self.cache is not None and self.cache.lookup(item_id, epoch):
            return "local_cache"
        if self.cache is not None:
            size = int(self.dataset.sizes[item_id]) if self.dataset is not None else 1
            self.cache.record_storage_fetch(size, epoch)
            self.cache.admit(item_id, size, epoch)
        return "local_storage"


def _per_batch_time(n: int, rate: float) -> float:
    return 0.0 if math.isinf(rate) else n / rate


def attribute_stalls(t0: float, fetch_end, prep_start, comp_start, comp_end,
                     ordered: bool = True) -> tuple[float, float]:
    """Split compute idle gaps into (fetch_stall, prep_stall).

    During a gap, time covered by some interval [fetch_end[j], prep_start[j])
    (a fetched batch queued for prep) is a prep stall; the rest is a fetch stall.
    ``ordered`` promises fetch completions are monotone in batch index.
    """
    nb = len(comp_start)
    fetch_stall = prep_stall = 0.0
    prev = t0
    for b in range(nb):
        lo, hi = prev, comp_start[b]
        gap = hi - lo
        if gap > 0:
            spans = []
            for j in range(b, nb):
                if fetch_end[j] >= hi:
                    if ordered:
                        break
                    continue
                a, z = max(fetch_end[j], lo), min(prep_start[j], hi)
                if z > a:
                    spans.append((a, z))
            covered = _union_length(spans)
            prep_stall += covered
            fetch_stall += gap - covered
        prev = comp_end[b]
    return float(fetch_stall), float(prep_stall)


def _union_length(spans: list[tuple[float, float]]) -> float:
    if not spans:
        return 0.0
    spans.sort()
    total = 0.0
    cur_a, cur_z = spans[0]
    for a, z in spans[1:]:
        if a > cur_z:
            total += cur_z - cur_a
            cur_a, cur_z = a, z
        else:
            cur_z = max(cur_z, z)
    return total + cur_z - cur_a


@dataclass(frozen=True)
class BatchTiming:
    batch_index: int
    fetch_end: float
    prep_start: float
    prep_end: float
    comp_start: float
    comp_end: float


def run_epoch(plan: EpochPlan, cfg: PipelineConfig, cache: Cache | None,
              devices: Mapping[str, Device], dataset: Dataset | None = None,
              fetcher: Fetcher | None = None, clock: str = "virtual",
              t0: float | None = None, timeline: list | None = None) -> StallReport:
    """Push every item of ``plan`` through fetch, prep and compute once.

    Pass a list as ``timeline`` to receive one ``BatchTiming`` per minibatch
    (virtual mode only).
    """
    if fetcher is None:
        fetcher = LocalFetcher(cache, dataset)
    if clock == "wall":
        return _run_epoch_wall(plan, cfg, devices, dataset, fetcher)
    return _run_epoch_virtual(plan, cfg, devices, dataset, fetcher, t0, timeline)


def _sizes_in_samples(dataset: Dataset | None):
    if dataset is None:
        return None
    return dataset.sizes / dataset.mean_item_bytes


def _run_epoch_virtual(plan, cfg, devices, dataset, fetcher, t0, timeline=None):
    rates = cfg.rates
    Q, k = cfg.queue_depth, cfg.n_prep_workers
    batches = plan.minibatches
    nb = len(batches)
    scale = _sizes_in_samples(dataset)
    if t0 is None:
        t0 = max((d.free_at for d in devices.values()), default=0.0)
    fetch_end = np.zeros(nb)
    prep_start = np.zeros(nb)
    prep_end = np.zeros(nb)
    comp_start = np.zeros(nb)
    comp_end = np.zeros(nb)
    sources = {"local_storage": 0, "local_cache": 0, "remote_cache": 0}
    fetch_free = t0
    failed, error = False, ""
    done = 0
    for b, items in enumerate(batches):
        t = fetch_free
        if b >= Q:
            t = max(t, prep_start[b - Q])
        try:
            for i in items:
                i = int(i)
                src = fetcher(i, plan.epoch_index)
                size = 1.0 if scale is None else float(scale[i])
                t = devices[src].read(i, size, t)
                sources[src] += 1
        except FetchError as e:
            log.error("epoch %d aborted at minibatch %d: %s", plan.epoch_index, b, e)
            failed, error = True, str(e)
            break
        fetch_end[b] = fetch_free = t
        ps = max(fetch_end[b], prep_end[b - k] if b >= k else t0)
        if b - Q - k >= 0:
            ps = max(ps, comp_start[b - Q - k])
        prep_start[b] = ps
        prep_end[b] = ps + _per_batch_time(len(items) * k, rates.P)
        comp_start[b] = max(prep_end[b], comp_end[b - 1] if b else t0)
        comp_end[b] = comp_start[b] + _per_batch_time(len(items), rates.G)
        done = b + 1
    if timeline is not None:
        timeline.extend(BatchTiming(b, float(fetch_end[b]), float(prep_start[b]), float(prep_end[b]),
                                    float(comp_start[b]), float(comp_end[b])) for b in range(done))
    sl = slice(0, done)
    return _make_report(plan, batches[:done], t0, fetch_end[sl], prep_start[sl], comp_start[sl],
                        comp_end[sl], sources, failed, error)


def _make_report(plan, batches, t0, fetch_end, prep_start, comp_start, comp_end, sources,
                 failed=False, error="", ordered=True):
    nb = len(batches)
    samples = int(sum(len(x) for x in batches))
    if nb == 0:
        return StallReport(plan.epoch_index, 0.0, 0.0, 0.0, 0.0, 0, 0.0, math.nan,
                           server_id=plan.server_id or 0, failed=failed, error=error)
    fetch_stall, prep_stall = attribute_stalls(t0, fetch_end, prep_start, comp_start, comp_end,
                                               ordered)
    epoch_seconds = float(comp_end[-1] - t0)
    compute_seconds = float(np.sum(np.asarray(comp_end) - np.asarray(comp_start)))
    throughput = samples / epoch_seconds if epoch_seconds > 0 else math.inf
    steady = math.nan
    if nb > 1:
        span = float(comp_end[-1] - comp_end[0])
        steady = (samples - len(batches[0])) / span if span > 0 else math.inf
    return StallReport(
        epoch_index=plan.epoch_index,
        compute_seconds=compute_seconds,
        fetch_stall_seconds=fetch_stall,
        prep_stall_seconds=prep_stall,
        epoch_seconds=epoch_seconds,
        samples_processed=samples,
        throughput_samples_per_s=throughput,
        steady_throughput_samples_per_s=steady,
        storage_reads=sources["local_storage"],
        cache_reads=sources["local_cache"],
        remote_reads=sources["remote_cache"],
        prep_ops=nb,
        server_id=plan.server_id or 0,
        failed=failed,
        error=error,
    )


def _run_epoch_wall(plan, cfg, devices, dataset, fetcher):
    rates = cfg.rates
    Q, k, m = cfg.queue_depth, cfg.n_prep_workers, cfg.n_fetch_workers
    batches = plan.minibatches
    nb = len(batches)
    scale = _sizes_in_samples(dataset)
    fetch_end = [math.inf] * nb
    prep_start = [math.inf] * nb
    prep_end = [math.inf] * nb
    comp_start = [0.0] * nb
    comp_end = [0.0] * nb
    sources = {"local_storage": 0, "local_cache": 0, "remote_cache": 0}
    cond = threading.Condition()
    state = {"prep_taken": 0, "comp_taken": 0, "error": None}
    t0 = time.monotonic()

    def now():
        return time.monotonic() - t0

    def fetch_worker(w):
        for b in range(w, nb, m):
            with cond:
                cond.wait_for(lambda: b < state["prep_taken"] + Q or state["error"])
                if state["error"]:
                    return
            try:
                for i in batches[b]:
                    i = int(i)
                    src = fetcher(i, plan.epoch_index)
                    devices[src].read(i, 1.0 if scale is None else float(scale[i]))
                    with cond:
                        sources[src] += 1
            except FetchError as e:
                with cond:
                    state["error"] = str(e)
                    cond.notify_all()
                return
            with cond:
                fetch_end[b] = now()
                cond.notify_all()

    def prep_worker(w):
        for b in range(w, nb, k):
            with cond:
                cond.wait_for(lambda: (fetch_end[b] < math.inf and state["prep_taken"] == b
                                       and b < state["comp_taken"] + Q + k) or state["error"])
                if state["error"]:
                    return
                prep_start[b] = now()
                state["prep_taken"] = b + 1
                cond.notify_all()
            _sleep(_per_batch_time(len(batches[b]) * k, rates.P))
            with cond:
                prep_end[b] = now()
                cond.notify_all()

    threads = [threading.Thread(target=fetch_worker, args=(w,), daemon=True) for w in range(m)]
    threads += [threading.Thread(target=prep_worker, args=(w,), daemon=True) for w in range(k)]
    for th in threads:
        th.start()
    done = 0
    for b in range(nb):
        with cond:
            cond.wait_for(lambda: prep_end[b] < math.inf or state["error"])
            if state["error"] and prep_end[b] == math.inf:
                break
            comp_start[b] = now()
            state["comp_taken"] = b + 1
            cond.notify_all()
        _sleep(_per_batch_time(len(batches[b]), rates.G))
        comp_end[b] = now()
        done = b + 1
    with cond:
        if done < nb and not state["error"]:
            state["error"] = "aborted"
        cond.notify_all()
    for th in threads:
        th.join(timeout=5.0)
    failed = done < nb
    if failed:
        log.error("epoch %d aborted: %s", plan.epoch_index, state["error"])
    sl = slice(0, done)
    return _make_report(plan, batches[:done], 0.0, fetch_end[sl], prep_start[sl], comp_start[sl],
                        comp_end[sl], sources, failed, state["error"] or "", ordered=(m == 1))


def _sleep(seconds: float) -> None:
    if seconds > 0:
        time.sleep(seconds)


def run_epochs(dataset: Dataset, cfg: PipelineConfig, n_epochs: int, seed: int,
               cache: Cache | None = None, devices: Mapping[str, Device] | None = None,
               clock: str = "virtual", first_epoch: int = 0) -> list[StallReport]:
    """Run consecutive epochs on one cache and device set."""
    if cache is None and cfg.cache is not None:
        cache = make_cache(cfg.cache)
    if devices is None:
        devices = make_devices(cfg.rates.S, cfg.rates.C, cfg.rates.network_rate,
                               n_items=dataset.n_items, clock=clock)
    out = []
    for e in range(first_epoch, first_epoch + n_epochs):
        plan = plan_epoch(dataset, e, cfg.batch_size, 1, seed)
        out.append(run_epoch(plan, cfg, cache, devices, dataset, clock=clock))
    return out


PHASES = ("synthetic_at_gpu", "fully_cached", "cold_cache", "storage_only", "cache_only")


def measure_phase(cfg: PipelineConfig, phase: str, n_iterations: int = 100,
                  cache_fraction: float = 0.0, seed: int = 0) -> float:
    """Throughput (samples/s) of one differential profiling run.

    ``synthetic_at_gpu`` bypasses fetch and prep, ``fully_cached`` serves every
    item from a warm cache, ``cold_cache`` starts from an empty cache capped at
    ``cache_fraction`` of the working set. ``storage_only`` and ``cache_only``
    disable prep and compute to expose the raw device rates. The first
    iteration is treated as pipeline fill and excluded.
    """
    if n_iterations < 1:
        raise ValueError("n_iterations must be >= 1")
    if phase not in PHASES:
        raise ValueError(f"unknown phase {phase!r}")
    n = n_iterations * cfg.batch_size
    ds = make_dataset(n, SizeModel.fixed(1), seed)
    plan = plan_epoch(ds, 0, cfg.batch_size, 1, seed)
    r = cfg.rates
    inf = math.inf
    if phase == "synthetic_at_gpu":
        rates = replace(r, prep_rate_P=inf, cache_rate_C=inf, storage_rate_S=inf)
        cache = None
    elif phase == "fully_cached":
        rates = r
        cache = MinIOCache(n)
        for i in range(n):
            cache.admit(i, 1)
    elif phase == "cold_cache":
        rates = r
        cache = MinIOCache(int(round(cache_fraction * n)))
    elif phase == "storage_only":
        rates = replace(r, prep_rate_P=inf, gpu_rate_G=inf)
        cache = None
    else:
        rates = replace(r, prep_rate_P=inf, gpu_rate_G=inf)
        cache = MinIOCache(n)
        for i in range(n):
            cache.admit(i, 1)
    pcfg = replace(cfg, rates=rates)
    devices = make_devices(rates.S, rates.C, rates.network_rate, n_items=n)
    rep = run_epoch(plan, pcfg, cache, devices, ds)
    if n_iterations == 1:
        return rep.throughput_samples_per_s
    return rep.steady_throughput_samples_per_s
