"""Coordinated prep: one prep pass per epoch shared by concurrent HP-search jobs.

Each job prepares a round-robin share of the epoch's minibatches and stages
them; every job consumes every minibatch once, in order. An entry leaves the
staging area as soon as all live jobs have consumed it, so nothing staged in
one epoch can be seen in the next.

A consumer that waits longer than ``timeout_factor`` mean iterations for a
minibatch reports the minibatch's producer to the failure detector, which
either broadcasts a retry (producer alive) or respawns a loader for the
producer's remaining share (producer dead).
"""

from __future__ import annotations

import json
import logging
import math
import queue
import threading
import time
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Hashable, Iterable

from .cache import Cache, make_cache
from .core import Dataset, MinibatchId, plan_epoch
from .errors import ContractViolation, CoordLoadError, EpochAborted, RegistrationError
from .pipeline import BatchTiming, PipelineConfig, StallReport, run_epoch
from .storage import make_devices

log = logging.getLogger(__name__)

JobId = Hashable


class ConsumeTimeout(CoordLoadError):
    """No minibatch arrived in time; ``suspected_job`` is the one meant to stage it."""

    def __init__(self, minibatch_id: MinibatchId, suspected_job: JobId, waited: float, timeout: float):
        super().__init__(f"timed out after {waited:.4f}s waiting for {minibatch_id}; "
                         f"suspect producer {suspected_job!r}")
        self.minibatch_id = minibatch_id
        self.suspected_job = suspected_job
        self.waited = waited
        self.timeout = timeout


@dataclass
class StagingEntry:
    minibatch_id: MinibatchId
    producer_job: JobId
    payload: Any
    created_at: float
    consumers: list = field(default_factory=list)
    evicted_at: float | None = None

    @property
    def usage_counter(self) -> int:
        return len(self.consumers)

    def ledger_row(self) -> dict:
        return {
            "minibatch_id": str(self.minibatch_id),
            "epoch": self.minibatch_id.epoch_index,
            "batch": self.minibatch_id.batch_index,
            "producer": self.producer_job,
            "consumers": list(self.consumers),
            "staged_at": round(self.created_at, 9),
            "evicted_at": None if self.evicted_at is None else round(self.evicted_at, 9),
        }


def round_robin_shard(job: JobId, members: list, n_batches: int) -> tuple[int, ...]:
    n = len(members)
    k = members.index(job)
    return tuple(range(k, n_batches, n))


class JobRegistry:
    """Membership of the HP-search group; changes apply only at epoch boundaries."""

    def __init__(self, n_batches: int):
        self.n_batches = n_batches
        self.active: list = []
        self._pending_add: list = []
        self._pending_remove: set = set()
        self.epoch = -1

    def register_job(self, job_id: JobId) -> tuple[int, ...]:
        """Queue ``job_id`` for the next epoch; return its prep share under that membership."""
        if job_id in self.active or job_id in self._pending_add:
            raise RegistrationError(f"job {job_id!r} is already registered")
        self._pending_add.append(job_id)
        return round_robin_shard(job_id, self.next_membership(), self.n_batches)

    def deregister_job(self, job_id: JobId) -> None:
        if job_id in self._pending_add:
            self._pending_add.remove(job_id)
        elif job_id in self.active:
            self._pending_remove.add(job_id)
        else:
            raise RegistrationError(f"job {job_id!r} is not registered")

    def next_membership(self) -> list:
        return [j for j in self.active if j not in self._pending_remove] + list(self._pending_add)

    def advance_epoch(self) -> list:
        self.active = self.next_membership()
        self._pending_add.clear()
        self._pending_remove.clear()
        self.epoch += 1
        return list(self.active)

    def shard_of(self, job_id: JobId) -> tuple[int, ...]:
        return round_robin_shard(job_id, self.active, self.n_batches)

    def producer_of(self, batch_index: int) -> JobId:
        return self.active[batch_index % len(self.active)]


class StagingArea:
    """Shared store of prepared minibatches for one server.

    ``window`` bounds how far producers may run ahead of the slowest live
    consumer, which bounds the number of staged entries. ``is_alive`` lets the
    window ignore consumers whose job has died but not yet been declared dead.
    """

    def __init__(self, queue_depth: int = 2, clock: Callable[[], float] = time.monotonic,
                 is_alive: Callable[[JobId], bool] | None = None):
        self.queue_depth = queue_depth
        self.clock = clock
        self.is_alive = is_alive or (lambda job: True)
        self._cond = threading.Condition()
        self.epoch: int | None = None
        self.n_batches = 0
        self.entries: dict[int, StagingEntry] = {}
        self.responsible: dict[int, JobId] = {}
        self.consumers: list = []
        self.live: set = set()
        self.progress: dict = {}
        self.produced: set[int] = set()
        self.ledger: list[dict] = []
        self.prep_ops = 0
        self.peak_entries = 0
        self.aborted: str | None = None
        self._retry_generation = 0

    @property
    def window(self) -> int:
        return len(self.consumers) + self.queue_depth

    # epoch lifecycle

    def begin_epoch(self, epoch: int, jobs: Iterable[JobId], n_batches: int) -> None:
        jobs = list(jobs)
        if not jobs:
            raise ValueError("an epoch needs at least one job")
        with self._cond:
            if self.entries:
                raise ContractViolation(f"{len(self.entries)} entries survived into epoch {epoch}")
            self.epoch = epoch
            self.n_batches = n_batches
            self.consumers = jobs
            self.live = set(jobs)
            self.progress = {j: 0 for j in jobs}
            self.responsible = {b: jobs[b % len(jobs)] for b in range(n_batches)}
            self.produced = set()
            self.aborted = None
            self.prep_ops = 0
            self.peak_entries = 0
            self._consumed = {j: set() for j in jobs}

    def end_epoch(self) -> list[dict]:
        """Close the epoch; return its ledger rows. Fails if anything is still staged."""
        with self._cond:
            if self.entries:
                left = sorted(self.entries)
                raise ContractViolation(f"epoch {self.epoch}: entries {left[:10]} never fully consumed")
            rows = [r for r in self.ledger if r["epoch"] == self.epoch]
            self.epoch = None
            return rows

    def shard_of(self, job: JobId) -> list[int]:
        with self._cond:
            return [b for b in range(self.n_batches) if self.responsible[b] == job]

    def producer_of(self, batch_index: int) -> JobId:
        return self.responsible[batch_index]

    # producer side

    def _slot_open(self, batch_index: int) -> bool:
        watchers = [self.progress[j] for j in self.live if self.is_alive(j)]
        if not watchers:
            return True
        return batch_index < min(watchers) + self.window

    def wait_for_slot(self, job: JobId, batch_index: int, timeout: float | None = None) -> bool:
        with self._cond:
            return self._cond.wait_for(lambda: self.aborted or self._slot_open(batch_index), timeout)

    def produce(self, job_id: JobId, minibatch_id: MinibatchId, payload: Any) -> bool:
        """Stage a prepared minibatch. Returns False for a duplicate (ignored)."""
        with self._cond:
            if minibatch_id.epoch_index != self.epoch:
                raise ContractViolation(f"{minibatch_id} staged during epoch {self.epoch}")
            b = minibatch_id.batch_index
            if self.responsible.get(b) != job_id:
                raise ContractViolation(
                    f"job {job_id!r} staged {minibatch_id}, owned by {self.responsible.get(b)!r}")
            if b in self.produced:
                log.warning("duplicate staging of %s by %r ignored", minibatch_id, job_id)
                return False
            self.produced.add(b)
            self.prep_ops += 1
            self.entries[b] = StagingEntry(minibatch_id, job_id, payload, self.clock())
            self.peak_entries = max(self.peak_entries, len(self.entries))
            self._cond.notify_all()
            return True

    # consumer side

    def consume(self, job_id: JobId, epoch: int, batch_index: int, timeout: float | None = None) -> Any:
        mb = MinibatchId(epoch, batch_index)
        t_start = time.monotonic()
        with self._cond:
            if epoch != self.epoch:
                raise ContractViolation(f"job {job_id!r} asked for {mb} during epoch {self.epoch}")
            if job_id not in self.live:
                raise ContractViolation(f"job {job_id!r} is not a consumer in epoch {epoch}")
            if batch_index in self._consumed[job_id]:
                raise ContractViolation(f"job {job_id!r} already consumed {mb}")
            gen = self._retry_generation
            deadline = None if timeout is None else t_start + timeout
            while batch_index not in self.entries:
                if self.aborted:
                    raise EpochAborted(self.aborted)
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    waited = time.monotonic() - t_start
                    raise ConsumeTimeout(mb, self.responsible[batch_index], waited, timeout)
                self._cond.wait(remaining)
                if self._retry_generation != gen and batch_index not in self.entries:
                    # a retry broadcast restarts the wait from the full timeout
                    gen = self._retry_generation
                    t_start = time.monotonic()
                    deadline = None if timeout is None else t_start + timeout
            entry = self.entries[batch_index]
            entry.consumers.append(job_id)
            self._consumed[job_id].add(batch_index)
            self.progress[job_id] = batch_index + 1
            self._maybe_evict(batch_index)
            self._cond.notify_all()
            return entry.payload

    def _maybe_evict(self, batch_index: int) -> None:
        entry = self.entries[batch_index]
        if self.live.issubset(entry.consumers):
            entry.evicted_at = self.clock()
            del self.entries[batch_index]
            self.ledger.append(entry.ledger_row())

    # failure handling

    def broadcast_retry(self) -> None:
        with self._cond:
            self._retry_generation += 1
            self._cond.notify_all()

    def mark_dead(self, job: JobId) -> None:
        """Stop expecting ``job`` to consume; release entries only it was holding."""
        with self._cond:
            self.live.discard(job)
            for b in sorted(self.entries):
                self._maybe_evict(b)
            self._cond.notify_all()

    def adopt(self, dead_job: JobId, new_loader: JobId) -> list[int]:
        """Hand the not-yet-staged part of ``dead_job``'s share to ``new_loader``."""
        with self._cond:
            remaining = [b for b, j in self.responsible.items() if j == dead_job and b not in self.produced]
            for b in remaining:
                self.responsible[b] = new_loader
            self._cond.notify_all()
            return sorted(remaining)

    def abort(self, reason: str) -> None:
        with self._cond:
            self.aborted = reason
            self._cond.notify_all()

    def consumed_by(self, job: JobId) -> set[int]:
        with self._cond:
            return set(self._consumed.get(job, ()))

    def export_ledger(self, path) -> None:
        with open(path, "w") as fh:
            for row in self.ledger:
                fh.write(json.dumps(row, sort_keys=True) + "\n")


# threaded runner ------------------------------------------------------------

@dataclass
class FailureEvent:
    epoch: int
    reporter: JobId
    suspected: JobId
    minibatch_id: str
    waited: float
    timeout: float
    mean_iteration: float
    action: str
    replacement: JobId | None = None


class _Job:
    def __init__(self, job_id: JobId, iteration_estimate: float):
        self.id = job_id
        self.dead = False
        self.iterations: list[float] = []
        self.iteration_estimate = iteration_estimate

    @property
    def alive(self) -> bool:
        return not self.dead

    def mean_iteration(self) -> float:
        if not self.iterations:
            return self.iteration_estimate
        return sum(self.iterations) / len(self.iterations)


@dataclass
class HPEpochResult:
    epoch: int
    jobs: list
    prep_ops: int
    epoch_seconds: float
    consumed: dict
    ledger: list[dict]
    peak_entries: int
    surviving_entries: int
    failures: list[FailureEvent] = field(default_factory=list)
    aborted: str | None = None

    def exactly_once(self, n_batches: int, jobs: Iterable[JobId] | None = None) -> bool:
        want = list(range(n_batches))
        return all(sorted(self.consumed[j]) == want and len(self.consumed[j]) == n_batches
                   for j in (self.jobs if jobs is None else jobs))


class FailureDetector:
    """Receives timeout reports from consumers and resolves them off their threads."""

    def __init__(self, runner: "HPSearchRunner"):
        self.runner = runner
        self.events: list[FailureEvent] = []
        self._q: queue.Queue = queue.Queue()
        self._lock = threading.Lock()
        self._respawned: dict = {}
        self._thread = threading.Thread(target=self._loop, daemon=True)
        self._thread.start()

    def report(self, reporter: _Job, exc: ConsumeTimeout) -> None:
        self._q.put((reporter, exc))

    def _loop(self):
        while True:
            item = self._q.get()
            if item is None:
                return
            reporter, exc = item
            try:
                self.handle_failure(reporter, exc)
            except Exception:  # keep the detector alive for later reports
                log.exception("failure handling crashed")

    def handle_failure(self, reporter: _Job, exc: ConsumeTimeout) -> FailureEvent:
        run = self.runner
        staging = run.staging
        suspected = exc.suspected_job
        alive = run.is_alive(suspected)
        with self._lock:
            ev = FailureEvent(run.current_epoch, reporter.id, suspected, str(exc.minibatch_id),
                              exc.waited, exc.timeout, reporter.mean_iteration(), "false_alarm")
            if alive:
                staging.broadcast_retry()
            elif suspected in self._respawned:
                # several consumers can report the same death
                ev.action, ev.replacement = "already_handled", self._respawned[suspected]
                staging.broadcast_retry()
            elif suspected in self._respawned.values():
                ev.action = "aborted"
                staging.abort(f"replacement loader {suspected!r} failed; giving up on epoch "
                              f"{run.current_epoch}")
            else:
                base = suspected
                replacement = f"{base}~respawn"
                self._respawned[base] = replacement
                staging.mark_dead(base)
                run.deregister_at_boundary(base)
                remaining = staging.adopt(base, replacement)
                run.spawn_loader(replacement, remaining)
                ev.action, ev.replacement = "respawned", replacement
            self.events.append(ev)
            log.info("failure report: %s", ev)
            return ev

    def close(self):
        self._q.put(None)
        self._thread.join(timeout=2.0)


class HPSearchRunner:
    """Concurrent HP-search jobs as threads, in real time.

    Each job runs a loader thread (prep of its share, ``batch_prep_seconds``
    per minibatch) and a trainer thread (consume in order, then
    ``iteration_seconds`` of compute). With ``coordinated=False`` every job
    preps every minibatch into a private staging area.
    """

    def __init__(self, n_jobs: int, n_batches: int, iteration_seconds: float = 0.01,
                 batch_prep_seconds: float = 0.01, coordinated: bool = True, queue_depth: int = 2,
                 timeout_factor: float = 10.0, initial_iteration_seconds: float | None = None):
        self.n_batches = n_batches
        self.iteration_seconds = iteration_seconds
        self.batch_prep_seconds = batch_prep_seconds
        self.coordinated = coordinated
        self.queue_depth = queue_depth
        self.timeout_factor = timeout_factor
        est = initial_iteration_seconds or iteration_seconds
        self.registry = JobRegistry(n_batches)
        self.jobs: dict = {}
        for j in range(n_jobs):
            self.register(j, est)
        self.current_epoch = -1
        self.staging = StagingArea(queue_depth, is_alive=self.is_alive)
        self.private: dict = {}
        self.kills: dict = {}
        self.boundary_kills: dict = {}
        self.replacements_fail = False
        self._dead_loaders: set = set()
        self._threads: list[threading.Thread] = []
        self._threads_lock = threading.Lock()
        self.detector: FailureDetector | None = None

    def register(self, job_id: JobId, iteration_estimate: float | None = None):
        shard = self.registry.register_job(job_id)
        self.jobs[job_id] = _Job(job_id, iteration_estimate or self.iteration_seconds)
        return shard

    def is_alive(self, job_id: JobId) -> bool:
        job = self.jobs.get(job_id)
        if job is not None:
            return job.alive
        return job_id not in self._dead_loaders

    def deregister_at_boundary(self, job_id: JobId) -> None:
        if job_id in self.registry.active:
            self.registry.deregister_job(job_id)

    def kill(self, job_id: JobId, epoch: int, after_consumed: int) -> None:
        """Make ``job_id`` die in ``epoch`` right after consuming that many minibatches."""
        self.kills[job_id] = (epoch, after_consumed)

    def kill_at_boundary(self, job_id: JobId, epoch: int) -> None:
        self.boundary_kills[job_id] = epoch

    def fail_replacement_loaders(self) -> None:
        """Fault injection: respawned loaders die before staging anything."""
        self.replacements_fail = True

    def timeout_for(self, job: _Job) -> float:
        return self.timeout_factor * job.mean_iteration()

    # threads

    def _start(self, target, *args) -> threading.Thread:
        th = threading.Thread(target=target, args=args, daemon=True)
        with self._threads_lock:
            self._threads.append(th)
        th.start()
        return th

    def spawn_loader(self, loader_id: JobId, batches: list[int]) -> None:
        self._start(self._loader, loader_id, None, batches, self.staging)

    def _loader(self, loader_id, job: _Job | None, batches, staging: StagingArea):
        epoch = self.current_epoch
        doomed = job is None and self.replacements_fail
        for b in batches:
            if job is not None and job.dead:
                return
            if doomed:
                self._dead_loaders.add(loader_id)
                return
            while not staging.wait_for_slot(loader_id, b, timeout=0.05):
                if job is not None and job.dead:
                    return
            if staging.aborted:
                return
            time.sleep(self.batch_prep_seconds)
            if job is not None and job.dead:
                return
            staging.produce(loader_id, MinibatchId(epoch, b), payload=(epoch, b))

    def _trainer(self, job: _Job, staging: StagingArea):
        epoch = self.current_epoch
        kill = self.kills.get(job.id)
        last = None
        for b in range(self.n_batches):
            if kill and kill[0] == epoch and b == kill[1]:
                job.dead = True
                log.info("job %r killed in epoch %d after %d minibatches", job.id, epoch, b)
                return
            while True:
                try:
                    staging.consume(job.id, epoch, b, timeout=self.timeout_for(job))
                    break
                except ConsumeTimeout as exc:
                    if self.detector is None:
                        raise
                    self.detector.report(job, exc)
                except EpochAborted:
                    return
            time.sleep(self.iteration_seconds)
            now = time.monotonic()
            if last is not None:
                job.iterations.append(now - last)
            last = now

    def run_epoch(self) -> HPEpochResult:
        epoch = self.current_epoch + 1
        for j, e in list(self.boundary_kills.items()):
            if e == epoch and j in self.registry.active:
                self.jobs[j].dead = True
                self.registry.deregister_job(j)
        members = self.registry.advance_epoch()
        members = [j for j in members if self.jobs[j].alive]
        self.current_epoch = epoch
        self._dead_loaders = set()
        self._threads = []
        t0 = time.monotonic()
        if self.coordinated:
            self.staging.begin_epoch(epoch, members, self.n_batches)
            self.detector = FailureDetector(self)
            for j in members:
                self._start(self._loader, j, self.jobs[j], self.staging.shard_of(j), self.staging)
                self._start(self._trainer, self.jobs[j], self.staging)
        else:
            self.detector = None
            for j in members:
                area = self.private.setdefault(j, StagingArea(self.queue_depth))
                area.begin_epoch(epoch, [j], self.n_batches)
                self._start(self._loader, j, self.jobs[j], list(range(self.n_batches)), area)
                self._start(self._trainer, self.jobs[j], area)
        # replacement loaders may be appended while we join
        i = 0
        while True:
            with self._threads_lock:
                if i >= len(self._threads):
                    break
                th = self._threads[i]
            th.join()
            i += 1
        elapsed = time.monotonic() - t0
        failures = []
        if self.coordinated:
            self.detector.close()
            failures = self.detector.events
            areas = {j: self.staging for j in members}
        else:
            areas = {j: self.private[j] for j in members}
        aborted = next((a.aborted for a in set(areas.values()) if a.aborted), None)
        survivors = [j for j in members if self.jobs[j].alive]
        uniq = list({id(a): a for a in areas.values()}.values())
        surviving = 0
        ledger: list[dict] = []
        prep_ops = sum(a.prep_ops for a in uniq)
        for a in uniq:
            surviving += len(a.entries)
            if not aborted:
                ledger.extend(a.end_epoch())
            else:
                a.entries.clear()
                a.epoch = None
        for j in members:
            if not self.jobs[j].alive:
                self.deregister_at_boundary(j)
        return HPEpochResult(
            epoch=epoch, jobs=survivors, prep_ops=prep_ops, epoch_seconds=elapsed,
            consumed={j: sorted(areas[j].consumed_by(j)) for j in members},
            ledger=sorted(ledger, key=lambda r: r["batch"]),
            peak_entries=max(a.peak_entries for a in uniq),
            surviving_entries=surviving, failures=failures, aborted=aborted)

    def run(self, n_epochs: int) -> list[HPEpochResult]:
        return [self.run_epoch() for _ in range(n_epochs)]


# virtual-clock HP search -------------------------------------------------------

class _VirtualClock:
    def __init__(self):
        self.now = 0.0

    def __call__(self):
        return self.now


@dataclass
class HPSimEpoch:
    epoch: int
    epoch_seconds: float
    prep_ops: int
    reports: list[StallReport]
    ledger: list[dict]
    consumed: dict


def simulate_hp_search(dataset: Dataset, cfg: PipelineConfig, n_jobs: int, n_epochs: int, seed: int,
                       coordinated: bool = True, cache: Cache | None = None) -> list[HPSimEpoch]:
    """Deterministic HP search on the virtual clock.

    Coordinated: one pipeline with every job's prep workers pooled (aggregate
    P), each minibatch staged once and consumed by all jobs at its compute
    start. Uncoordinated: each job runs its own pipeline on a 1/n_jobs share
    of prep, storage and cache bandwidth and preps everything itself.
    """
    if cache is None and cfg.cache is not None:
        cache = make_cache(cfg.cache)
    r = cfg.rates
    jobs = list(range(n_jobs))
    out = []
    if coordinated:
        pcfg = replace(cfg, n_prep_workers=cfg.n_prep_workers * n_jobs)
        devices = make_devices(r.S, r.C, r.network_rate, n_items=dataset.n_items)
        clock = _VirtualClock()
        area = StagingArea(cfg.queue_depth, clock=clock)
        for e in range(n_epochs):
            plan = plan_epoch(dataset, e, cfg.batch_size, 1, seed)
            timeline: list[BatchTiming] = []
            rep = run_epoch(plan, pcfg, cache, devices, dataset, timeline=timeline)
            area.begin_epoch(e, jobs, plan.n_batches)
            events = []
            for bt in timeline:
                events.append((bt.prep_end, 0, bt.batch_index, None))
                for j in jobs:
                    events.append((bt.comp_start, 1, bt.batch_index, j))
            events.sort(key=lambda ev: (ev[0], ev[1], ev[2], -1 if ev[3] is None else ev[3]))
            for t, kind, b, j in events:
                clock.now = t
                if kind == 0:
                    area.produce(area.producer_of(b), MinibatchId(e, b), payload=None)
                else:
                    area.consume(j, e, b, timeout=0)
            consumed = {j: sorted(area.consumed_by(j)) for j in jobs}
            ledger = area.end_epoch()
            rep.prep_ops = len(ledger)
            out.append(HPSimEpoch(e, rep.epoch_seconds, len(ledger), [rep], ledger, consumed))
        return out

    share = replace(r, prep_rate_P=r.P / n_jobs, storage_rate_S=r.S / n_jobs,
                    cache_rate_C=r.C / n_jobs)
    pcfg = replace(cfg, rates=share)
    devices = [make_devices(share.S, share.C, share.network_rate, n_items=dataset.n_items)
               for _ in jobs]
    for e in range(n_epochs):
        plan = plan_epoch(dataset, e, cfg.batch_size, 1, seed)
        reports = [run_epoch(replace(plan), pcfg, cache, devices[j], dataset) for j in jobs]
        for j, rep in enumerate(reports):
            rep.server_id = j
        consumed = {j: list(range(plan.n_batches)) for j in jobs}
        prep_ops = sum(rep.prep_ops for rep in reports)
        out.append(HPSimEpoch(e, max(rep.epoch_seconds for rep in reports), prep_ops, reports, [],
                              consumed))
    return out
