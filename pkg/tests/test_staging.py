import json
import threading
import time

import pytest
from hypothesis import given, strategies as st

from coordload.cache import CacheConfig, Policy
from coordload.core import MinibatchId, RateSpec, SizeModel, make_dataset
from coordload.errors import ContractViolation, RegistrationError
from coordload.pipeline import PipelineConfig
from coordload.staging import (ConsumeTimeout, FailureDetector, HPSearchRunner, JobRegistry, StagingArea,
                               simulate_hp_search)


def _area(jobs, n_batches=8, epoch=0, q=2):
    a = StagingArea(q)
    a.begin_epoch(epoch, jobs, n_batches)
    return a


# registry

def test_even_split():
    reg = JobRegistry(80)
    for j in range(8):
        reg.register_job(j)
    reg.advance_epoch()
    assert [len(reg.shard_of(j)) for j in range(8)] == [10] * 8


def test_balanced_split_of_three():
    reg = JobRegistry(80)
    for j in range(3):
        reg.register_job(j)
    reg.advance_epoch()
    sizes = sorted(len(reg.shard_of(j)) for j in range(3))
    assert sizes == [26, 27, 27]
    assert sorted(b for j in range(3) for b in reg.shard_of(j)) == list(range(80))


def test_registration_applies_at_next_boundary():
    reg = JobRegistry(10)
    reg.register_job("a")
    reg.advance_epoch()
    shard = reg.register_job("b")
    assert reg.active == ["a"]  # current epoch unchanged
    assert shard == (1, 3, 5, 7, 9)
    reg.deregister_job("a")
    assert reg.active == ["a"]
    assert reg.advance_epoch() == ["b"]


def test_duplicate_and_unknown_registration():
    reg = JobRegistry(4)
    reg.register_job(1)
    with pytest.raises(RegistrationError):
        reg.register_job(1)
    reg.advance_epoch()
    with pytest.raises(RegistrationError):
        reg.register_job(1)
    with pytest.raises(RegistrationError):
        reg.deregister_job(2)


# staging area

def test_entry_evicted_after_all_jobs_consume():
    a = _area(list(range(8)))
    assert a.produce(a.producer_of(0), MinibatchId(0, 0), "x")
    for j in range(8):
        assert 0 in a.entries
        assert a.consume(j, 0, 0, timeout=0) == "x"
    assert 0 not in a.entries
    row = a.ledger[-1]
    assert row["consumers"] == list(range(8)) and row["producer"] == 0


def test_non_owner_cannot_produce():
    a = _area([0, 1])
    with pytest.raises(ContractViolation):
        a.produce(1, MinibatchId(0, 0), "x")


def test_duplicate_produce_is_ignored(caplog):
    a = _area([0, 1])
    assert a.produce(0, MinibatchId(0, 0), "x")
    with caplog.at_level("WARNING"):
        assert not a.produce(0, MinibatchId(0, 0), "y")
    assert "duplicate" in caplog.text
    assert a.prep_ops == 1 and a.entries[0].payload == "x"


def test_single_job_is_a_private_queue():
    a = _area(["solo"])
    a.produce("solo", MinibatchId(0, 0), 1)
    a.consume("solo", 0, 0)
    assert not a.entries


def test_consume_blocks_until_produced():
    a = _area([0, 1])
    got = []
    t = threading.Thread(target=lambda: got.append(a.consume(1, 0, 0, timeout=2.0)))
    t.start()
    time.sleep(0.05)
    assert not got
    a.produce(0, MinibatchId(0, 0), "late")
    t.join(2)
    assert got == ["late"]


def test_timeout_names_producer():
    a = _area([0, 1, 2])
    with pytest.raises(ConsumeTimeout) as ei:
        a.consume(0, 0, 5, timeout=0.02)
    assert ei.value.suspected_job == 2
    assert ei.value.minibatch_id == MinibatchId(0, 5)
    assert ei.value.waited >= 0.02


def test_no_double_consume_and_no_cross_epoch_reuse():
    a = _area([0, 1], n_batches=2)
    a.produce(0, MinibatchId(0, 0), "x")
    a.consume(0, 0, 0)
    with pytest.raises(ContractViolation):
        a.consume(0, 0, 0)
    with pytest.raises(ContractViolation):
        a.consume(1, 1, 0)  # asking for epoch 1 while epoch 0 is open
    with pytest.raises(ContractViolation):
        a.end_epoch()  # entry 0 still held for job 1
    with pytest.raises(ContractViolation):
        a.begin_epoch(1, [0, 1], 2)
    with pytest.raises(ContractViolation):
        a.produce(1, MinibatchId(1, 1), "y")


def test_ledger_export(tmp_path):
    a = _area([0, 1], n_batches=2)
    for b in range(2):
        a.produce(a.producer_of(b), MinibatchId(0, b), b)
        a.consume(0, 0, b)
        a.consume(1, 0, b)
    rows = a.end_epoch()
    path = tmp_path / "ledger.jsonl"
    a.export_ledger(path)
    lines = [json.loads(l) for l in path.read_text().splitlines()]
    assert lines == rows
    assert {tuple(sorted(r)) for r in lines} == {("batch", "consumers", "epoch", "evicted_at", "minibatch_id",
                                                  "producer", "staged_at")}


def test_staging_stays_bounded_under_rate_skew():
    jobs = list(range(4))
    n = 60
    a = _area(jobs, n_batches=n, q=2)

    def producer(j):
        for b in a.shard_of(j):
            a.wait_for_slot(j, b)
            a.produce(j, MinibatchId(0, b), b)

    def consumer(j, pause):
        for b in range(n):
            a.consume(j, 0, b, timeout=5)
            time.sleep(pause)

    ts = [threading.Thread(target=producer, args=(j,)) for j in jobs]
    ts += [threading.Thread(target=consumer, args=(j, 0.001 if j % 2 else 0.002)) for j in jobs]
    for t in ts:
        t.start()
    for t in ts:
        t.join(20)
    assert a.peak_entries <= len(jobs) + 2
    assert not a.entries
    assert all(a.consumed_by(j) == set(range(n)) for j in jobs)


@given(n_jobs=st.integers(1, 9), n_batches=st.integers(1, 60), seed=st.integers(0, 1000))
def test_any_consume_order_gives_exactly_once(n_jobs, n_batches, seed):
    import random

    rnd = random.Random(seed)
    a = _area(list(range(n_jobs)), n_batches=n_batches)
    for b in range(n_batches):
        a.produce(a.producer_of(b), MinibatchId(0, b), b)
    todo = [(j, b) for j in range(n_jobs) for b in range(n_batches)]
    rnd.shuffle(todo)
    for j, b in todo:
        a.consume(j, 0, b)
        assert 0 <= len(a.entries) <= n_batches
    assert a.prep_ops == n_batches
    rows = a.end_epoch()
    assert len(rows) == n_batches
    assert all(sorted(r["consumers"]) == list(range(n_jobs)) for r in rows)


# threaded runner

def test_coordinated_vs_uncoordinated_prep_ops():
    kw = dict(n_jobs=8, n_batches=80, iteration_seconds=0.001, batch_prep_seconds=0.001)
    coord = HPSearchRunner(coordinated=True, **kw).run(2)
    unco = HPSearchRunner(coordinated=False, **kw).run(1)
    assert [r.prep_ops for r in coord] == [80, 80]
    assert unco[0].prep_ops == 640
    for r in coord + unco:
        assert r.exactly_once(80) and r.surviving_entries == 0


def test_detector_false_alarm_retries_without_respawn():
    runner = HPSearchRunner(n_jobs=3, n_batches=6, iteration_seconds=0.001)
    runner.run_epoch()
    runner.staging.begin_epoch(9, [0, 1, 2], 6)
    det = FailureDetector(runner)
    try:
        gen = runner.staging._retry_generation
        ev = det.handle_failure(runner.jobs[0], ConsumeTimeout(MinibatchId(9, 1), 1, 0.1, 0.1))
        assert ev.action == "false_alarm" and ev.replacement is None
        assert runner.staging._retry_generation == gen + 1
    finally:
        det.close()


def test_kill_mid_epoch_respawns_and_survivors_finish():
    runner = HPSearchRunner(n_jobs=8, n_batches=80, iteration_seconds=0.002, batch_prep_seconds=0.002)
    runner.kill(3, epoch=1, after_consumed=30)
    results = runner.run(3)
    ep = results[1]
    first = ep.failures[0]
    assert first.suspected == 3 and first.action == "respawned"
    assert first.replacement == "3~respawn"
    survivors = [0, 1, 2, 4, 5, 6, 7]
    assert ep.jobs == survivors and ep.exactly_once(80, survivors)
    assert ep.surviving_entries == 0
    assert results[2].jobs == survivors and results[2].prep_ops == 80
    assert not results[2].failures


def test_failure_at_boundary_needs_no_respawn():
    runner = HPSearchRunner(n_jobs=4, n_batches=20, iteration_seconds=0.001, batch_prep_seconds=0.001)
    runner.kill_at_boundary(2, epoch=1)
    results = runner.run(2)
    assert results[1].jobs == [0, 1, 3]
    assert results[1].failures == []
    assert results[1].exactly_once(20) and results[1].prep_ops == 20


def test_replacement_failure_aborts_epoch():
    runner = HPSearchRunner(n_jobs=4, n_batches=40, iteration_seconds=0.002, batch_prep_seconds=0.002)
    runner.kill(1, epoch=0, after_consumed=5)
    runner.fail_replacement_loaders()
    res = runner.run_epoch()
    assert res.aborted and "replacement" in res.aborted
    assert any(f.action == "aborted" for f in res.failures)


# virtual clock

def _hp_cfg(P=400.0, batch=50):
    return PipelineConfig(batch, RateSpec(2000, P, 1e5, 1e4), CacheConfig(10**9, Policy.MINIO))


def test_virtual_hp_dedup_and_speedup():
    ds = make_dataset(4000, SizeModel.fixed(1), 0)
    coord = simulate_hp_search(ds, _hp_cfg(), 8, 2, seed=1, coordinated=True)
    unco = simulate_hp_search(ds, _hp_cfg(), 8, 2, seed=1, coordinated=False)
    assert [e.prep_ops for e in coord] == [80, 80]
    assert [e.prep_ops for e in unco] == [640, 640]
    for e in coord:
        assert all(c == list(range(80)) for c in e.consumed.values())
        assert all(sorted(r["consumers"]) == list(range(8)) for r in e.ledger)
        assert all(r["epoch"] == e.epoch for r in e.ledger)
    assert coord[1].epoch_seconds <= 0.25 * unco[1].epoch_seconds


def test_virtual_hp_is_deterministic():
    ds = make_dataset(500, SizeModel.fixed(1), 0)
    a = simulate_hp_search(ds, _hp_cfg(batch=25), 3, 2, seed=4)
    b = simulate_hp_search(ds, _hp_cfg(batch=25), 3, 2, seed=4)
    assert [e.ledger for e in a] == [e.ledger for e in b]
