import threading

import numpy as np
import pytest
from hypothesis import given, strategies as st

from coordload.cache import (CacheConfig, CacheStats, LRUCache, MinIOCache, Policy, make_cache, replay,
                             steady_state_misses_per_epoch)
from coordload.core import keyed_rng
from coordload.errors import ConfigError

D, B, C, A = "D", "B", "C", "A"


def _warm(cache, ids):
    for i in ids:
        cache.lookup(i)
        cache.admit(i, 1)


def test_minio_hit_leaves_contents_alone():
    c = MinIOCache(2)
    _warm(c, [D, B])
    assert c.lookup(B)
    assert c.contents() == {D, B}


def test_empty_cache_misses():
    assert not MinIOCache(4).lookup(0)
    assert not LRUCache(4).lookup(0)


def test_lru_hit_refreshes_recency():
    c = LRUCache(2)
    _warm(c, [A, B])
    assert c.recency() == [A, B]
    assert c.lookup(A)
    assert c.recency() == [B, A]


def test_minio_full_rejects():
    c = MinIOCache(2)
    _warm(c, [D, B])
    res = c.admit(C, 1)
    assert res.status == "rejected" and not res.admitted
    assert c.contents() == {D, B}
    assert c.stats.evictions == 0


def test_lru_full_evicts_least_recent():
    c = LRUCache(2)
    _warm(c, [D, B])
    res = c.admit(C, 1)
    assert res.status == "evicted" and tuple(res.victims) == (D,)
    assert c.contents() == {B, C}
    c2 = LRUCache(2)
    _warm(c2, [D, B])
    c2.lookup(D)
    assert tuple(c2.admit(C, 1).victims) == (B,)


def test_minio_empty_admits():
    assert MinIOCache(1).admit(A, 1).status == "admitted"


def test_oversized_item(caplog):
    assert MinIOCache(5).admit(0, 6).status == "rejected"
    lru = LRUCache(5)
    _warm(lru, [1, 2])
    with caplog.at_level("WARNING"):
        res = lru.admit(0, 6)
    assert res.status == "rejected" and lru.contents() == {1, 2}
    assert "larger than" in caplog.text or caplog.records


def test_minio_variable_sizes_no_compaction():
    c = MinIOCache(10)
    assert c.admit(0, 6).admitted
    assert not c.admit(1, 5).admitted  # would overflow even though a smaller item fits later
    assert c.admit(2, 4).admitted
    assert c.used_bytes == 10


@pytest.mark.parametrize("n,c,want", [(4, 2, 2), (7, 7, 0), (1000, 350, 650), (5, 9, 0)])
def test_steady_state_misses(n, c, want):
    assert steady_state_misses_per_epoch(n, c) == want


def test_lru_worse_at_35_percent():
    rng = keyed_rng(1, 99)
    traces = [rng.permutation(1000) for _ in range(4)]
    m = replay(MinIOCache(350), traces)
    l = replay(LRUCache(350), traces)
    assert m[1:] == [650, 650, 650]
    assert all(lv > mv for lv, mv in zip(l[1:], m[1:]))


def test_stats_accounting_and_export():
    c = MinIOCache(2)
    replay(c, [[0, 1, 2], [2, 1, 0]], sizes=[5, 1, 1])
    st0, st1 = c.stats.epoch(0), c.stats.epoch(1)
    assert (st0.misses, st0.hits) == (3, 0)
    assert st0.admissions == 2 and st0.rejections == 1  # item 0 (5 B) exceeds capacity 2
    assert st1.hits + st1.misses == 3
    assert c.stats.misses == st0.misses + st1.misses
    assert c.stats.bytes_fetched_from_storage == 5 * 2 + 1 + 1
    csv_text = c.stats.to_csv()
    assert csv_text.splitlines()[0].startswith("epoch,hits,misses,evictions")
    assert len(csv_text.splitlines()) == 3
    assert '"total"' in c.stats.to_json()


def test_get_does_not_touch_stats():
    c = LRUCache(2)
    c.admit(1, 1, value=b"x")
    before = c.stats.total.lookups
    assert c.get(1) == b"x"
    assert c.stats.total.lookups == before


def test_make_cache_and_config_validation():
    assert isinstance(make_cache(CacheConfig(3, Policy.LRU)), LRUCache)
    assert isinstance(make_cache(CacheConfig(3, "minio")), MinIOCache)
    with pytest.raises(ConfigError):
        CacheConfig(-1, Policy.MINIO)


@pytest.mark.parametrize("cls", [MinIOCache, LRUCache])
def test_concurrent_admits_respect_capacity(cls):
    cache = cls(50)
    sizes = keyed_rng(3, 5).integers(1, 8, size=400)

    def worker(offset):
        for i in range(offset, 400, 4):
            if not cache.lookup(i):
                cache.admit(i, int(sizes[i]))
            assert cache.used_bytes <= 50

    ts = [threading.Thread(target=worker, args=(k,)) for k in range(4)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    assert cache.used_bytes <= 50
    assert cache.used_bytes == sum(int(sizes[i]) for i in cache.contents())
    assert cache.stats.hits + cache.stats.misses == 400


# properties

traces_args = dict(n=st.integers(1, 120), frac=st.floats(0, 1), seed=st.integers(0, 10_000),
                   epochs=st.integers(2, 5))


def _traces(n, seed, epochs):
    rng = keyed_rng(seed, 42)
    return [rng.permutation(n) for _ in range(epochs)]


@given(**traces_args)
def test_minio_exactness_and_immutability(n, frac, seed, epochs):
    cap = int(frac * n)
    cache = MinIOCache(cap)
    traces = _traces(n, seed, epochs)
    snapshots = []
    for e, tr in enumerate(traces):
        replay(cache, [tr], first_epoch=e)
        snapshots.append(cache.contents())
    per_epoch = [cache.stats.epoch(e).misses for e in range(epochs)]
    assert per_epoch[0] == n
    assert all(m == n - cap for m in per_epoch[1:])
    assert all(s == snapshots[0] for s in snapshots[1:])
    assert cache.stats.evictions == 0


@given(**traces_args)
def test_lru_never_beats_minio(n, frac, seed, epochs):
    cap = int(frac * n)
    traces = _traces(n, seed, epochs)
    m = replay(MinIOCache(cap), traces)
    l = replay(LRUCache(cap), traces)
    assert all(lv >= mv for lv, mv in zip(l[1:], m[1:]))


@given(n=st.integers(1, 80), seed=st.integers(0, 1000), cap=st.integers(0, 400),
       policy=st.sampled_from([MinIOCache, LRUCache]))
def test_storage_bytes_conservation(n, seed, cap, policy):
    rng = keyed_rng(seed, 7)
    sizes = rng.integers(1, 20, size=n)
    cache = policy(cap)
    traces = [rng.permutation(n) for _ in range(3)]
    missed_bytes = 0
    for e, tr in enumerate(traces):
        for i in tr:
            if not cache.lookup(int(i), e):
                missed_bytes += int(sizes[i])
                cache.record_storage_fetch(int(sizes[i]), e)
                cache.admit(int(i), int(sizes[i]), e)
    assert cache.stats.bytes_fetched_from_storage == missed_bytes
    t = cache.stats.total
    assert t.hits + t.misses == 3 * n
    assert cache.used_bytes <= cap
