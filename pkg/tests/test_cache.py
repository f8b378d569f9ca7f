from __future__ import annotations

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import LRUOracle
from rsbsim.cache import CacheGeometry, CacheState


def test_cold_miss_then_hit_uses_default_latencies():
    c = CacheState()
    first, second = c.access(0x1234), c.access(0x1234)
    assert (first.hit, first.latency) == (False, 300)
    assert (second.hit, second.latency) == (True, 4)


def test_flush_forces_a_miss():
    c = CacheState()
    c.access(0x40)
    c.flush_line(0x40)
    assert not c.access(0x40).hit


def test_two_way_set_evicts_least_recently_used():
    c = CacheState(CacheGeometry(sets=4, ways=2, line_size=64))
    a, b, d = 0, 4 * 64, 8 * 64  # all in set 0
    for addr in (a, b, d):
        c.access(addr)
    assert not c.is_cached(a)
    assert c.is_cached(b) and c.is_cached(d)
    assert not c.access(a).hit


def test_flush_of_uncached_line_is_a_noop():
    c = CacheState()
    c.access(0x1000)
    before = [c.set_contents(i) for i in range(64)]
    c.flush_line(0x5000)
    assert [c.set_contents(i) for i in range(64)] == before


def test_flush_leaves_other_lines_of_the_set():
    c = CacheState(CacheGeometry(sets=4, ways=2, line_size=64))
    c.access(0)
    c.access(256)
    c.flush_line(0)
    assert not c.is_cached(0) and c.is_cached(256)


def test_is_cached_is_line_granular_and_pure():
    c = CacheState()
    assert not c.is_cached(0x2000)
    c.access(0x2000)
    assert c.is_cached(0x2000) and c.is_cached(0x203F)
    assert not c.is_cached(0x2040)
    snap = c.set_contents(0)
    c.is_cached(0x7000)
    assert c.set_contents(0) == snap


def test_capacity_is_product_of_geometry():
    assert CacheGeometry(32, 4, 128).capacity == 32 * 4 * 128


@pytest.mark.parametrize("geo", [dict(sets=3), dict(ways=6), dict(line_size=48), dict(sets=0)])
def test_invalid_geometry_is_rejected(geo):
    with pytest.raises(ValueError):
        CacheGeometry(**geo)


def test_jitter_stays_within_ten_percent_and_is_seeded():
    a = CacheState(jitter=True, seed=7)
    b = CacheState(jitter=True, seed=7)
    lats = []
    for i in range(2000):
        addr = (i % 300) * 64
        ra, rb = a.access(addr), b.access(addr)
        assert ra == rb
        lats.append(ra)
    for r in lats:
        base = 4 if r.hit else 300
        assert 0.9 * base - 1 <= r.latency <= 1.1 * base + 1
    assert len({r.latency for r in lats if not r.hit}) > 10


def _lru_replay(seed: int, steps: int, geo: CacheGeometry) -> None:
    rng = random.Random(seed)
    cache = CacheState(geo)
    oracle = LRUOracle(geo.sets, geo.ways, geo.line_size)
    span = geo.sets * geo.line_size * (geo.ways + 3)
    for step in range(steps):
        addr = rng.randrange(span)
        if rng.random() < 0.15:
            cache.flush_line(addr)
            oracle.flush(addr)
        else:
            got = cache.access(addr)
            want = oracle.access(addr)
            assert got.hit == want, f"seed {seed} step {step} addr {addr:#x}"
            assert got.latency == (4 if want else 300)
        assert cache.is_cached(addr) == oracle.cached(addr)


@pytest.mark.parametrize("geo", [CacheGeometry(), CacheGeometry(4, 2, 64), CacheGeometry(16, 4, 32),
                                 CacheGeometry(1, 8, 64)])
def test_matches_brute_force_lru_over_ten_thousand_steps(geo):
    _lru_replay(1234, 10_000, geo)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32), st.sampled_from([1, 2, 4, 8]), st.sampled_from([1, 2, 8, 32]))
def test_lru_oracle_agreement_property(seed, ways, sets):
    _lru_replay(seed, 600, CacheGeometry(sets, ways, 64))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.integers(0, 2**16)), max_size=300))
def test_sets_never_hold_duplicates_or_exceed_ways(ops):
    c = CacheState(CacheGeometry(8, 2, 64))
    for is_flush, addr in ops:
        (c.flush_line if is_flush else c.access)(addr)
    for i in range(8):
        content = c.set_contents(i)
        assert len(content) <= 2 and len(set(content)) == len(content)
