"""Cache-timing receivers that turn a transient access pattern into a byte.

Transmitters touch probe slot ``value + 1`` so that slot 0 is never used;
both receivers decode by subtracting one.
"""
from __future__ import annotations

from typing import Optional, Sequence

from ..machine import Machine

PROBE_SLOTS = 257
PROBE_STRIDE = 256


class AmbiguousRead(Exception):
    """Zero or several slots crossed the threshold."""

    def __init__(self, hits: Sequence[int]):
        super().__init__(f"ambiguous read: {len(hits)} candidate slots {list(hits)[:8]}")
        self.hits = tuple(hits)


def default_threshold(machine: Machine) -> int:
    return (machine.cache.hit_latency + machine.cache.miss_latency) // 2


def _probe_phys(machine: Machine, probe_base: int, slot: int) -> int:
    return machine.phys(probe_base + slot * PROBE_STRIDE)


def flush_probe(machine: Machine, probe_base: int) -> None:
    for slot in range(PROBE_SLOTS):
        machine.cache.flush_line(_probe_phys(machine, probe_base, slot))


def receive_flush_reload(machine: Machine, probe_base: int,
                         threshold_cycles: Optional[int] = None,
                         latencies: Optional[list] = None) -> int:
    """Time slots 1..256, flushing each one after it is measured.

    Measured latencies are appended to ``latencies`` when given.
    """
    if threshold_cycles is None:
        threshold_cycles = default_threshold(machine)
    hits = []
    for slot in range(1, PROBE_SLOTS):
        phys = _probe_phys(machine, probe_base, slot)
        lat = machine.cache.access(phys).latency
        machine.advance(lat)
        machine.cache.flush_line(phys)
        if latencies is not None:
            latencies.append(lat)
        if lat < threshold_cycles:
            hits.append(slot)
    if len(hits) != 1:
        raise AmbiguousRead(hits)
    return hits[0] - 1


def monitored_sets(machine: Machine, probe_base: int) -> list[int]:
    """Cache set of each probe slot 1..256; they must all differ."""
    geo = machine.cache.geometry
    sets = [geo.set_index(_probe_phys(machine, probe_base, s)) for s in range(1, PROBE_SLOTS)]
    if len(set(sets)) != len(sets):
        raise ValueError(f"Prime+Probe needs 256 distinct probe sets; geometry has {geo.sets} sets")
    return sets


# attacker lines used for priming live in their own physical region
_PRIME_REGION = 0x7F << 48


def eviction_sets(machine: Machine, probe_base: int) -> list[list[int]]:
    geo = machine.cache.geometry
    span = geo.sets * geo.line_size
    return [[_PRIME_REGION + s * geo.line_size + k * span for k in range(geo.ways)]
            for s in monitored_sets(machine, probe_base)]


def prime(machine: Machine, sets: Sequence[Sequence[int]]) -> None:
    for lines in sets:
        for addr in lines:
            machine.cache.access(addr)


def receive_prime_probe(machine: Machine, eviction_sets: Sequence[Sequence[int]],
                        threshold_cycles: Optional[int] = None,
                        latencies: Optional[list] = None) -> int:
    """Re-access the primed lines; the set with a slow line names the byte.

    ``eviction_sets[i]`` holds the attacker lines primed into the set of
    probe slot ``i + 1``.  Lines are probed most-recently-primed first so a
    miss in one way does not cascade into the others.
    """
    if threshold_cycles is None:
        threshold_cycles = default_threshold(machine)
    hits = []
    for i, lines in enumerate(eviction_sets):
        worst = 0
        for addr in reversed(lines):
            lat = machine.cache.access(addr).latency
            machine.advance(lat)
            worst = max(worst, lat)
        slow = worst >= threshold_cycles
        if latencies is not None:
            latencies.append(worst)
        if slow:
            hits.append(i + 1)
    if len(hits) != 1:
        raise AmbiguousRead(hits)
    return hits[0] - 1
