"""Single-level set-associative LRU data cache with timed accesses."""
from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Optional

DEFAULT_HIT_LATENCY = 4
DEFAULT_MISS_LATENCY = 300


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


@dataclass(frozen=True)
class CacheGeometry:
    sets: int = 64
    ways: int = 8
    line_size: int = 64

    def __post_init__(self):
        if not _is_pow2(self.sets):
            raise ValueError(f"cache sets must be a power of two, got {self.sets}")
        if not _is_pow2(self.line_size):
            raise ValueError(f"line size must be a power of two, got {self.line_size}")
        if not _is_pow2(self.ways):
            raise ValueError(f"cache ways must be a power of two, got {self.ways}")

    @property
    def capacity(self) -> int:
        return self.sets * self.ways * self.line_size

    def set_index(self, addr: int) -> int:
        return (addr // self.line_size) % self.sets

    def line_of(self, addr: int) -> int:
        return addr // self.line_size


@dataclass(frozen=True)
class AccessResult:
    hit: bool
    latency: int


class CacheState:
    """Per-set way lists of line numbers, most-recently-used last.

    Lines are identified by ``addr // line_size``; the set index is derived
    from the low bits of that number, the rest acts as the tag.
    """

    def __init__(self, geometry: Optional[CacheGeometry] = None,
                 hit_latency: int = DEFAULT_HIT_LATENCY,
                 miss_latency: int = DEFAULT_MISS_LATENCY,
                 jitter: bool = False, seed: int = 0):
        self.geometry = geometry or CacheGeometry()
        self.hit_latency = hit_latency
        self.miss_latency = miss_latency
        self.jitter = jitter
        self._rng = random.Random(seed)
        self._sets: list[list[int]] = [[] for _ in range(self.geometry.sets)]
        self._shift = self.geometry.line_size.bit_length() - 1
        self._mask = self.geometry.sets - 1

    def _latency(self, base: int) -> int:
        if not self.jitter:
            return base
        return max(1, round(base * (1.0 + self._rng.uniform(-0.1, 0.1))))

    def access(self, addr: int) -> AccessResult:
        line = addr >> self._shift
        ways = self._sets[line & self._mask]
        if line in ways:
            if ways[-1] != line:
                ways.remove(line)
                ways.append(line)
            return AccessResult(True, self._latency(self.hit_latency))
        if len(ways) >= self.geometry.ways:
            del ways[0]
        ways.append(line)
        return AccessResult(False, self._latency(self.miss_latency))

    def flush_line(self, addr: int) -> None:
        line = addr >> self._shift
        ways = self._sets[line & self._mask]
        if line in ways:
            ways.remove(line)

    def is_cached(self, addr: int) -> bool:
        line = addr >> self._shift
        return line in self._sets[line & self._mask]

    def set_contents(self, index: int) -> tuple[int, ...]:
        """Line numbers resident in set ``index``, LRU first."""
        return tuple(self._sets[index])

    def clear(self) -> None:
        for ways in self._sets:
            ways.clear()
