"""Return stack buffer, branch target buffer and direction predictor."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Union


class Underfill(enum.Enum):
    FALLBACK_INDIRECT = "fallback"  # Intel: fall back to the BTB
    NO_PREDICTION = "none"  # AMD: do not speculate


@dataclass(frozen=True)
class Address:
    addr: int


class _Marker:
    def __init__(self, name: str):
        self.name = name

    def __repr__(self) -> str:
        return self.name


FallbackIndirect = _Marker("FallbackIndirect")
NoPrediction = _Marker("NoPrediction")
Prediction = Union[Address, _Marker]


class ReturnStackBuffer:
    """Bounded ring of return addresses.

    Pushing into a full buffer overwrites the oldest entry; popping an empty
    one reports the underfill behaviour and leaves the state alone.
    """

    def __init__(self, capacity: int = 16,
                 underfill_mode: Underfill = Underfill.FALLBACK_INDIRECT):
        if not 4 <= capacity <= 64:
            raise ValueError(f"RSB capacity must be in 4..64, got {capacity}")
        self.capacity = capacity
        self.underfill_mode = underfill_mode
        self.entries = [0] * capacity
        self.top = capacity - 1
        self.fill = 0

    def push(self, addr: int) -> None:
        self.top = (self.top + 1) % self.capacity
        self.entries[self.top] = addr
        if self.fill < self.capacity:
            self.fill += 1

    def predict_pop(self) -> Prediction:
        if self.fill == 0:
            if self.underfill_mode is Underfill.FALLBACK_INDIRECT:
                return FallbackIndirect
            return NoPrediction
        addr = self.entries[self.top]
        self.top = (self.top - 1) % self.capacity
        self.fill -= 1
        return Address(addr)

    def refill(self, benign_addr: int) -> None:
        self.entries = [benign_addr] * self.capacity
        self.fill = self.capacity

    def peek(self) -> Optional[int]:
        return self.entries[self.top] if self.fill else None

    def live_entries(self) -> list[int]:
        """Valid entries, oldest first."""
        return [self.entries[(self.top - i) % self.capacity] for i in range(self.fill)][::-1]

    def snapshot(self) -> tuple:
        return (tuple(self.entries), self.top, self.fill)

    def restore(self, snap: tuple) -> None:
        entries, self.top, self.fill = snap
        self.entries = list(entries)


def rsb_push(rsb: ReturnStackBuffer, addr: int) -> None:
    rsb.push(addr)


def rsb_predict_pop(rsb: ReturnStackBuffer) -> Prediction:
    return rsb.predict_pop()


def rsb_refill(rsb: ReturnStackBuffer, benign_addr: int) -> None:
    rsb.refill(benign_addr)


@dataclass(frozen=True)
class Owner:
    context: int
    privilege: int  # 0 user/enclave, 1 kernel


@dataclass
class _BTBEntry:
    tag: int
    target: int
    owner: Owner


class BranchTargetBuffer:
    def __init__(self, size: int = 256):
        self.size = size
        self.table: list[Optional[_BTBEntry]] = [None] * size

    def train(self, pc: int, target: int, owner: Owner) -> None:
        self.table[pc % self.size] = _BTBEntry(pc // self.size, target, owner)

    def lookup(self, pc: int, requester: Owner, ibrs: bool = False,
               stibp: bool = False) -> Optional[int]:
        entry = self.table[pc % self.size]
        if entry is None or entry.tag != pc // self.size:
            return None
        if ibrs and entry.owner.privilege < requester.privilege:
            return None
        if stibp and entry.owner.context != requester.context:
            return None
        return entry.target

    def barrier(self, surviving_owner: int) -> None:
        for i, entry in enumerate(self.table):
            if entry is not None and entry.owner.context != surviving_owner:
                self.table[i] = None


def btb_lookup(btb: BranchTargetBuffer, pc: int, requester: Owner, cfg) -> Optional[int]:
    return btb.lookup(pc, requester, ibrs=cfg.ibrs, stibp=cfg.stibp)


def btb_train(btb: BranchTargetBuffer, pc: int, target: int, owner: Owner) -> None:
    btb.train(pc, target, owner)


def btb_barrier(btb: BranchTargetBuffer, surviving_owner: int) -> None:
    btb.barrier(surviving_owner)


class DirectionPredictor:
    """Table of 2-bit saturating counters, initialised weakly not-taken."""

    def __init__(self, size: int = 256, init: int = 1):
        self.size = size
        self.counters = [init] * size

    def predict(self, pc: int) -> bool:
        return self.counters[pc % self.size] >= 2

    def train(self, pc: int, taken: bool) -> None:
        i = pc % self.size
        c = self.counters[i]
        self.counters[i] = min(c + 1, 3) if taken else max(c - 1, 0)


def dirpred_predict(dp: DirectionPredictor, pc: int) -> bool:
    return dp.predict(pc)


def dirpred_train(dp: DirectionPredictor, pc: int, outcome: bool) -> None:
    dp.train(pc, outcome)
