"""Architectural state: pages, memory, contexts, privilege modes and the clock.

Addressing is flat.  A page is either global (visible from every address
space, e.g. kernel pages and shared libraries) or private to one address
space.  Private pages of different address spaces may share a virtual base;
their bytes and cache lines are kept apart by tagging the address space into
the high bits of the physical address.
"""
from __future__ import annotations

import dataclasses
import enum
import hashlib
from dataclasses import dataclass, field
from typing import Optional

from . import defenses as _defenses
from .cache import CacheGeometry, CacheState, DEFAULT_HIT_LATENCY, DEFAULT_MISS_LATENCY
from .defenses import DefenseConfig, Transition
from .isa import SP, ProgramImage, assemble
from .predictors import BranchTargetBuffer, DirectionPredictor, ReturnStackBuffer, Underfill

PAGE_SIZE = 4096
PAGE_MASK = ~(PAGE_SIZE - 1)
WORD = 8
MASK64 = (1 << 64) - 1

USER_STACK_BASE = 0x1_0000
KERNEL_STACK_BASE = 0xFFFF_8000
BENIGN_GADGET = 0xFFFF_F000
DEFAULT_ROB_LIMIT = 224


class MachineError(Exception):
    pass


class Mode(enum.Enum):
    USER = "user"
    KERNEL = "kernel"
    ENCLAVE = "enclave"

    @property
    def privilege(self) -> int:
        return 1 if self is Mode.KERNEL else 0


Domain = Mode  # page domains use the same three names


@dataclass(frozen=True)
class Perms:
    read: bool = True
    write: bool = False
    exec: bool = False

    @classmethod
    def parse(cls, text: str) -> "Perms":
        bad = set(text) - set("rwx-")
        if bad:
            raise ValueError(f"bad permission string {text!r}")
        return cls("r" in text, "w" in text, "x" in text)

    def __str__(self) -> str:
        return ("r" if self.read else "-") + ("w" if self.write else "-") + ("x" if self.exec else "-")


@dataclass(frozen=True)
class PageDescriptor:
    base: int
    perms: Perms
    domain: Domain
    mapped_in_user: bool = True
    address_space: Optional[int] = None  # None: global

    def phys(self, addr: int) -> int:
        if self.address_space is None:
            return addr
        return ((self.address_space + 1) << 48) | addr


@dataclass
class Context:
    id: int
    mode: Mode
    pc: int
    address_space: int
    entry: int
    stack_top: int
    kernel_sp: int
    enclave_sp: Optional[int] = None
    regs: list = field(default_factory=lambda: [0] * 16)
    zf: bool = False
    halted: bool = False
    fault: Optional[str] = None
    saved: list = field(default_factory=list)  # (mode, resume pc, sp) per transition
    # microarchitectural scoreboard, not part of snapshots
    ready: list = field(default_factory=lambda: [0] * 16)
    flags_ready: int = 0
    initial_mode: Mode = Mode.USER

    def reset(self, clock: int = 0) -> None:
        """Restart at the entry point with fresh registers."""
        self.mode = self.initial_mode
        self.pc = self.entry
        self.regs = [0] * 16
        self.regs[SP] = self.stack_top
        self.zf = False
        self.halted = False
        self.fault = None
        self.saved = []
        self.ready = [clock] * 16
        self.flags_ready = clock


@dataclass(frozen=True)
class TraceEvent:
    cycle: int
    ctx: int
    pc: int
    kind: str
    detail: str = ""

    def to_line(self) -> str:
        return f"{self.cycle}\t{self.ctx}\t{self.pc:#x}\t{self.kind}\t{self.detail}"


TRACE_KINDS = frozenset({"commit", "spec_issue", "spec_squash", "spec_commit", "rsb_push",
                         "rsb_pop", "refill", "cache_fill", "cache_flush", "ctx_switch",
                         "mode_switch"})


@dataclass(frozen=True)
class ContextState:
    id: int
    mode: str
    pc: int
    regs: tuple
    zf: bool
    halted: bool
    fault: Optional[str]
    saved: tuple


@dataclass(frozen=True)
class ArchSnapshot:
    contexts: tuple
    memory: tuple  # (physical page base, bytes) for every writable page

    def context(self, cid: int) -> ContextState:
        return self.contexts[cid]

    def diff(self, other: "ArchSnapshot") -> list[str]:
        out = []
        for a, b in zip(self.contexts, other.contexts):
            for f in dataclasses.fields(a):
                if getattr(a, f.name) != getattr(b, f.name):
                    out.append(f"ctx{a.id}.{f.name}: {getattr(a, f.name)!r} != {getattr(b, f.name)!r}")
        if len(self.contexts) != len(other.contexts):
            out.append("context count differs")
        mine, theirs = dict(self.memory), dict(other.memory)
        for base in sorted(set(mine) | set(theirs)):
            if mine.get(base) != theirs.get(base):
                out.append(f"memory page {base:#x} differs")
        return out


_HW_PRESETS = {
    "none": dict(rsb_capacity=16, rsb_underfill="fallback"),
    "fully_patched": dict(rsb_capacity=16, rsb_underfill="fallback"),
    "xeon": dict(rsb_capacity=16, rsb_underfill="fallback"),
    "skylake": dict(rsb_capacity=16, rsb_underfill="fallback"),
    "amd": dict(rsb_capacity=24, rsb_underfill="none"),
}


@dataclass(frozen=True)
class MachineConfig:
    preset: str = "none"
    rsb_capacity: int = 16
    rsb_underfill: str = "fallback"
    cache_sets: int = 64
    cache_ways: int = 8
    line_size: int = 64
    hit_latency: int = DEFAULT_HIT_LATENCY
    miss_latency: int = DEFAULT_MISS_LATENCY
    rob_limit: int = DEFAULT_ROB_LIMIT
    seed: int = 0
    jitter: bool = False
    defenses: DefenseConfig = DefenseConfig()

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "MachineConfig":
        key = name.replace("-", "_")
        if key not in _HW_PRESETS:
            raise KeyError(f"unknown preset {name!r}")
        base = dict(_HW_PRESETS[key], preset=key, defenses=_defenses.preset(key))
        base.update(overrides)
        return cls(**base)

    @classmethod
    def parse(cls, text: str) -> "MachineConfig":
        """Read the line-oriented ``key = value`` format."""
        pairs = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"line {lineno}: expected 'key = value'")
            pairs[key.strip()] = value.strip()
        cfg = cls.from_preset(pairs.pop("preset", "none"))
        ints = {"rsb_capacity", "cache_sets", "cache_ways", "line_size", "hit_latency",
                "miss_latency", "rob_limit", "seed"}
        flags = {}
        updates = {}
        for key, value in pairs.items():
            if key in ints:
                updates[key] = int(value, 0)
            elif key == "rsb_underfill":
                if value not in ("fallback", "none"):
                    raise ValueError(f"rsb_underfill must be 'fallback' or 'none', got {value!r}")
                updates[key] = value
            elif key == "jitter":
                updates[key] = _parse_bool(key, value)
            elif key in _defenses.FLAG_NAMES:
                flags[key] = _parse_bool(key, value)
            else:
                raise ValueError(f"unknown config key {key!r}")
        return dataclasses.replace(cfg, defenses=cfg.defenses.with_flags(**flags), **updates)

    @classmethod
    def from_file(cls, path) -> "MachineConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.parse(fh.read())

    def to_text(self) -> str:
        lines = [f"preset = {self.preset}"]
        for f in dataclasses.fields(self):
            if f.name in ("preset", "defenses"):
                continue
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        for name, v in self.defenses.as_dict().items():
            lines.append(f"{name} = {str(v).lower()}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:12]


def _parse_bool(key: str, value: str) -> bool:
    v = value.lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"{key}: expected a boolean, got {value!r}")


_BENIGN_SRC = f"""
.org {BENIGN_GADGET:#x}
benign:
    nop
    jmp benign
"""


class Machine:
    """Composition root shared by every context on the simulated core."""

    def __init__(self, config: MachineConfig):
        self.config = config
        self.defenses = config.defenses
        self.pages: list[PageDescriptor] = []
        self._page_index: dict[tuple, PageDescriptor] = {}
        self._spaces_at: dict[int, set] = {}
        self._memory: dict[int, bytearray] = {}
        self.code: dict[tuple, object] = {}
        self.contexts: list[Context] = []
        self.current = 0
        self.clock = 0
        self.cache = CacheState(CacheGeometry(config.cache_sets, config.cache_ways, config.line_size),
                                config.hit_latency, config.miss_latency, config.jitter, config.seed)
        self.rsb = ReturnStackBuffer(config.rsb_capacity, Underfill(config.rsb_underfill))
        self.btb = BranchTargetBuffer()
        self.dirpred = DirectionPredictor()
        self.rng_seed = config.seed
        self.rob_limit = config.rob_limit
        self.syscalls: dict[int, int] = {}
        self.benign_gadget = BENIGN_GADGET
        self.trace: Optional[list[TraceEvent]] = None
        self.frame_open = False

    # -- tracing -----------------------------------------------------------
    def emit(self, kind: str, detail: str = "", pc: Optional[int] = None, ctx: Optional[int] = None) -> None:
        if self.trace is not None:
            if pc is None:
                pc = self.contexts[self.current].pc if self.contexts else 0
            self.trace.append(TraceEvent(self.clock, self.current if ctx is None else ctx, pc,
                                         kind, detail))

    def advance(self, cycles: int) -> None:
        if cycles < 0:
            raise MachineError("clock cannot run backwards")
        self.clock += cycles

    # -- pages -------------------------------------------------------------
    def page_at(self, space: Optional[int], addr: int) -> Optional[PageDescriptor]:
        base = addr & PAGE_MASK
        page = self._page_index.get((space, base))
        if page is None and space is not None:
            page = self._page_index.get((None, base))
        return page

    def check(self, mode: Mode, space: Optional[int], addr: int, kind: str):
        """Permission check; returns ``(page, fault)`` with ``fault`` None on success.

        ``kind`` is ``'r'``, ``'w'`` or ``'x'``.  KPTI-hidden kernel pages look
        unmapped from user and enclave mode.
        """
        page = self.page_at(space, addr)
        if page is None:
            return None, "unmapped"
        dom = page.domain
        if dom is Domain.KERNEL and mode is not Mode.KERNEL and not page.mapped_in_user:
            return None, "unmapped"
        if mode is Mode.USER:
            if dom is not Domain.USER:
                return page, "privilege"
        elif mode is Mode.KERNEL:
            if dom is Domain.ENCLAVE:
                return page, "privilege"
            if dom is Domain.USER:
                if kind == "x":
                    if self.defenses.smep:
                        return page, "smep"
                elif self.defenses.smap:
                    return page, "smap"
        else:
            if dom is Domain.KERNEL or (dom is Domain.USER and kind == "x"):
                return page, "privilege"
        p = page.perms
        if (kind == "r" and not p.read) or (kind == "w" and not p.write) or (kind == "x" and not p.exec):
            return page, "perm"
        return page, None

    def _page_bytes(self, page: PageDescriptor) -> bytearray:
        return self._memory[page.phys(page.base)]

    def read_bytes(self, page: PageDescriptor, addr: int, n: int, space=None) -> bytes:
        off = addr - page.base
        if off + n <= PAGE_SIZE:
            return bytes(self._page_bytes(page)[off:off + n])
        out = bytearray()
        for i in range(n):
            a = addr + i
            pg = page if (a & PAGE_MASK) == page.base else self.page_at(space, a)
            out.append(self._page_bytes(pg)[a - pg.base] if pg is not None else 0)
        return bytes(out)

    def write_bytes(self, page: PageDescriptor, addr: int, data: bytes, space=None) -> None:
        off = addr - page.base
        if off + len(data) <= PAGE_SIZE:
            self._page_bytes(page)[off:off + len(data)] = data
            return
        for i, b in enumerate(data):
            a = addr + i
            pg = page if (a & PAGE_MASK) == page.base else self.page_at(space, a)
            if pg is not None:
                self._page_bytes(pg)[a - pg.base] = b

    # host-side helpers used by scenario setup and receivers
    def poke(self, addr: int, data: bytes, space: Optional[int] = None) -> None:
        page = self.page_at(space, addr)
        if page is None:
            raise MachineError(f"poke of unmapped address {addr:#x}")
        self.write_bytes(page, addr, data, space)

    def poke_word(self, addr: int, value: int, space: Optional[int] = None) -> None:
        self.poke(addr, (value & MASK64).to_bytes(WORD, "little"), space)

    def peek(self, addr: int, n: int, space: Optional[int] = None) -> bytes:
        page = self.page_at(space, addr)
        if page is None:
            raise MachineError(f"peek of unmapped address {addr:#x}")
        return self.read_bytes(page, addr, n, space)

    def phys(self, addr: int, space: Optional[int] = None) -> int:
        page = self.page_at(space, addr)
        if page is None:
            raise MachineError(f"no page at {addr:#x}")
        return page.phys(addr)

    # -- code --------------------------------------------------------------
    def load_image(self, image: ProgramImage, address_space: Optional[int] = None) -> None:
        """Register an image's instructions and copy its data segment in."""
        for k, instr in enumerate(image.instructions):
            addr = image.base + k
            page = self.page_at(address_space, addr)
            if page is None or not page.perms.exec:
                raise MachineError(f"image text at {addr:#x} is not in a mapped exec page")
            self.code[(page.address_space, addr)] = instr
        if image.data:
            for i in range(0, len(image.data), PAGE_SIZE):
                if self.page_at(address_space, image.data_base + i) is None:
                    raise MachineError(f"image data at {image.data_base + i:#x} is unmapped")
            self.poke(image.data_base, image.data, address_space)

    def fetch(self, space: Optional[int], pc: int):
        instr = self.code.get((space, pc))
        if instr is None and space is not None:
            instr = self.code.get((None, pc))
        return instr

    def context(self, cid: int) -> Context:
        return self.contexts[cid]


# ---------------------------------------------------------------------------
# module-level operations

def create_machine(config: "MachineConfig | str | None" = None) -> Machine:
    if config is None:
        config = MachineConfig()
    elif isinstance(config, str):
        config = MachineConfig.from_preset(config)
    m = Machine(config)
    map_region(m, BENIGN_GADGET, PAGE_SIZE, "r-x", Domain.KERNEL)
    m.load_image(assemble(_BENIGN_SRC))
    return m


def _overlaps(a: Optional[int], b: Optional[int]) -> bool:
    return a is None or b is None or a == b


def map_region(machine: Machine, base: int, length: int, perms="rw-", domain: Domain = Domain.USER,
               address_space: Optional[int] = None) -> list[PageDescriptor]:
    if base % PAGE_SIZE:
        raise MachineError(f"region base {base:#x} is not {PAGE_SIZE}-aligned")
    if length <= 0:
        raise MachineError("region length must be positive")
    if isinstance(perms, str):
        perms = Perms.parse(perms)
    if domain is Domain.ENCLAVE and perms.write and address_space is None:
        raise MachineError("enclave pages must belong to one address space")
    bases = range(base, base + length, PAGE_SIZE)
    for b in bases:
        if any(_overlaps(space, address_space) for space in machine._spaces_at.get(b, ())):
            raise MachineError(f"page {b:#x} overlaps an existing mapping")
    mapped_in_user = not (domain is Domain.KERNEL and machine.defenses.kpti)
    out = []
    for b in bases:
        page = PageDescriptor(b, perms, domain, mapped_in_user, address_space)
        machine.pages.append(page)
        machine._page_index[(address_space, b)] = page
        machine._spaces_at.setdefault(b, set()).add(address_space)
        machine._memory[page.phys(b)] = bytearray(PAGE_SIZE)
        out.append(page)
    return out


def is_mapped(machine: Machine, addr: int, address_space: Optional[int] = None) -> bool:
    return machine.page_at(address_space, addr) is not None


def spawn_context(machine: Machine, image: ProgramImage, mode: Mode = Mode.USER,
                  address_space: int = 0, stack_top: Optional[int] = None,
                  kernel_sp: Optional[int] = None) -> int:
    """Load ``image`` into ``address_space`` and create a context at its entry."""
    cid = len(machine.contexts)
    machine.load_image(image, address_space)
    page = machine.page_at(address_space, image.entry)
    if page is None or not page.perms.exec:
        raise MachineError(f"entry {image.entry:#x} is not mapped executable")
    if stack_top is None:
        sbase = USER_STACK_BASE + 0x2000 * cid
        if machine.page_at(address_space, sbase) is None:
            dom = Domain.KERNEL if mode is Mode.KERNEL else Domain.USER
            map_region(machine, sbase, PAGE_SIZE, "rw-", dom,
                       None if dom is Domain.KERNEL else address_space)
        stack_top = sbase + PAGE_SIZE
    if kernel_sp is None:
        kbase = KERNEL_STACK_BASE + PAGE_SIZE * cid
        if machine.page_at(None, kbase) is None:
            map_region(machine, kbase, PAGE_SIZE, "rw-", Domain.KERNEL)
        kernel_sp = kbase + PAGE_SIZE - 64
    ctx = Context(cid, mode, image.entry, address_space, image.entry, stack_top, kernel_sp,
                  initial_mode=mode)
    ctx.reset(machine.clock)
    machine.contexts.append(ctx)
    return cid


def context_switch(machine: Machine, to: int) -> None:
    """Switch cores to context ``to``, passing through the kernel."""
    if not 0 <= to < len(machine.contexts):
        raise MachineError(f"unknown context {to}")
    prev = machine.current
    machine.current = to
    machine.emit("ctx_switch", f"ctx{prev}->ctx{to}")
    _defenses.on_privilege_transition(machine, Transition.CONTEXT_SWITCH)


def snapshot_arch_state(machine: Machine) -> ArchSnapshot:
    if machine.frame_open:
        raise MachineError("cannot snapshot while a speculation frame is open")
    ctxs = tuple(
        ContextState(c.id, c.mode.value, c.pc, tuple(c.regs), c.zf, c.halted, c.fault,
                     tuple((m.value, pc, sp) for m, pc, sp in c.saved))
        for c in machine.contexts)
    mem = tuple(sorted((p.phys(p.base), bytes(machine._page_bytes(p)))
                       for p in machine.pages if p.perms.write))
    return ArchSnapshot(ctxs, mem)
