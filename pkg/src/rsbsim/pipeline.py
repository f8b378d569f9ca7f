"""Speculative execution engine.

Committed instructions execute in order.  A return, a conditional branch or
an indirect branch whose target is predicted opens a :class:`SpecFrame`;
transient instructions then issue one per cycle from the predicted pc until
the true target resolves.  On a mismatch the frame is squashed: registers and
buffered stores are dropped, cache and RSB side effects stay.  A correctly
predicted frame is committed by restoring the RSB and letting the committed
path execute the same instructions.

Loads do not block: the destination register becomes ready after the cache
latency.  Memory addresses and stored values wait for their registers; ALU
ops and ``cmp`` just propagate readiness, which is what lets a branch on a
slow load speculate.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

from . import defenses as _defenses
from .defenses import Transition
from .isa import SP, Imm, Mem, Ref, Reg
from .machine import (ArchSnapshot, Context, Machine, MachineError, Mode, TraceEvent,
                      context_switch, snapshot_arch_state)
from .predictors import Address, FallbackIndirect, Owner

MASK = (1 << 64) - 1
BRANCH_RESOLVE_DELAY = 3

# transient issue stops at these
_STOP = frozenset({"lfence", "cpuid", "syscall", "sysret", "eenter", "eexit", "yield", "halt"})

__all__ = ["SpecFrame", "RunResult", "TraceEvent", "run", "reference_run", "write_trace",
           "read_trace"]


@dataclass
class SpecFrame:
    cause: str  # "return" | "cond_branch" | "indirect_branch"
    predicted_pc: int
    true_pc: int
    checkpoint: tuple  # (regs, pc, zf) of the opening context
    resolve_at: int
    opened_at: int
    context: int
    mode: str
    store_buffer: list = field(default_factory=list)  # (phys addr, byte), in order
    transient_count: int = 0
    suppressed_fault: Optional[tuple[int, str]] = None
    squashed: bool = False
    aborted: Optional[str] = None
    issued: list = field(default_factory=list)  # pcs issued transiently
    stopped_by: Optional[str] = None


@dataclass
class RunResult:
    halt_reason: str  # "halt" | "schedule" | "max_cycles" | "fault:<kind>"
    cycles: int
    trace: list
    final_snapshot: ArchSnapshot
    frames: list

    @property
    def faulted(self) -> bool:
        return self.halt_reason.startswith("fault:")


class _Fault(Exception):
    def __init__(self, kind: str):
        self.kind = kind


_YIELD = object()


def _val(regs, op) -> int:
    t = type(op)
    if t is Reg:
        return regs[op.n]
    if t is Imm:
        return op.value & MASK
    return op.addr & MASK


def _rdy(ready, op) -> int:
    return ready[op.n] if type(op) is Reg else 0


def _ea(regs, mem: Mem) -> int:
    if mem.base is None:
        return mem.disp & MASK
    return (regs[mem.base] + mem.disp) & MASK


def _alu(op: str, a: int, b: int) -> int:
    if op == "add":
        return (a + b) & MASK
    if op == "sub":
        return (a - b) & MASK
    if op == "and":
        return a & b
    if op == "shl":
        return (a << (b & 63)) & MASK
    return b  # mov


class _Engine:
    def __init__(self, machine: Machine, reference: bool, record: bool):
        self.m = machine
        self.ref = reference
        self.record = record
        self.frames: list[SpecFrame] = []

    # -- helpers -------------------------------------------------------------
    def _emit(self, kind, detail="", pc=None, cycle=None):
        m = self.m
        if m.trace is not None:
            ctx = m.current
            if pc is None:
                pc = m.contexts[ctx].pc
            m.trace.append(TraceEvent(m.clock if cycle is None else cycle, ctx, pc, kind, detail))

    def _touch(self, phys: int, pc: int, cycle=None, transient=False) -> int:
        """Access the cache line for ``phys`` and return the latency."""
        if self.ref:
            return 1
        res = self.m.cache.access(phys)
        if not res.hit and self.m.trace is not None:
            self._emit("cache_fill", f"{phys:#x}" + (" transient" if transient else ""), pc, cycle)
        return res.latency

    def _drain(self, ctx: Context) -> None:
        m = self.m
        m.clock = max(m.clock, max(ctx.ready), ctx.flags_ready)

    def _stall(self, *cycles: int) -> None:
        m = self.m
        top = max(cycles)
        if top > m.clock:
            m.clock = top

    def _read_word(self, ctx: Context, addr: int, pc: int) -> tuple[int, int]:
        page, fault = self.m.check(ctx.mode, ctx.address_space, addr, "r")
        if fault:
            raise _Fault(f"read:{fault}@{addr:#x}")
        raw = self.m.read_bytes(page, addr, 8, ctx.address_space)
        lat = self._touch(page.phys(addr), pc)
        return int.from_bytes(raw, "little"), lat

    def _write_word(self, ctx: Context, addr: int, value: int, pc: int) -> None:
        page, fault = self.m.check(ctx.mode, ctx.address_space, addr, "w")
        if fault:
            raise _Fault(f"write:{fault}@{addr:#x}")
        self.m.write_bytes(page, addr, (value & MASK).to_bytes(8, "little"), ctx.address_space)
        self._touch(page.phys(addr), pc)

    def _owner(self, ctx: Context) -> Owner:
        return Owner(ctx.id, ctx.mode.privilege)

    # -- committed execution ---------------------------------------------------
    def step(self, ctx: Context):
        m = self.m
        pc = ctx.pc
        page, fault = m.check(ctx.mode, ctx.address_space, pc, "x")
        instr = m.fetch(ctx.address_space, pc) if fault is None else None
        if instr is None:
            return self._fault(ctx, f"exec:{fault or 'no_instruction'}@{pc:#x}")
        try:
            return self._execute(ctx, instr, pc)
        except _Fault as f:
            return self._fault(ctx, f.kind)

    def _fault(self, ctx: Context, kind: str):
        ctx.fault = kind
        ctx.halted = True
        self._emit("commit", f"fault {kind}")
        return None

    def _execute(self, ctx: Context, instr, pc: int):
        m = self.m
        op = instr.opcode
        ops = instr.operands
        regs = ctx.regs
        ready = ctx.ready
        detail = op
        nxt = pc + 1

        if op in ("mov", "add", "sub", "and", "shl"):
            rd = ops[0].n
            regs[rd] = _alu(op, regs[rd], _val(regs, ops[1]))
            r = _rdy(ready, ops[1])
            ready[rd] = r if op == "mov" else max(r, ready[rd])
            m.clock += 1
        elif op == "cmp":
            ctx.zf = ((regs[ops[0].n] - _val(regs, ops[1])) & MASK) == 0
            ctx.flags_ready = max(ready[ops[0].n], _rdy(ready, ops[1]))
            m.clock += 1
        elif op == "load":
            mem = ops[1]
            if mem.base is not None:
                self._stall(ready[mem.base])
            addr = _ea(regs, mem)
            value, lat = self._read_word(ctx, addr, pc)
            rd = ops[0].n
            regs[rd] = value
            ready[rd] = m.clock + lat
            detail = f"load {addr:#x}"
            m.clock += 1
        elif op == "store":
            mem = ops[0]
            self._stall(ready[mem.base] if mem.base is not None else 0, _rdy(ready, ops[1]))
            addr = _ea(regs, mem)
            self._write_word(ctx, addr, _val(regs, ops[1]), pc)
            detail = f"store {addr:#x}"
            m.clock += 1
        elif op == "push":
            self._stall(ready[SP], _rdy(ready, ops[0]))
            addr = (regs[SP] - 8) & MASK
            self._write_word(ctx, addr, _val(regs, ops[0]), pc)
            regs[SP] = addr
            m.clock += 1
        elif op == "pop":
            self._stall(ready[SP])
            addr = regs[SP]
            value, lat = self._read_word(ctx, addr, pc)
            regs[SP] = (addr + 8) & MASK
            rd = ops[0].n
            regs[rd] = value
            ready[rd] = m.clock + lat
            detail = f"pop {addr:#x}"
            m.clock += 1
        elif op == "clflush":
            mem = ops[0]
            if mem.base is not None:
                self._stall(ready[mem.base])
            addr = _ea(regs, mem)
            page, fault = m.check(ctx.mode, ctx.address_space, addr, "r")
            if fault:
                raise _Fault(f"flush:{fault}@{addr:#x}")
            if not self.ref:
                m.cache.flush_line(page.phys(addr))
                self._emit("cache_flush", f"{page.phys(addr):#x}", pc)
            m.clock += 1
        elif op == "rdtscp":
            self._drain(ctx)
            regs[ops[0].n] = m.clock
            ready[ops[0].n] = m.clock
            m.clock += 1
        elif op in ("lfence", "cpuid"):
            self._drain(ctx)
            m.clock += 1
        elif op == "nop":
            m.clock += 1
        elif op in ("jz", "jnz"):
            taken = ctx.zf if op == "jz" else not ctx.zf
            target = ops[0].addr
            actual = target if taken else nxt
            if self.ref:
                self._stall(ctx.flags_ready)
            else:
                predicted = target if m.dirpred.predict(pc) else nxt
                resolve_at = max(ctx.flags_ready, m.clock + BRANCH_RESOLVE_DELAY)
                self._speculate(ctx, "cond_branch", predicted, actual, resolve_at, pc)
                m.dirpred.train(pc, taken)
                self._stall(resolve_at)
            m.clock += 1
            nxt = actual
        elif op == "jmp":
            if type(ops[0]) is Reg:
                nxt = self._indirect(ctx, regs[ops[0].n], ready[ops[0].n], pc)
            else:
                nxt = ops[0].addr
                m.clock += 1
        elif op == "call":
            self._stall(ready[SP])
            addr = (regs[SP] - 8) & MASK
            if type(ops[0]) is Reg:
                target, tready = regs[ops[0].n], ready[ops[0].n]
            else:
                target, tready = ops[0].addr, None
            self._write_word(ctx, addr, nxt, pc)
            regs[SP] = addr
            if not self.ref:
                m.rsb.push(nxt)
                self._emit("rsb_push", f"{nxt:#x}", pc)
            if tready is None:
                m.clock += 1
                nxt = target
            else:
                nxt = self._indirect(ctx, target, tready, pc)
        elif op == "ret":
            self._stall(ready[SP])
            addr = regs[SP]
            target, lat = self._read_word(ctx, addr, pc)
            resolve_at = m.clock + lat
            regs[SP] = (addr + 8) & MASK
            if not self.ref:
                pred = m.rsb.predict_pop()
                self._emit("rsb_pop", repr(pred) if not isinstance(pred, Address)
                           else f"{pred.addr:#x}", pc)
                if isinstance(pred, Address):
                    self._speculate(ctx, "return", pred.addr, target, resolve_at, pc)
                elif pred is FallbackIndirect:
                    guess = m.btb.lookup(pc, self._owner(ctx), m.defenses.ibrs, m.defenses.stibp)
                    if guess is not None:
                        self._speculate(ctx, "return", guess, target, resolve_at, pc)
            self._stall(resolve_at)
            m.clock += 1
            nxt = target
            detail = f"ret {target:#x}"
        elif op == "syscall":
            self._drain(ctx)
            if ctx.mode is not Mode.USER:
                raise _Fault("syscall:not_user")
            n = _val(regs, ops[0])
            if n not in m.syscalls:
                raise _Fault(f"syscall:unknown:{n}")
            ctx.saved.append((ctx.mode, nxt, regs[SP]))
            ctx.mode = Mode.KERNEL
            regs[SP] = ctx.kernel_sp
            nxt = m.syscalls[n]
            m.clock += 1
            self._emit("commit", f"syscall {n}", pc)
            self._emit("mode_switch", "user->kernel", pc)
            _defenses.on_privilege_transition(m, Transition.KERNEL_ENTRY)
            ctx.pc = nxt
            return None
        elif op == "sysret":
            self._drain(ctx)
            if ctx.mode is not Mode.KERNEL or not ctx.saved:
                raise _Fault("sysret:not_kernel")
            mode, nxt, sp = ctx.saved.pop()
            ctx.mode = mode
            regs[SP] = sp
            self._emit("mode_switch", f"kernel->{mode.value}", pc)
            m.clock += 1
        elif op == "eenter":
            self._drain(ctx)
            target = ops[0].addr
            if ctx.mode is not Mode.USER:
                raise _Fault("eenter:not_user")
            page = m.page_at(ctx.address_space, target)
            if page is None or page.domain is not Mode.ENCLAVE or not page.perms.exec:
                raise _Fault(f"eenter:bad_target@{target:#x}")
            if ctx.enclave_sp is None:
                raise _Fault("eenter:no_enclave_stack")
            ctx.saved.append((ctx.mode, nxt, regs[SP]))
            ctx.mode = Mode.ENCLAVE
            regs[SP] = ctx.enclave_sp
            nxt = target
            m.clock += 1
            self._emit("commit", "eenter", pc)
            self._emit("mode_switch", "user->enclave", pc)
            _defenses.on_privilege_transition(m, Transition.ENCLAVE_ENTRY)
            ctx.pc = nxt
            return None
        elif op == "eexit":
            self._drain(ctx)
            if ctx.mode is not Mode.ENCLAVE or not ctx.saved:
                raise _Fault("eexit:not_enclave")
            mode, nxt, sp = ctx.saved.pop()
            ctx.mode = mode
            regs[SP] = sp
            self._emit("mode_switch", f"enclave->{mode.value}", pc)
            m.clock += 1
        elif op == "yield":
            m.clock += 1
            ctx.pc = nxt
            self._emit("commit", "yield", pc)
            return _YIELD
        elif op == "halt":
            self._drain(ctx)
            ctx.halted = True
            self._emit("commit", "halt", pc)
            m.clock += 1
            return None
        else:  # pragma: no cover - assembler rejects unknown opcodes
            raise MachineError(f"unhandled opcode {op}")
        ctx.pc = nxt
        if m.trace is not None:
            self._emit("commit", detail, pc)
        return None

    def _indirect(self, ctx: Context, target: int, tready: int, pc: int) -> int:
        m = self.m
        if self.ref:
            self._stall(tready)
        else:
            owner = self._owner(ctx)
            guess = m.btb.lookup(pc, owner, m.defenses.ibrs, m.defenses.stibp)
            resolve_at = max(tready, m.clock + BRANCH_RESOLVE_DELAY)
            if guess is not None:
                self._speculate(ctx, "indirect_branch", guess, target, resolve_at, pc)
            self._stall(resolve_at)
            m.btb.train(pc, target, owner)
        m.clock += 1
        return target

    # -- speculation -----------------------------------------------------------
    def _speculate(self, ctx: Context, cause: str, predicted: int, actual: int,
                   resolve_at: int, pc: int) -> SpecFrame:
        m = self.m
        frame = SpecFrame(cause, predicted, actual, (tuple(ctx.regs), pc, ctx.zf), resolve_at,
                          m.clock, ctx.id, ctx.mode.value)
        self.frames.append(frame)
        rsb_mark = m.rsb.snapshot()
        m.frame_open = True
        try:
            _, fault = m.check(ctx.mode, ctx.address_space, predicted, "x")
            if fault == "smep":
                frame.aborted = "smep"
            else:
                self._transient(ctx, frame)
        finally:
            m.frame_open = False
        if predicted == actual:
            m.rsb.restore(rsb_mark)
            self._emit("spec_commit", f"{cause} {frame.transient_count} insts", pc,
                       max(m.clock, resolve_at))
        else:
            frame.squashed = True
            self._emit("spec_squash", f"{cause} predicted={predicted:#x} actual={actual:#x} "
                       f"insts={frame.transient_count}", pc, max(m.clock, resolve_at))
        return frame

    def _transient(self, ctx: Context, frame: SpecFrame) -> None:
        m = self.m
        cfg = m.defenses
        regs = list(ctx.regs)
        ready = list(ctx.ready)
        zf = ctx.zf
        mode, space = ctx.mode, ctx.address_space
        sb: dict[int, int] = {}
        resolve_at = frame.resolve_at
        limit = m.rob_limit
        tracing = m.trace is not None
        t = m.clock + 1
        spc = frame.predicted_pc

        def note(kind: str) -> None:
            if frame.suppressed_fault is None:
                frame.suppressed_fault = (spc, kind)

        def tload(addr: int) -> tuple[int, int]:
            page, fault = m.check(mode, space, addr, "r")
            if fault in ("unmapped", "smap"):
                if fault == "smap":
                    note("smap")
                return 0, m.cache.hit_latency
            if fault:
                note(f"read:{fault}")
                if cfg.meltdown_patched:
                    return 0, m.cache.hit_latency
            raw = bytearray(m.read_bytes(page, addr, 8, space))
            phys = page.phys(addr)
            if sb:
                hits = 0
                for i in range(8):
                    b = sb.get(phys + i)
                    if b is not None:
                        raw[i] = b
                        hits += 1
                if hits == 8:  # fully forwarded: no cache access
                    return int.from_bytes(raw, "little"), m.cache.hit_latency
            return int.from_bytes(raw, "little"), self._touch(phys, spc, t, True)

        def tstore(addr: int, value: int) -> None:
            page, fault = m.check(mode, space, addr, "w")
            if page is None:
                return
            if fault:
                note(f"write:{fault}")
            phys = page.phys(addr)
            for i, b in enumerate((value & MASK).to_bytes(8, "little")):
                sb[phys + i] = b
                frame.store_buffer.append((phys + i, b))

        while t < resolve_at:
            if frame.transient_count >= limit:
                frame.stopped_by = "rob_limit"
                break
            _, fault = m.check(mode, space, spc, "x")
            if fault in ("smep", "unmapped"):
                frame.stopped_by = f"fetch:{fault}"
                break
            instr = m.fetch(space, spc)
            if instr is None:
                frame.stopped_by = "fetch:no_instruction"
                break
            if fault:
                note(f"exec:{fault}")
            op = instr.opcode
            if op in _STOP:
                frame.stopped_by = op
                break
            ops = instr.operands
            # in-order issue waits for address and data operands
            if op in ("load", "clflush"):
                need = ready[ops[1 if op == "load" else 0].base] if (
                    ops[1 if op == "load" else 0].base is not None) else 0
            elif op == "store":
                need = max(ready[ops[0].base] if ops[0].base is not None else 0,
                           _rdy(ready, ops[1]))
            elif op == "push":
                need = max(ready[SP], _rdy(ready, ops[0]))
            elif op in ("pop", "ret", "call"):
                need = ready[SP]
            else:
                need = 0
            if need > t:
                t = need
                if t >= resolve_at:
                    frame.stopped_by = "resolved"
                    break
            if tracing:
                self._emit("spec_issue", op, spc, t)
            frame.issued.append(spc)
            frame.transient_count += 1
            nxt = spc + 1

            if op in ("mov", "add", "sub", "and", "shl"):
                rd = ops[0].n
                regs[rd] = _alu(op, regs[rd], _val(regs, ops[1]))
                r = _rdy(ready, ops[1])
                ready[rd] = r if op == "mov" else max(r, ready[rd])
            elif op == "cmp":
                zf = ((regs[ops[0].n] - _val(regs, ops[1])) & MASK) == 0
            elif op == "load":
                value, lat = tload(_ea(regs, ops[1]))
                rd = ops[0].n
                regs[rd] = value
                ready[rd] = t + lat
            elif op == "store":
                tstore(_ea(regs, ops[0]), _val(regs, ops[1]))
            elif op == "push":
                regs[SP] = (regs[SP] - 8) & MASK
                tstore(regs[SP], _val(regs, ops[0]))
            elif op == "pop":
                value, lat = tload(regs[SP])
                regs[SP] = (regs[SP] + 8) & MASK
                rd = ops[0].n
                regs[rd] = value
                ready[rd] = t + lat
            elif op == "rdtscp":
                regs[ops[0].n] = t
                ready[ops[0].n] = t
            elif op in ("jz", "jnz"):
                nxt = ops[0].addr if m.dirpred.predict(spc) else spc + 1
            elif op == "jmp":
                if type(ops[0]) is Reg:
                    guess = m.btb.lookup(spc, Owner(ctx.id, mode.privilege), cfg.ibrs, cfg.stibp)
                    if guess is None:
                        frame.stopped_by = "no_prediction"
                        break
                    nxt = guess
                else:
                    nxt = ops[0].addr
            elif op == "call":
                regs[SP] = (regs[SP] - 8) & MASK
                tstore(regs[SP], spc + 1)
                # the RSB push survives a squash
                m.rsb.push(spc + 1)
                if tracing:
                    self._emit("rsb_push", f"{spc + 1:#x} transient", spc, t)
                if type(ops[0]) is Reg:
                    guess = m.btb.lookup(spc, Owner(ctx.id, mode.privilege), cfg.ibrs, cfg.stibp)
                    if guess is None:
                        frame.stopped_by = "no_prediction"
                        break
                    nxt = guess
                else:
                    nxt = ops[0].addr
            elif op == "ret":
                pred = m.rsb.predict_pop()
                regs[SP] = (regs[SP] + 8) & MASK
                if tracing:
                    self._emit("rsb_pop", (f"{pred.addr:#x}" if isinstance(pred, Address)
                                           else repr(pred)) + " transient", spc, t)
                if isinstance(pred, Address):
                    nxt = pred.addr
                elif pred is FallbackIndirect:
                    guess = m.btb.lookup(spc, Owner(ctx.id, mode.privilege), cfg.ibrs, cfg.stibp)
                    if guess is None:
                        frame.stopped_by = "no_prediction"
                        break
                    nxt = guess
                else:
                    frame.stopped_by = "no_prediction"
                    break
            # clflush and nop have no transient effect
            spc = nxt
            t += 1
        else:
            frame.stopped_by = "resolved"


def _drive(machine: Machine, schedule: Iterable, max_cycles: int, reference: bool,
           record_trace: bool) -> RunResult:
    schedule = list(schedule)
    for cid, _ in schedule:
        if not 0 <= cid < len(machine.contexts):
            raise MachineError(f"schedule names unknown context {cid}")
    engine = _Engine(machine, reference, record_trace)
    machine.trace = [] if record_trace else None
    reason = None
    for cid, budget in schedule:
        ctx = machine.contexts[cid]
        if ctx.halted:
            continue
        if machine.current != cid:
            context_switch(machine, cid)
        for _ in range(budget):
            if machine.clock > max_cycles:
                reason = "max_cycles"
                break
            out = engine.step(ctx)
            if ctx.fault is not None:
                reason = f"fault:{ctx.fault}"
                break
            if out is _YIELD or ctx.halted:
                break
        if reason:
            break
    if reason is None:
        scheduled = {cid for cid, _ in schedule}
        reason = "halt" if all(machine.contexts[c].halted for c in scheduled) else "schedule"
    trace = machine.trace if machine.trace is not None else []
    machine.trace = None
    return RunResult(reason, machine.clock, trace, snapshot_arch_state(machine), engine.frames)


def run(machine: Machine, schedule, max_cycles: int = 10_000_000, *,
        record_trace: bool = True) -> RunResult:
    """Execute ``schedule`` (``(context id, step budget)`` slices) speculatively."""
    return _drive(machine, schedule, max_cycles, False, record_trace)


def reference_run(machine: Machine, schedule, max_cycles: int = 10_000_000, *,
                  record_trace: bool = False) -> ArchSnapshot:
    """Same schedule with no speculation, no caches and 1-cycle memory."""
    return reference_result(machine, schedule, max_cycles, record_trace=record_trace).final_snapshot


def reference_result(machine: Machine, schedule, max_cycles: int = 10_000_000, *,
                     record_trace: bool = True) -> RunResult:
    return _drive(machine, schedule, max_cycles, True, record_trace)


def write_trace(events: Iterable[TraceEvent], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ev in events:
            fh.write(ev.to_line() + "\n")


def read_trace(path) -> list[TraceEvent]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            cycle, ctx, pc, kind, detail = line.rstrip("\n").split("\t", 4)
            out.append(TraceEvent(int(cycle), int(ctx), int(pc, 16), kind, detail))
    return out
