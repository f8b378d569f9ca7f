"""Demonstrations of the four RSB misspeculation sources.

Each check builds a tiny program, runs it on a fresh machine and inspects the
speculation frames.  The expected behaviour depends on the underfill mode and
on whether context switches refill the RSB, so every check is parameterised
by both.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

from .defenses import DefenseConfig
from .isa import assemble
from .machine import BENIGN_GADGET, PAGE_SIZE, MachineConfig, create_machine, map_region, spawn_context
from .pipeline import run
from .predictors import Owner

SOURCES = ("s1", "s2", "s3", "s4")
UNDERFILL_MODES = ("fallback", "none")
DATA = 0x8000


@dataclass(frozen=True)
class SelftestResult:
    source: str
    underfill: str
    refill: bool
    passed: bool
    detail: str

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.source} underfill={self.underfill} refill={str(self.refill).lower()}: {self.detail}"


def _machine(underfill: str, refill: bool, capacity: int = 16):
    cfg = MachineConfig(rsb_capacity=capacity, rsb_underfill=underfill,
                        defenses=DefenseConfig(rsb_refill_on_kernel_entry=refill))
    m = create_machine(cfg)
    map_region(m, 0x1000, 4 * PAGE_SIZE, "r-x")
    map_region(m, DATA, PAGE_SIZE, "rw-")
    return m


def _spawn(m, src: str, space: int = 0):
    img = assemble(src)
    return spawn_context(m, img, address_space=space), img


def _return_frames(frames, pc: Optional[int] = None):
    return [f for f in frames if f.cause == "return" and (pc is None or f.checkpoint[1] == pc)]


def check_s1(underfill: str, refill: bool, capacity: int = 16) -> SelftestResult:
    """Overfill drops the oldest entry; the extra return underfills."""
    depth = capacity + 1
    lines = [".entry main", "main:", "    call f0", "    halt"]
    for i in range(depth):
        lines.append(f"f{i}:")
        if i + 1 < depth:
            lines.append(f"    call f{i + 1}")
        lines.append(f"ret{i}:")
        lines.append("    ret")
    lines += ["decoy:", "    nop", "    halt"]
    m = _machine(underfill, refill, capacity)
    cid, img = _spawn(m, "\n".join(lines))
    last_ret = img.labels["ret0"]
    m.btb.train(last_ret, img.labels["decoy"], Owner(cid, 0))
    res = run(m, [(cid, 10_000)])
    frames = _return_frames(res.frames)
    matched = [f for f in frames if f.predicted_pc == f.true_pc]
    under = _return_frames(res.frames, last_ret)
    ok_over = len(matched) == capacity
    if underfill == "fallback":
        ok_under = len(under) == 1 and under[0].predicted_pc == img.labels["decoy"]
        want = "underflowing ret falls back to the BTB target"
    else:
        ok_under = not under
        want = "underflowing ret does not speculate"
    passed = ok_over and ok_under and res.halt_reason == "halt"
    detail = (f"{depth} nested calls, {len(matched)} returns predicted from the RSB; {want}"
              + ("" if passed else f" (frames at last ret: {len(under)})"))
    return SelftestResult("s1", underfill, refill, passed, detail)


_S2_VARIANTS = {
    "frame-pop": """
.entry main
main:
    call g
after:
    halt
g:
    call h
stale:
    halt
h:
    pop r1          ; drop h's own return address
    ret             ; software stack says after, RSB says stale
""",
    "push-jmp": """
.entry main
main:
    call outer
stale:
    halt
outer:
    push after      ; a call split into push and jmp
    jmp f
f:
    ret
after:
    halt
""",
    "pop-jmp": """
.entry main
main:
    call a
after:
    halt
a:
    call b
stale:
    ret
b:
    pop r1          ; a ret split into pop and jmp
    jmp r1
""",
}


def check_s2(underfill: str, refill: bool) -> SelftestResult:
    """Software-stack edits leave the RSB pointing at a stale address."""
    bad = []
    for name, src in _S2_VARIANTS.items():
        m = _machine(underfill, refill)
        cid, img = _spawn(m, src)
        res = run(m, [(cid, 1000)])
        stale, after = img.labels["stale"], img.labels["after"]
        hit = [f for f in _return_frames(res.frames)
               if f.predicted_pc == stale and f.true_pc == after and f.squashed]
        if not hit or res.halt_reason != "halt":
            bad.append(name)
    passed = not bad
    detail = ("ret speculates to the stale RSB entry in frame-pop, push-jmp and pop-jmp variants"
              if passed else f"no stale-entry speculation in: {', '.join(bad)}")
    return SelftestResult("s2", underfill, refill, passed, detail)


_S3_SRC = f"""
.equ FLAG {DATA + 0x40:#x}
.entry main
main:
    call outer
done:
    halt
outer:
    clflush [FLAG]
    load r1, [FLAG]     ; 0, slow
    cmp r1, 0
    jz skip             ; taken, predicted not taken
    call leaf           ; only ever executed transiently
pushed:
    halt
skip:
    ret
leaf:
    nop
    halt
"""


def check_s3(underfill: str, refill: bool) -> SelftestResult:
    """A call executed only on a squashed path leaves its RSB entry behind."""
    m = _machine(underfill, refill)
    cid, img = _spawn(m, _S3_SRC)
    res = run(m, [(cid, 1000)])
    squashed_call = any(f.cause == "cond_branch" and f.squashed and img.labels["outer"] + 4 in f.issued
                        for f in res.frames)
    rets = _return_frames(res.frames, img.labels["skip"])
    passed = (squashed_call and len(rets) == 1 and rets[0].predicted_pc == img.labels["pushed"]
              and res.halt_reason == "halt")
    detail = ("RSB entry from the squashed call predicts the next return" if passed
              else "speculative push did not survive the squash")
    return SelftestResult("s3", underfill, refill, passed, detail)


_S4_FIRST = """
.entry main
main:
    call f
left:
    halt
f:
    yield
    ret
"""
_S4_SECOND = """
.org 0x2000
.entry main
main:
    push done
    ret                 ; no matching call in this context
done:
    halt
"""


def check_s4(underfill: str, refill: bool) -> SelftestResult:
    """RSB contents left by one context are consumed by the next."""
    m = _machine(underfill, refill)
    c0, img0 = _spawn(m, _S4_FIRST)
    c1, img1 = _spawn(m, _S4_SECOND)
    res = run(m, [(c0, 100), (c1, 100), (c0, 100)])
    rets = _return_frames(res.frames, img1.labels["main"] + 1)
    predicted = rets[0].predicted_pc if rets else None
    expected = BENIGN_GADGET if refill else img0.labels["left"]
    passed = predicted == expected and res.halt_reason == "halt"
    what = "benign gadget after refill" if refill else "entry left by the previous context"
    got = "none" if predicted is None else f"{predicted:#x}"
    return SelftestResult("s4", underfill, refill, passed,
                          f"unmatched ret predicts the {what} (got {got})")


CHECKS: dict[str, Callable[[str, bool], SelftestResult]] = {
    "s1": check_s1, "s2": check_s2, "s3": check_s3, "s4": check_s4,
}


def run_selftests(source: str = "all", underfill: Optional[str] = None,
                  refill: Optional[bool] = None) -> list[SelftestResult]:
    names = SOURCES if source == "all" else (source,)
    for n in names:
        if n not in CHECKS:
            raise ValueError(f"unknown source {n!r}")
    modes = UNDERFILL_MODES if underfill is None else (underfill,)
    refills = (False, True) if refill is None else (refill,)
    return [CHECKS[n](mode, r) for n in names for mode in modes for r in refills]
