"""Mitigation toggles, the two code transforms, and privilege-transition hooks."""
from __future__ import annotations

import enum
from dataclasses import dataclass, fields, replace
from typing import Iterable

from .isa import Instruction, Mem, ProgramImage, Ref, Reg, COND_BRANCHES


@dataclass(frozen=True)
class DefenseConfig:
    lfence_pass: bool = False
    ibrs: bool = False
    stibp: bool = False
    ibpb_on_switch: bool = False
    retpoline: bool = False
    rsb_refill_on_kernel_entry: bool = False
    rsb_refill_on_enclave_entry: bool = False
    smep: bool = False
    smap: bool = False
    kpti: bool = False
    meltdown_patched: bool = False

    def with_flags(self, **flags: bool) -> "DefenseConfig":
        return replace(self, **flags)

    def enabled(self) -> tuple[str, ...]:
        return tuple(f.name for f in fields(self) if getattr(self, f.name))

    def as_dict(self) -> dict[str, bool]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


FLAG_NAMES = tuple(f.name for f in fields(DefenseConfig))

# CLI spelling -> config field
CLI_FLAGS = {
    "lfence": "lfence_pass",
    "ibrs": "ibrs",
    "stibp": "stibp",
    "ibpb": "ibpb_on_switch",
    "retpoline": "retpoline",
    "rsb-refill": "rsb_refill_on_kernel_entry",
    "rsb-refill-enclave": "rsb_refill_on_enclave_entry",
    "smep": "smep",
    "smap": "smap",
    "kpti": "kpti",
    "meltdown-patch": "meltdown_patched",
}

_MICROCODE = dict(ibrs=True, stibp=True, ibpb_on_switch=True)

PRESETS: dict[str, DefenseConfig] = {
    "none": DefenseConfig(),
    "fully_patched": DefenseConfig(**{n: n != "rsb_refill_on_enclave_entry" for n in FLAG_NAMES}),
    # Table-1 machines: retpoline + KPTI kernels with the Intel microcode
    # update; SMEP/SMAP off as in the demonstrated attacks.
    "xeon": DefenseConfig(retpoline=True, kpti=True, **_MICROCODE),
    "skylake": DefenseConfig(retpoline=True, kpti=True, rsb_refill_on_kernel_entry=True,
                             **_MICROCODE),
    "amd": DefenseConfig(retpoline=True, meltdown_patched=True),
}


def preset(name: str) -> DefenseConfig:
    key = name.replace("-", "_")
    if key not in PRESETS:
        raise KeyError(f"unknown defense preset {name!r}")
    return PRESETS[key]


def parse_defense_list(text: str, base: DefenseConfig = DefenseConfig()) -> DefenseConfig:
    """``"lfence,smep"`` -> ``base`` with those flags switched on."""
    flags = {}
    for item in filter(None, (t.strip() for t in text.split(","))):
        if item not in CLI_FLAGS:
            raise ValueError(f"unknown defense {item!r}; expected one of {', '.join(CLI_FLAGS)}")
        flags[CLI_FLAGS[item]] = True
    return base.with_flags(**flags)


# ---------------------------------------------------------------------------
# code transforms

def _relayout(image: ProgramImage, items: list[tuple[Instruction, list[str]]],
              old_to_new: dict[int, int]) -> ProgramImage:
    """Assign addresses to ``items`` and re-resolve every text reference.

    ``old_to_new`` maps old instruction indices to new indices.
    """
    base = image.base
    labels = {}
    for idx, (_, names) in enumerate(items):
        for name in names:
            labels[name] = base + idx
    old_end = image.end
    for name, addr in image.labels.items():
        if addr == old_end:
            labels[name] = base + len(items)

    def move(addr: int) -> int:
        if base <= addr < old_end:
            return base + old_to_new[addr - base]
        if addr == old_end:
            return base + len(items)
        return addr

    out = []
    for instr, _ in items:
        ops = []
        for op in instr.operands:
            if isinstance(op, Ref):
                if op.name in labels:
                    op = Ref(op.name, labels[op.name])
                elif op.name is None:
                    op = Ref(None, move(op.addr))
            ops.append(op)
        out.append(Instruction(instr.opcode, tuple(ops), instr.source_span))
    return ProgramImage(tuple(out), labels, base, move(image.entry), image.data_base,
                        image.data, dict(image.data_labels), dict(image.symbols))


def _names_by_index(image: ProgramImage) -> dict[int, list[str]]:
    out: dict[int, list[str]] = {}
    for name, addr in image.labels.items():
        if image.base <= addr < image.end:
            out.setdefault(addr - image.base, []).append(name)
    return out


def apply_lfence_pass(image: ProgramImage) -> ProgramImage:
    """Put an ``lfence`` on both successors of every conditional branch.

    Returns are left alone.
    """
    targets = set()
    for instr in image.instructions:
        if instr.opcode in COND_BRANCHES:
            t = instr.target()
            if image.base <= t < image.end:
                targets.add(t - image.base)
    names = _names_by_index(image)
    items: list[tuple[Instruction, list[str]]] = []
    old_to_new = {}
    for k, instr in enumerate(image.instructions):
        old_to_new[k] = len(items)
        if k in targets:
            items.append((Instruction("lfence"), names.get(k, [])))
            items.append((instr, []))
        else:
            items.append((instr, names.get(k, [])))
        if instr.opcode in COND_BRANCHES:
            items.append((Instruction("lfence"), []))
    return _relayout(image, items, old_to_new)


def _trampoline(reg: int, k: int) -> list[tuple[Instruction, list[str]]]:
    rt, cap = f"__rp_set_{k}", f"__rp_capture_{k}"
    return [
        (Instruction("call", (Ref(rt, 0),)), []),
        (Instruction("jmp", (Ref(cap, 0),)), [cap]),
        (Instruction("store", (Mem(15, 0), Reg(reg))), [rt]),
        (Instruction("ret"), []),
    ]


def apply_retpoline(image: ProgramImage) -> ProgramImage:
    """Replace each indirect ``jmp r``/``call r`` with a return trampoline.

    ``jmp r`` expands inline; ``call r`` becomes a direct call to a thunk
    appended after the original text.
    """
    names = _names_by_index(image)
    items: list[tuple[Instruction, list[str]]] = []
    tail: list[tuple[Instruction, list[str]]] = []
    old_to_new = {}
    k = 0
    for idx, instr in enumerate(image.instructions):
        old_to_new[idx] = len(items)
        labels = names.get(idx, [])
        if instr.is_indirect:
            reg = instr.operands[0].n
            if instr.opcode == "jmp":
                body = _trampoline(reg, k)
                body[0] = (body[0][0], labels)
                items.extend(body)
            else:
                thunk = f"__rp_thunk_{k}"
                items.append((Instruction("call", (Ref(thunk, 0),), instr.source_span), labels))
                body = _trampoline(reg, k)
                body[0] = (body[0][0], [thunk])
                tail.extend(body)
            k += 1
        else:
            items.append((instr, labels))
    return _relayout(image, items + tail, old_to_new)


def has_indirect_branches(image: ProgramImage) -> bool:
    return any(i.is_indirect for i in image.instructions)


def transform_image(image: ProgramImage, cfg: DefenseConfig) -> ProgramImage:
    """Apply the compile-time passes that ``cfg`` enables."""
    if cfg.retpoline:
        image = apply_retpoline(image)
    if cfg.lfence_pass:
        image = apply_lfence_pass(image)
    return image


# ---------------------------------------------------------------------------
# privilege-transition hooks

class Transition(enum.Enum):
    KERNEL_ENTRY = "kernel_entry"
    ENCLAVE_ENTRY = "enclave_entry"
    CONTEXT_SWITCH = "context_switch"


def on_privilege_transition(machine, kind: Transition) -> None:
    """Fire whichever of RSB refilling / IBPB the machine's defenses enable."""
    cfg = machine.defenses
    if kind is Transition.ENCLAVE_ENTRY:
        refill = cfg.rsb_refill_on_enclave_entry
    else:
        refill = cfg.rsb_refill_on_kernel_entry
    if refill:
        machine.rsb.refill(machine.benign_gadget)
        machine.emit("refill", f"{kind.value} benign={machine.benign_gadget:#x}")
    if kind is Transition.CONTEXT_SWITCH and cfg.ibpb_on_switch:
        machine.btb.barrier(machine.current)
        machine.emit("refill", f"ibpb survivor=ctx{machine.current}")


def iter_cli_flags(cfg: DefenseConfig) -> Iterable[str]:
    inverse = {v: k for k, v in CLI_FLAGS.items()}
    return (inverse[name] for name in cfg.enabled())
