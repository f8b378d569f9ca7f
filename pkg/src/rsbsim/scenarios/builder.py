"""Assemble, map and run the attack scenarios.

Each scenario is a set of assembly files (one per context, plus kernel and
enclave images) and a setup routine that lays out memory.  Addresses the
programs need are injected as ``.equ`` lines in front of each source, so the
same text works for any cache geometry or code transform.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional

from ..defenses import DefenseConfig, transform_image
from ..isa import ProgramImage, assemble
from ..machine import (KERNEL_STACK_BASE, PAGE_SIZE, USER_STACK_BASE, Domain, Machine,
                       MachineConfig, Mode, create_machine, map_region, spawn_context)
from ..pipeline import run
from . import receivers as rx

SCENARIO_IDS = ("attack1", "attack2a", "attack2b", "attack2c", "attack3", "attack4", "spectre_v1")
MATRIX_ATTACKS = SCENARIO_IDS[:6]
DEFAULT_SECRET = bytes([0x54, 0x48, 0x45, 0x53, 0x45, 0x43, 0x52, 0x54])

# memory layout
USER_CODE = 0x1000
VICTIM_CODE = 0x3000
USER_DATA = 0x8000
CTRL_PAGE = 0x9000
SECRET_PAGE = 0xA000
PROBE_BASE = 0x2_0000
EVICT_BASE = 0x10_0000
KERNEL_DATA = 0xFFFF_0000
KERNEL_CODE = 0xFFFF_1000
ENCLAVE_CODE = 0xE000_0000
ENCLAVE_DATA = 0xE000_1000
ENCLAVE_STACK = 0xE000_2000
# data sits one line into its page so no line shares a monitored probe set
DATA_OFFSET = 0x40
CTRL = CTRL_PAGE + DATA_OFFSET
SIGN_BIT = 1 << 63

STEP_BUDGET = 20_000
CYCLE_BUDGET = 1_000_000
SV1_ARRAY_SIZE = 16
SV1_TRAIN = 6


@dataclass(frozen=True)
class Secret:
    data: bytes
    address: int
    domain: Domain
    address_space: Optional[int]  # None for global pages


@dataclass(frozen=True)
class ContextSpec:
    name: str
    source: str  # asm asset file name
    mode: Mode = Mode.USER
    address_space: int = 0
    base: int = USER_CODE


@dataclass
class Scenario:
    id: str
    contexts: tuple
    schedule: tuple  # ((context index, step budget), ...)
    secret: Secret
    receiver: str = "flush_reload"  # or "prime_probe"
    probe_base: int = PROBE_BASE
    requirements: tuple = ()
    plan: tuple = ()  # attack steps, in order
    kernel_source: Optional[str] = None
    syscalls: dict = field(default_factory=dict)  # number -> kernel label
    enclave_source: Optional[str] = None
    params: dict = field(default_factory=dict)

    def sources(self) -> dict:
        out = {c.name: load_source(c.source) for c in self.contexts}
        if self.kernel_source:
            out["kernel"] = load_source(self.kernel_source)
        if self.enclave_source:
            out["enclave"] = load_source(self.enclave_source)
        return out

    @property
    def programs(self) -> dict:
        """Images assembled for the default machine configuration."""
        return prepare(self, MachineConfig()).images


@dataclass(frozen=True)
class AttackOutcome:
    scenario: str
    success: bool
    recovered: bytes
    accuracy: float
    cycles: int
    bypassed: bool
    byte_values: tuple = ()  # per byte: decoded value or None when ambiguous
    halt_reasons: tuple = ()


def load_source(name: str) -> str:
    return resources.files(__package__).joinpath("asm", name).read_text(encoding="utf-8")


_PARAMS = {"secret", "receiver", "secret_in_kernel", "train"}


def build_scenario(id: str, params: Optional[dict] = None) -> Scenario:
    """Wire up scenario ``id``; ``params`` may override the secret and receiver."""
    params = dict(params or {})
    unknown = set(params) - _PARAMS
    if unknown:
        raise ValueError(f"unknown scenario parameters: {sorted(unknown)}")
    if id not in SCENARIO_IDS:
        raise ValueError(f"unknown scenario {id!r}; expected one of {', '.join(SCENARIO_IDS)}")
    data = bytes(params.get("secret", DEFAULT_SECRET))
    if not data:
        raise ValueError("secret must not be empty")
    receiver = params.get("receiver", "flush_reload")
    if receiver not in ("flush_reload", "prime_probe"):
        raise ValueError(f"unknown receiver {receiver!r}")
    user_secret = Secret(data, SECRET_PAGE + DATA_OFFSET, Domain.USER, 0)
    kernel_secret = Secret(data, KERNEL_DATA + DATA_OFFSET, Domain.KERNEL, None)
    one = ((0, STEP_BUDGET),)
    pingpong = ((0, STEP_BUDGET), (1, STEP_BUDGET), (0, STEP_BUDGET))

    if id == "attack1":
        secret = kernel_secret if params.get("secret_in_kernel") else user_secret
        sc = Scenario(id, (ContextSpec("attacker", "attack1.s"),), one, secret,
                      requirements=("secret in a region the program never reads architecturally",),
                      plan=("call gadget", "gadget pops its frame", "flush return address",
                            "ret speculates into payload", "probe"))
    elif id == "attack2a":
        sc = Scenario(id, (ContextSpec("victim", "attack2a_victim.s", base=VICTIM_CODE),
                           ContextSpec("attacker", "attack2a_attacker.s")), pingpong, user_secret,
                      requirements=("colluding threads share an address space",),
                      plan=("victim calls and yields", "attacker flushes victim return address",
                            "attacker plants payload", "victim returns", "probe"))
    elif id == "attack2b":
        sc = Scenario(id, (ContextSpec("victim", "attack2b_victim.s", base=VICTIM_CODE),
                           ContextSpec("attacker", "attack2b_attacker.s")), pingpong, kernel_secret,
                      requirements=("smep-disabled", "smap-disabled", "colluding threads share an address space"),
                      plan=("victim blocks in a system call", "attacker evicts victim kernel stack line",
                            "attacker plants payload", "victim returns in kernel mode", "probe"),
                      kernel_source="attack2b_kernel.s", syscalls={2: "handler"})
    elif id == "attack2c":
        sc = Scenario(id, (ContextSpec("victim", "attack2c_victim.s", address_space=1,
                                       base=VICTIM_CODE),
                           ContextSpec("attacker", "attack2c_attacker.s", address_space=2)),
                      pingpong, Secret(data, SECRET_PAGE + DATA_OFFSET, Domain.USER, 1),
                      requirements=("gadget-address-known", "probe page shared read-only"),
                      plan=("victim calls and yields", "attacker evicts victim return address",
                            "attacker calls from the gadget address minus one", "victim returns",
                            "probe"))
    elif id == "attack3":
        sc = Scenario(id, (ContextSpec("host", "attack3_host.s"),), one,
                      Secret(data, ENCLAVE_DATA + DATA_OFFSET, Domain.ENCLAVE, 0),
                      requirements=("enclave shares the host address space",),
                      plan=("host plants payload", "host evicts enclave stack line", "eenter",
                            "enclave executes an unmatched ret", "probe"),
                      enclave_source="attack3_enclave.s")
    elif id == "attack4":
        sc = Scenario(id, (ContextSpec("attacker", "attack4_attacker.s"),), one, kernel_secret,
                      requirements=("smep-disabled", "smap-disabled", "kernel-stack-address-known"),
                      plan=("plant payload", "evict kernel stack line", "syscall",
                            "kernel executes an unmatched ret", "probe"),
                      kernel_source="attack4_kernel.s", syscalls={4: "handler"})
    else:
        sc = Scenario(id, (ContextSpec("attacker", "spectre_v1.s"),), one, user_secret,
                      requirements=("direction predictor trained in bounds",),
                      plan=("train in bounds", "flush array size", "call out of bounds", "probe"))
    sc.receiver = receiver
    sc.params = params
    return sc


# ---------------------------------------------------------------------------
# instantiation

@dataclass
class Setup:
    machine: Machine
    images: dict
    schedule: tuple  # in machine context ids
    context_ids: dict


def _user_stack_top(cid: int) -> int:
    return USER_STACK_BASE + 0x2000 * cid + PAGE_SIZE


def _kernel_sp(cid: int) -> int:
    return KERNEL_STACK_BASE + PAGE_SIZE * cid + PAGE_SIZE - 64


ENCLAVE_SP = ENCLAVE_STACK + PAGE_SIZE - 64


def _preamble(symbols: dict, org: Optional[int]) -> str:
    lines = [] if org is None else [f".org {org:#x}"]
    lines += [f".equ {k} {v:#x}" for k, v in symbols.items()]
    return "\n".join(lines) + "\n"


def _build(scenario: Scenario, name: str, symbols: dict, org: Optional[int],
           cfg: DefenseConfig) -> ProgramImage:
    src = _preamble(symbols, org) + scenario.sources()[name]
    return transform_image(assemble(src), cfg)


def _map_text(machine: Machine, image: ProgramImage, domain: Domain, space: Optional[int]) -> None:
    lo = image.base & ~(PAGE_SIZE - 1)
    hi = image.end + 1
    map_region(machine, lo, ((hi - lo + PAGE_SIZE - 1) // PAGE_SIZE) * PAGE_SIZE, "r-x",
               domain, space)


def _eviction(machine: Machine, target: int, space: int) -> dict:
    """Map an attacker buffer whose lines alias ``target``'s set."""
    geo = machine.cache.geometry
    stride = geo.sets * geo.line_size
    first = EVICT_BASE + (target % stride) // geo.line_size * geo.line_size
    pages = sorted({(first + k * stride) & ~(PAGE_SIZE - 1) for k in range(geo.ways)})
    for p in pages:
        if machine.page_at(space, p) is None:
            map_region(machine, p, PAGE_SIZE, "r--", Domain.USER, space)
    return {"EV0": first, "EVSTRIDE": stride, "WAYS": geo.ways}


def prepare(scenario: Scenario, config: MachineConfig) -> Setup:
    """Fresh machine with every image of ``scenario`` loaded and wired."""
    m = create_machine(config)
    cfg = config.defenses
    sec = scenario.secret
    map_region(m, CTRL_PAGE, PAGE_SIZE, "r--")
    probe_len = rx.PROBE_SLOTS * rx.PROBE_STRIDE
    map_region(m, PROBE_BASE, -(-probe_len // PAGE_SIZE) * PAGE_SIZE, "r--")
    if sec.domain is Domain.KERNEL:
        map_region(m, KERNEL_DATA, PAGE_SIZE, "rw-", Domain.KERNEL)
    elif sec.domain is Domain.USER:
        map_region(m, SECRET_PAGE, PAGE_SIZE, "r--", Domain.USER, sec.address_space)
    if sec.domain is not Domain.ENCLAVE:
        m.poke(sec.address, sec.data, sec.address_space)

    common = {"PROBE": PROBE_BASE, "STRIDE": rx.PROBE_STRIDE, "CTRL": CTRL,
              "SECRET": sec.address}
    images: dict = {}
    sid = scenario.id

    kernel = None
    if scenario.kernel_source:
        kernel = _build(scenario, "kernel", {"SECRET": sec.address}, KERNEL_CODE, cfg)
        _map_text(m, kernel, Domain.KERNEL, None)
        m.load_image(kernel)
        for n, label in scenario.syscalls.items():
            m.syscalls[n] = kernel.labels[label]
        images["kernel"] = kernel
    enclave = None
    if scenario.enclave_source:
        enclave = _build(scenario, "enclave", {"SECRET": sec.address}, ENCLAVE_CODE, cfg)
        _map_text(m, enclave, Domain.ENCLAVE, 0)
        m.load_image(enclave, 0)
        map_region(m, ENCLAVE_DATA, PAGE_SIZE, "rw-", Domain.ENCLAVE, 0)
        map_region(m, ENCLAVE_STACK, PAGE_SIZE, "rw-", Domain.ENCLAVE, 0)
        m.poke(sec.address, sec.data, sec.address_space)
        m.poke_word(ENCLAVE_SP, enclave.labels["exit_stub"], 0)
        images["enclave"] = enclave

    ids = {}
    for cid, spec in enumerate(scenario.contexts):
        sym = dict(common)
        org = spec.base
        space = spec.address_space
        if sid == "attack2a" and spec.name == "attacker":
            sym["VICTIM_RA"] = _user_stack_top(ids["victim"]) - 8
        elif sid == "attack2b" and spec.name == "attacker":
            # kwait's return address: two frames below the syscall stack pointer
            sym.update(_eviction(m, _kernel_sp(ids["victim"]) - 16, space))
        elif sid == "attack2c" and spec.name == "attacker":
            victim_img = images["victim"]
            sym["GADGET_SITE"] = victim_img.labels["gadget"] - 1
            sym.update(_eviction(m, _user_stack_top(ids["victim"]) - 8, space))
            org = None
        elif sid == "attack3":
            sym["ENCLAVE_ENTRY"] = enclave.entry
            sym.update(_eviction(m, ENCLAVE_SP, space))
        elif sid == "attack4":
            sym.update(_eviction(m, _kernel_sp(cid), space))
        elif sid == "spectre_v1":
            map_region(m, USER_DATA, PAGE_SIZE, "rw-", Domain.USER, space)
            size_addr = USER_DATA + DATA_OFFSET
            array1 = USER_DATA + 2 * DATA_OFFSET
            m.poke_word(size_addr, SV1_ARRAY_SIZE, space)
            m.poke(array1, bytes(range(SV1_ARRAY_SIZE)), space)
            sym.update(SIZE=size_addr, ARRAY1=array1, SECRET_OFF=sec.address - array1,
                       SIGN=SIGN_BIT, SLOT1=PROBE_BASE + rx.PROBE_STRIDE,
                       TRAIN=int(scenario.params.get("train", SV1_TRAIN)))
        img = _build(scenario, spec.name, sym, org, cfg)
        if m.page_at(space, img.base) is None:
            _map_text(m, img, Domain.USER, space)
        real = spawn_context(m, img, spec.mode, space)
        assert real == cid
        ids[spec.name] = cid
        images[spec.name] = img
        if kernel is not None and "sysret_stub" in kernel.labels:
            m.poke_word(_kernel_sp(cid), kernel.labels["sysret_stub"])
        if enclave is not None:
            m.contexts[cid].enclave_sp = ENCLAVE_SP
    return Setup(m, images, scenario.schedule, ids)


def machine_config(preset: str = "none", cfg: Optional[DefenseConfig] = None, seed: int = 0,
                   base: Optional[MachineConfig] = None) -> MachineConfig:
    mc = base if base is not None else MachineConfig.from_preset(preset)
    if cfg is not None:
        mc = dataclasses.replace(mc, defenses=cfg)
    return dataclasses.replace(mc, seed=seed)


def run_attack(scenario: Scenario, cfg: Optional[DefenseConfig] = None, machine_preset: str = "none",
               seed: int = 0, *, config: Optional[MachineConfig] = None,
               threshold: Optional[int] = None, record_trace: bool = False,
               trace_sink: Optional[list] = None,
               probe_profile: Optional[list] = None) -> AttackOutcome:
    """Leak the scenario's secret byte by byte under ``cfg``.

    ``cfg`` defaults to the preset's defenses; ``config`` overrides the
    hardware parameters of the preset.  Each byte takes two passes of the
    schedule: the first warms the lines the payload depends on, the second
    transmits.  ``trace_sink`` collects trace events and ``probe_profile``
    one list of receiver latencies per byte.
    """
    setup = prepare(scenario, machine_config(machine_preset, cfg, seed, config))
    m = setup.machine
    probe = scenario.probe_base
    use_pp = scenario.receiver == "prime_probe"
    evsets = rx.eviction_sets(m, probe) if use_pp else None
    values = []
    reasons = []
    rx.flush_probe(m, probe)
    for index in range(len(scenario.secret.data)):
        m.poke_word(CTRL, index)
        for transmit in (False, True):
            if transmit:
                if use_pp:
                    rx.prime(m, evsets)
                else:
                    rx.flush_probe(m, probe)
            for ctx in m.contexts:
                ctx.reset(m.clock)
            res = run(m, setup.schedule, m.clock + CYCLE_BUDGET,
                      record_trace=record_trace or trace_sink is not None)
            reasons.append(res.halt_reason)
            if trace_sink is not None:
                trace_sink.extend(res.trace)
        lats = [] if probe_profile is not None else None
        try:
            if use_pp:
                values.append(rx.receive_prime_probe(m, evsets, threshold, lats))
            else:
                values.append(rx.receive_flush_reload(m, probe, threshold, lats))
        except rx.AmbiguousRead:
            values.append(None)
        if lats is not None:
            probe_profile.append(lats)
    truth = scenario.secret.data
    correct = sum(v == t for v, t in zip(values, truth))
    accuracy = correct / len(truth)
    success = correct == len(truth)
    recovered = bytes(0 if v is None else v for v in values)
    return AttackOutcome(scenario.id, success, recovered, accuracy, m.clock, success,
                         tuple(values), tuple(reasons))
