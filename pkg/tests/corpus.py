"""Program corpora shared by the pipeline, defense and acceptance tests."""
from __future__ import annotations

import dataclasses
import random
from typing import Callable, Optional

from oracles import DATA_BASE, KERNEL_PAGE, random_data, random_program
from rsbsim.defenses import FLAG_NAMES, DefenseConfig, transform_image
from rsbsim.isa import assemble
from rsbsim.machine import Domain, Machine, MachineConfig, create_machine, map_region, spawn_context
from rsbsim.scenarios import build_scenario, machine_config, prepare
from rsbsim.scenarios.builder import CTRL

SECOND_ORG = 0x3000
SCENARIO_PRESETS = ("none", "xeon", "fully_patched", "amd", "skylake")


@dataclasses.dataclass
class Case:
    """A reproducible machine factory plus its schedule."""

    name: str
    build: Callable[[], Machine]
    schedule: list


def random_config(rng: random.Random, seed: int) -> MachineConfig:
    flags = {n: rng.random() < 0.3 for n in FLAG_NAMES}
    return MachineConfig(
        rsb_capacity=rng.choice([4, 8, 16, 32]),
        rsb_underfill=rng.choice(["fallback", "none"]),
        cache_sets=rng.choice([4, 16, 64]),
        cache_ways=rng.choice([1, 2, 8]),
        hit_latency=rng.choice([1, 4]),
        miss_latency=rng.choice([20, 300]),
        rob_limit=rng.choice([4, 32, 224]),
        seed=seed,
        jitter=rng.random() < 0.3,
        defenses=DefenseConfig(**flags),
    )


def random_sources(seed: int) -> tuple[list[str], bytes]:
    rng = random.Random(seed)
    two = rng.random() < 0.35
    srcs = [random_program(rng, yields=two)]
    if two:
        srcs.append(random_program(rng, base=SECOND_ORG, n_funcs=2, yields=True))
    return srcs, random_data(rng)


def build_random(seed: int, sources: list[str], data: bytes, config: MachineConfig,
                 transform: Optional[DefenseConfig] = None) -> Machine:
    m = create_machine(config)
    map_region(m, 0x1000, 0x4000, "r-x", Domain.USER, 0)
    map_region(m, DATA_BASE, 0x1000, "rw-", Domain.USER, 0)
    map_region(m, KERNEL_PAGE, 0x1000, "rw-", Domain.KERNEL)
    m.poke(DATA_BASE, data, 0)
    m.poke(KERNEL_PAGE, bytes(range(1, 65)))
    for src in sources:
        img = assemble(src)
        img = transform_image(img, config.defenses if transform is None else transform)
        cid = spawn_context(m, img, address_space=0)
        m.contexts[cid].regs[9] = DATA_BASE
    return m


def random_case(seed: int) -> Case:
    sources, data = random_sources(seed)
    cfg = random_config(random.Random(seed * 7919 + 1), seed)
    if len(sources) == 1:
        schedule = [(0, 5000)]
    else:
        schedule = [(0, 25), (1, 25), (0, 40), (1, 5000), (0, 5000)]
    return Case(f"random{seed}", lambda: build_random(seed, sources, data, cfg), schedule)


def scenario_case(sid: str, preset: str, index: int = 0) -> Case:
    """One pass of a shipped scenario with byte ``index`` selected."""
    sc = build_scenario(sid)
    cfg = machine_config(preset)

    def make() -> Machine:
        m = prepare(sc, cfg).machine
        m.poke_word(CTRL, index)
        return m

    return Case(f"{sid}/{preset}", make, list(sc.schedule))
