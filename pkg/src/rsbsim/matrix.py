"""Attack-versus-defense matrix: one scenario run per cell."""
from __future__ import annotations

import csv
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

from .defenses import DefenseConfig
from .machine import MachineConfig
from .scenarios import MATRIX_ATTACKS, build_scenario, machine_config, run_attack


@dataclass(frozen=True)
class Column:
    key: str  # CSV spelling
    title: str
    flags: tuple


COLUMNS = (
    Column("lfence", "lfence", ("lfence_pass",)),
    Column("ibrs", "IBRS", ("ibrs",)),
    Column("stibp", "STIBP", ("stibp",)),
    Column("ibpb", "IBPB", ("ibpb_on_switch",)),
    Column("retpoline", "retpoline", ("retpoline",)),
    Column("rsb-refill", "RSB refilling", ("rsb_refill_on_kernel_entry",)),
    Column("smep-smap", "SMEP/SMAP", ("smep", "smap")),
)
COLUMN_KEYS = tuple(c.key for c in COLUMNS)

ROW_TITLES = {
    "attack1": "same process, frame-popping gadget",
    "attack2a": "colluding threads, user mode",
    "attack2b": "colluding threads, return in kernel",
    "attack2c": "cross-process, gadget in victim",
    "attack3": "unmatched return in an enclave",
    "attack4": "unmatched return in the kernel",
}

# Environmental preconditions per row.  Every cell starts from an empty
# defense set, so SMEP and SMAP are off everywhere except their own column.
ROW_REQUIREMENTS = {
    "attack2b": "SMEP and SMAP off outside the SMEP/SMAP column",
    "attack4": "SMEP and SMAP off outside the SMEP/SMAP column; kernel stack address known",
    "attack2c": "gadget address in the victim known to the attacker",
    "attack3": "enclave shares the host address space; no refill on enclave entry",
}

BYPASS = "BYPASS"
BLOCKED = "BLOCKED"


@dataclass(frozen=True)
class Cell:
    attack: str
    defense: str
    outcome: str
    cycles: int
    seed: int


@dataclass
class MatrixReport:
    preset: str
    config_hash: str
    seed: int
    cells: dict = field(default_factory=dict)  # (attack, column key) -> Cell
    rows: tuple = MATRIX_ATTACKS
    columns: tuple = COLUMNS

    def outcome(self, attack: str, column: str) -> str:
        return self.cells[(attack, column)].outcome

    def grid(self) -> list[list[str]]:
        return [[self.outcome(a, c.key) for c in self.columns] for a in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["attack", "defense", "outcome", "cycles", "seed"])
        for a in self.rows:
            for c in self.columns:
                cell = self.cells[(a, c.key)]
                w.writerow([a, c.key, cell.outcome, cell.cycles, cell.seed])
        return buf.getvalue()

    def to_text(self) -> str:
        widths = [max(len(c.title), len(BLOCKED)) for c in self.columns]
        head = "attack    " + "  ".join(c.title.ljust(w) for c, w in zip(self.columns, widths))
        lines = [f"attack vs defense matrix: preset {self.preset}, config {self.config_hash}, "
                 f"seed {self.seed}", head]
        for a, row in zip(self.rows, self.grid()):
            lines.append(a.ljust(10) + "  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip())
        lines.append("")
        lines.append("one defense enabled per cell; BYPASS = secret fully recovered")
        for a in self.rows:
            lines.append(f"  {a}: {ROW_TITLES[a]}")
            if a in ROW_REQUIREMENTS:
                lines.append(f"    requires: {ROW_REQUIREMENTS[a]}")
        return "\n".join(lines) + "\n"


def column(key: str) -> Column:
    for c in COLUMNS:
        if c.key == key:
            return c
    raise KeyError(f"unknown matrix column {key!r}")


def cell_defenses(column_key: str) -> DefenseConfig:
    return DefenseConfig().with_flags(**{f: True for f in column(column_key).flags})


def _run_cell(args) -> Cell:
    attack, key, base, seed = args
    outcome = run_attack(build_scenario(attack), cell_defenses(key), seed=seed, config=base)
    return Cell(attack, key, BYPASS if outcome.bypassed else BLOCKED, outcome.cycles, seed)


def hardware_config(preset: str = "xeon", base: Optional[MachineConfig] = None,
                    seed: int = 0) -> MachineConfig:
    """The preset's hardware parameters with every defense switched off."""
    return machine_config(preset, DefenseConfig(), seed, base)


def run_matrix(preset: str = "xeon", jobs: int = 1, seed: int = 0,
               base: Optional[MachineConfig] = None) -> MatrixReport:
    hw = hardware_config(preset, base, seed)
    tasks = [(a, c.key, hw, seed) for a in MATRIX_ATTACKS for c in COLUMNS]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, tasks))
    else:
        results = [_run_cell(t) for t in tasks]
    report = MatrixReport(hw.preset, hw.digest(), seed)
    for cell in sorted(results, key=lambda c: (MATRIX_ATTACKS.index(c.attack),
                                              COLUMN_KEYS.index(c.defense))):
        report.cells[(cell.attack, cell.defense)] = cell
    return report
