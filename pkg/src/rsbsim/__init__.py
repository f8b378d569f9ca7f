"""Deterministic simulator of return-stack-buffer speculation attacks."""
from .cache import AccessResult, CacheGeometry, CacheState
from .defenses import PRESETS, DefenseConfig, apply_lfence_pass, apply_retpoline, preset
from .isa import AsmError, Instruction, ProgramImage, assemble, disassemble
from .machine import (ArchSnapshot, Machine, MachineConfig, MachineError, Mode, context_switch,
                      create_machine, map_region, snapshot_arch_state, spawn_context)
from .pipeline import RunResult, SpecFrame, TraceEvent, reference_run, run
from .predictors import BranchTargetBuffer, DirectionPredictor, ReturnStackBuffer, Underfill
from .scenarios import AttackOutcome, Scenario, build_scenario, run_attack

__version__ = "0.1.0"

__all__ = [
    "AccessResult", "CacheGeometry", "CacheState", "PRESETS", "DefenseConfig", "apply_lfence_pass",
    "apply_retpoline", "preset", "AsmError", "Instruction", "ProgramImage", "assemble",
    "disassemble", "ArchSnapshot", "Machine", "MachineConfig", "MachineError", "Mode",
    "context_switch", "create_machine", "map_region", "snapshot_arch_state", "spawn_context",
    "RunResult", "SpecFrame", "TraceEvent", "reference_run", "run", "BranchTargetBuffer",
    "DirectionPredictor", "ReturnStackBuffer", "Underfill", "AttackOutcome", "Scenario",
    "build_scenario", "run_attack",
]
