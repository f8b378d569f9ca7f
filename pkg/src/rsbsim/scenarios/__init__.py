"""Executable attack scenarios and the cache receivers that decode them."""
from .builder import (DEFAULT_SECRET, SCENARIO_IDS, MATRIX_ATTACKS, AttackOutcome, ContextSpec,
                      Scenario, Secret, Setup, build_scenario, load_source, machine_config,
                      prepare, run_attack)
from .receivers import (AmbiguousRead, default_threshold, eviction_sets, flush_probe, prime,
                        receive_flush_reload, receive_prime_probe)

__all__ = [
    "DEFAULT_SECRET", "SCENARIO_IDS", "MATRIX_ATTACKS", "AttackOutcome", "ContextSpec", "Scenario",
    "Secret", "Setup", "build_scenario", "load_source", "machine_config", "prepare", "run_attack",
    "AmbiguousRead", "default_threshold", "eviction_sets", "flush_probe", "prime",
    "receive_flush_reload", "receive_prime_probe",
]
