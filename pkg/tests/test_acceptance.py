"""Acceptance criteria, one test each, every test printing a PASS/FAIL line."""
from __future__ import annotations

import dataclasses
import io
import random
import time

import pytest

from corpus import random_case, scenario_case
from oracles import EXPECTED_MATRIX
from rsbsim.cli import main
from rsbsim.defenses import DefenseConfig, preset
from rsbsim.matrix import BYPASS, COLUMNS, run_matrix
from rsbsim.machine import CacheGeometry
from rsbsim.pipeline import reference_result, run
from rsbsim.scenarios import DEFAULT_SECRET, SCENARIO_IDS, build_scenario, machine_config, run_attack
from rsbsim.selftest import run_selftests
from test_cache import _lru_replay
from test_predictors import _ring_replay


@pytest.fixture
def verdict(capsys):
    def emit(number: int, name: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {name}: {detail}")
        assert ok, detail
    return emit


def test_c01_matrix(verdict):
    t0 = time.perf_counter()
    report = run_matrix("xeon")
    elapsed = time.perf_counter() - t0
    got = {a: tuple(report.outcome(a, c.key) == BYPASS for c in COLUMNS) for a in report.rows}
    wrong = [(a, c.key) for a in EXPECTED_MATRIX for k, c in enumerate(COLUMNS)
             if got[a][k] != EXPECTED_MATRIX[a][k]]
    verdict(1, "attack vs defense matrix on xeon", not wrong and elapsed < 10.0,
            f"{42 - len(wrong)}/42 cells match, {elapsed:.2f}s (limit 10s) wrong={wrong}")


def test_c02_preset_differential(verdict):
    xeon = run_attack(build_scenario("attack4"), machine_preset="xeon").success
    sky = run_attack(build_scenario("attack4"), machine_preset="skylake").success
    verdict(2, "attack4 xeon vs skylake", xeon and not sky,
            f"xeon success={xeon}, skylake success={sky}")


def test_c03_kernel_secret_differential(verdict):
    sc = build_scenario("attack1", {"secret_in_kernel": True})
    open_ = run_attack(sc, DefenseConfig(kpti=False, meltdown_patched=False)).success
    kpti = run_attack(sc, DefenseConfig(kpti=True)).success
    verdict(3, "attack1 on kernel data with and without kpti", open_ and not kpti,
            f"unpatched success={open_}, kpti success={kpti}")


def test_c04_enclave_pair(verdict):
    sc = build_scenario("attack3")
    fp = run_attack(sc, preset("fully_patched")).success
    fixed = run_attack(sc, preset("fully_patched").with_flags(rsb_refill_on_enclave_entry=True)).success
    verdict(4, "attack3 fully patched vs enclave refill", fp and not fixed,
            f"fully_patched success={fp}, with enclave refill success={fixed}")


def test_c05_fence_differential(verdict):
    cfg = DefenseConfig(lfence_pass=True)
    v1 = run_attack(build_scenario("spectre_v1"), cfg).success
    a1 = run_attack(build_scenario("attack1"), cfg).success
    verdict(5, "lfence pass alone", not v1 and a1,
            f"spectre_v1 success={v1}, attack1 success={a1}")


def test_c06_leak_fidelity(verdict):
    clean = run_attack(build_scenario("attack1"))
    t0 = time.perf_counter()
    correct = total = 0
    sc = build_scenario("attack1")
    for trial in range(1000):
        cfg = dataclasses.replace(machine_config("none"), jitter=True, seed=trial)
        out = run_attack(sc, config=cfg, seed=trial)
        correct += sum(v == t for v, t in zip(out.byte_values, DEFAULT_SECRET))
        total += len(DEFAULT_SECRET)
    elapsed = time.perf_counter() - t0
    acc = correct / total
    ok = clean.recovered == DEFAULT_SECRET and clean.accuracy == 1.0 and acc >= 0.99 and elapsed < 30
    verdict(6, "leak fidelity", ok,
            f"no jitter accuracy={clean.accuracy:.3f}; jitter byte accuracy={acc:.4f} over 1000 "
            f"trials (need 0.99), {elapsed:.1f}s (limit 30s)")


def test_c07_reference_equivalence(verdict):
    cases = [scenario_case(sid, p, 1) for sid in SCENARIO_IDS for p in ("none", "xeon")]
    cases += [random_case(seed) for seed in range(1000, 1200)]
    diffs = []
    for case in cases:
        spec = run(case.build(), case.schedule, record_trace=False)
        ref = reference_result(case.build(), case.schedule, record_trace=False)
        if spec.final_snapshot != ref.final_snapshot or spec.halt_reason != ref.halt_reason:
            diffs.append(case.name)
    verdict(7, "speculative run equals reference run", not diffs,
            f"{len(cases)} programs (14 scenario runs, 200 random), diffs={diffs}")


def test_c08_predictor_and_cache_oracles(verdict):
    errors = []
    for seed in range(1000):
        try:
            _ring_replay(seed, random.Random(seed).randint(1, 1000))
        except AssertionError as exc:
            errors.append(f"rsb seed {seed}: {exc}")
    for geo in (CacheGeometry(), CacheGeometry(4, 2, 64), CacheGeometry(16, 4, 32)):
        try:
            _lru_replay(99, 10_000, geo)
        except AssertionError as exc:
            errors.append(f"lru {geo}: {exc}")
    verdict(8, "RSB ring and LRU oracles", not errors,
            f"1000 RSB sequences, 3 x 10000-step cache traces, diffs={errors[:3]}")


def test_c09_selftests(verdict):
    results = run_selftests()
    failed = [r.line() for r in results if not r.passed]
    verdict(9, "misspeculation source selftests", len(results) == 16 and not failed,
            f"{len(results) - len(failed)}/{len(results)} passed {failed}")


def _matrix_csv(jobs: int) -> str:
    out = io.StringIO()
    main(["matrix", "--preset", "xeon", "--format", "csv", "--jobs", str(jobs)], out)
    return out.getvalue()


def test_c10_determinism(verdict):
    serial = _matrix_csv(1)
    parallel = _matrix_csv(8)
    repeats = {_matrix_csv(1) for _ in range(5)}
    ok = serial == parallel and repeats == {serial}
    verdict(10, "matrix CSV determinism", ok,
            f"jobs 1 == jobs 8: {serial == parallel}; 5 repeats identical: {repeats == {serial}}")
