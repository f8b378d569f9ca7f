from __future__ import annotations

import itertools

import pytest

from rsbsim.selftest import SOURCES, UNDERFILL_MODES, check_s1, run_selftests


@pytest.mark.parametrize("source, underfill, refill",
                         list(itertools.product(SOURCES, UNDERFILL_MODES, (False, True))))
def test_every_source_demonstration_passes(source, underfill, refill):
    (res,) = run_selftests(source, underfill, refill)
    assert res.passed, res.line()
    assert res.line().startswith(f"PASS {source} underfill={underfill}")


@pytest.mark.parametrize("underfill", UNDERFILL_MODES)
def test_overfill_at_small_capacity(underfill):
    res = check_s1(underfill, False, capacity=4)
    assert res.passed and "5 nested calls, 4 returns" in res.detail


def test_full_sweep_has_sixteen_results():
    results = run_selftests()
    assert len(results) == 16 and all(r.passed for r in results)
    with pytest.raises(ValueError):
        run_selftests("s5")
