from __future__ import annotations

import csv
import io
from pathlib import Path

import pytest

from oracles import EXPECTED_MATRIX
from rsbsim.cli import main
from rsbsim.matrix import COLUMN_KEYS

GOLDEN = Path(__file__).parent / "golden" / "matrix_xeon.csv"


def _run(argv: list[str]) -> tuple[int, str]:
    out = io.StringIO()
    code = main(argv, out)
    return code, out.getvalue()


def _exit_code(argv: list[str]) -> int:
    with pytest.raises(SystemExit) as ei:
        main(argv, io.StringIO())
    return ei.value.code


def test_run_prints_header_and_result():
    code, text = _run(["run", "--scenario", "attack1", "--preset", "xeon"])
    head, result = text.splitlines()
    assert code == 0
    assert head.startswith("scenario=attack1 preset=xeon defenses=") and "config=" in head
    assert result.startswith("result=success recovered=5448455345435254 expected=5448455345435254")


def test_run_with_added_defense_fails():
    _, text = _run(["run", "--scenario", "attack2a", "--defense", "rsb-refill"])
    assert "defenses=rsb-refill" in text and "result=failure" in text


@pytest.mark.parametrize("argv", [
    ["run", "--scenario", "attack1", "--defense", "lfence,warp-drive"],
    ["run", "--scenario", "attack9"],
    ["run", "--scenario", "attack1", "--preset", "pentium"],
    ["run", "--scenario", "attack1", "--receiver", "prime_probe"],
    ["run", "--scenario", "attack2a", "--kernel-secret"],
    ["run", "--scenario", "attack1", "--secret", "zz"],
    ["matrix", "--jobs", "0"],
])
def test_bad_arguments_exit_with_usage_error(argv):
    assert _exit_code(argv) == 2


def test_config_and_preset_are_exclusive(tmp_path):
    cfg = tmp_path / "m.cfg"
    cfg.write_text("preset = xeon\ncache_sets = 1024\n")
    assert _exit_code(["run", "--scenario", "attack1", "--config", str(cfg), "--preset", "xeon"]) == 2


def test_config_file_enables_prime_probe(tmp_path):
    cfg = tmp_path / "m.cfg"
    cfg.write_text("preset = xeon\ncache_sets = 1024\n")
    code, text = _run(["run", "--scenario", "attack1", "--config", str(cfg),
                       "--receiver", "prime_probe"])
    assert code == 0 and "receiver=prime_probe" in text and "result=success" in text


def test_matrix_csv_matches_golden_file():
    _, text = _run(["matrix", "--preset", "xeon", "--format", "csv"])
    assert text == GOLDEN.read_text()


def test_golden_file_matches_the_expected_table():
    rows = list(csv.DictReader(GOLDEN.open()))
    got = {}
    for r in rows:
        got.setdefault(r["attack"], [None] * len(COLUMN_KEYS))[COLUMN_KEYS.index(r["defense"])] = \
            r["outcome"] == "BYPASS"
    assert got == {a: list(v) for a, v in EXPECTED_MATRIX.items()}


def test_matrix_is_independent_of_job_count_and_repetition():
    outs = {_run(["matrix", "--format", "csv", "--jobs", str(j)])[1] for j in (1, 8)}
    outs |= {_run(["matrix", "--format", "csv"])[1] for _ in range(5)}
    assert len(outs) == 1


def test_matrix_text_output_and_figure(tmp_path):
    fig = tmp_path / "m.png"
    code, text = _run(["matrix", "--figure", str(fig)])
    assert code == 0 and fig.stat().st_size > 0
    assert text.splitlines()[2].split()[:3] == ["attack1", "BYPASS", "BYPASS"]
    assert f"figure={fig}" in text


def test_run_writes_trace_and_figure(tmp_path):
    trace, fig = tmp_path / "t.tsv", tmp_path / "p.png"
    code, text = _run(["run", "--scenario", "attack1", "--secret", "41",
                       "--trace", str(trace), "--figure", str(fig)])
    assert code == 0 and fig.stat().st_size > 0
    events = int(text.split("events=")[1].split()[0])
    assert events == len(trace.read_text().splitlines()) > 0


def test_trace_verb_streams_events(tmp_path):
    code, text = _run(["trace", "--scenario", "attack3", "--secret", "00"])
    assert code == 0
    kinds = {line.split("\t")[3] for line in text.splitlines()}
    assert {"commit", "spec_issue", "spec_squash"} <= kinds
    out = tmp_path / "t.tsv"
    assert _run(["trace", "--scenario", "attack3", "--secret", "00", "--output", str(out)])[1] == ""
    assert out.read_text() == text


def test_selftest_verb():
    code, text = _run(["selftest"])
    assert code == 0 and text.splitlines()[-1] == "16/16 passed"
    code, text = _run(["selftest", "--source", "s4", "--refill", "on", "--underfill", "none"])
    assert code == 0 and "benign gadget" in text


def test_console_script_is_installed():
    import subprocess
    import sys
    res = subprocess.run([sys.executable, "-m", "rsbsim.cli", "selftest", "--source", "s1"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.endswith("4/4 passed\n")
