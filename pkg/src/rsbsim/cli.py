"""Command-line front end: ``rsbsim run|matrix|selftest|trace``."""
from __future__ import annotations

import argparse
import sys
from typing import Optional

from .defenses import iter_cli_flags, parse_defense_list
from .machine import MachineConfig
from .matrix import run_matrix
from .pipeline import write_trace
from .scenarios import SCENARIO_IDS, build_scenario, machine_config, run_attack
from .selftest import SOURCES, UNDERFILL_MODES, run_selftests

PRESET_NAMES = ("none", "xeon", "skylake", "fully-patched", "amd")


def _preset(text: str) -> str:
    key = text.replace("_", "-")
    if key not in PRESET_NAMES:
        raise argparse.ArgumentTypeError(f"unknown preset {text!r} (choose from {', '.join(PRESET_NAMES)})")
    return key.replace("-", "_")


def _secret(text: str) -> bytes:
    try:
        data = bytes.fromhex(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"secret must be hex, got {text!r}") from None
    if not data:
        raise argparse.ArgumentTypeError("secret must not be empty")
    return data


def _attack_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scenario", required=True, choices=SCENARIO_IDS)
    p.add_argument("--preset", type=_preset, default=None,
                   help="machine preset (default none, or the --config file)")
    p.add_argument("--defense", default="", help="comma-separated defenses added to the preset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="machine config file (key = value lines)")
    p.add_argument("--receiver", choices=("flush_reload", "prime_probe"), default="flush_reload")
    p.add_argument("--secret", type=_secret, help="secret bytes as hex")
    p.add_argument("--kernel-secret", action="store_true",
                   help="attack1 only: place the secret in kernel memory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rsbsim", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("run", help="run one attack scenario")
    _attack_args(p)
    p.add_argument("--trace", help="write the execution trace (TSV) to this path")
    p.add_argument("--figure", help="write a probe-latency plot to this path")

    p = sub.add_parser("trace", help="dump the trace of one scenario run")
    _attack_args(p)
    p.add_argument("--output", help="trace file (default stdout)")

    p = sub.add_parser("matrix", help="attack vs defense matrix")
    p.add_argument("--preset", type=_preset, default="xeon")
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="machine config file; its hardware parameters are used")
    p.add_argument("--output", help="write the report here instead of stdout")
    p.add_argument("--figure", help="write a heatmap of the matrix to this path")

    p = sub.add_parser("selftest", help="misspeculation source demonstrations")
    p.add_argument("--source", choices=SOURCES + ("all",), default="all")
    p.add_argument("--underfill", choices=UNDERFILL_MODES)
    p.add_argument("--refill", choices=("on", "off"))
    return parser


def _machine_config(args, parser) -> MachineConfig:
    if args.config and args.preset:
        parser.error("--config and --preset are mutually exclusive")
    try:
        if args.config:
            base = MachineConfig.from_file(args.config)
        else:
            base = MachineConfig.from_preset(args.preset or "none")
        defenses = parse_defense_list(args.defense, base.defenses)
    except (OSError, ValueError, KeyError) as exc:
        parser.error(str(exc))
    return machine_config(base.preset, defenses, args.seed, base)


def _scenario(args, parser):
    params = {"receiver": args.receiver}
    if args.secret is not None:
        params["secret"] = args.secret
    if args.kernel_secret:
        if args.scenario != "attack1":
            parser.error("--kernel-secret applies to attack1 only")
        params["secret_in_kernel"] = True
    return build_scenario(args.scenario, params)


def _attack(args, parser, trace_sink=None, profile=None):
    mc = _machine_config(args, parser)
    sc = _scenario(args, parser)
    if sc.receiver == "prime_probe" and mc.cache_sets < 1024:
        parser.error("prime_probe needs cache_sets >= 1024 (256 distinct probe sets)")
    outcome = run_attack(sc, seed=args.seed, config=mc, trace_sink=trace_sink, probe_profile=profile)
    return mc, sc, outcome


def cmd_run(args, parser, out) -> int:
    trace = [] if args.trace else None
    profile = [] if args.figure else None
    mc, sc, o = _attack(args, parser, trace, profile)
    flags = ",".join(iter_cli_flags(mc.defenses)) or "none"
    print(f"scenario={sc.id} preset={mc.preset} defenses={flags} config={mc.digest()} "
          f"seed={args.seed} receiver={sc.receiver}", file=out)
    verdict = "success" if o.success else "failure"
    print(f"result={verdict} recovered={o.recovered.hex()} expected={sc.secret.data.hex()} "
          f"accuracy={o.accuracy:.3f} cycles={o.cycles}", file=out)
    if trace is not None:
        write_trace(trace, args.trace)
        print(f"trace={args.trace} events={len(trace)}", file=out)
    if profile is not None:
        from .report import probe_figure
        thr = (mc.hit_latency + mc.miss_latency) // 2
        probe_figure(profile, sc.secret.data, args.figure, thr,
                     f"{sc.id} under {flags} ({verdict})")
        print(f"figure={args.figure}", file=out)
    return 0


def cmd_trace(args, parser, out) -> int:
    trace: list = []
    _attack(args, parser, trace)
    if args.output:
        write_trace(trace, args.output)
    else:
        for ev in trace:
            out.write(ev.to_line() + "\n")
    return 0


def cmd_matrix(args, parser, out) -> int:
    if args.jobs < 1:
        parser.error("--jobs must be at least 1")
    base = None
    if args.config:
        try:
            base = MachineConfig.from_file(args.config)
        except (OSError, ValueError, KeyError) as exc:
            parser.error(str(exc))
    report = run_matrix(args.preset, args.jobs, args.seed, base)
    text = report.to_csv() if args.format == "csv" else report.to_text()
    if args.output:
        with open(args.output, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        out.write(text)
    if args.figure:
        from .report import matrix_figure
        matrix_figure(report, args.figure)
        if args.format == "text":
            out.write(f"figure={args.figure}\n")
    return 0


def cmd_selftest(args, parser, out) -> int:
    refill = None if args.refill is None else args.refill == "on"
    results = run_selftests(args.source, args.underfill, refill)
    for r in results:
        print(r.line(), file=out)
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} passed", file=out)
    return 0 if not failed else 1


COMMANDS = {"run": cmd_run, "trace": cmd_trace, "matrix": cmd_matrix, "selftest": cmd_selftest}


def main(argv: Optional[list] = None, out=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return COMMANDS[args.verb](args, parser, out or sys.stdout)


if __name__ == "__main__":
    sys.exit(main())
