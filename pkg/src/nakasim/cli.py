"""Command-line frontend.

    nakasim run (--preset NAME | --scenario FILE) [--seed N] [--trials N]
                [--override key=value ...] [--out DIR] [--jobs N] [--verify-only]
    nakasim verify TRACE [--property NAME ...] [--t-conf N] [--after N]
    nakasim presets

Exit status: 0 when every hard gate (or verdict) passes, 1 when a property
violation was witnessed, 2 on usage or configuration errors.
"""

from __future__ import annotations

import argparse
import json
import os
import re
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import verifiers
from .config import ConfigError, load_scenario, preset_names, with_changes
from .engine import run_experiment
from .trace import RunTrace, TraceFormatError

OUT_ENV = "NAKASIM_OUT_DIR"
DEFAULT_OUT = "nakasim-out"
REPORT_VERSION = 1
VERIFY_PROPERTIES = ("consistency", "liveness", "recovery_lemma")

EXIT_OK, EXIT_VIOLATION, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse exits 2 already; keep the contract explicit
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _safe(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.=-]+", "_", label)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n"


def cmd_run(scenario_path: Optional[str], overrides: Sequence[str], out_dir: Optional[str],
            preset: Optional[str] = None, seed: Optional[int] = None, trials: Optional[int] = None,
            jobs: int = 1, verify_only: bool = False) -> int:
    try:
        scn = load_scenario(path=scenario_path, preset=preset, overrides=list(overrides))
        changes = {}
        if seed is not None:
            changes["seed"] = seed
        if trials is not None:
            changes["trials"] = trials
        if changes:
            scn = with_changes(scn, **changes)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    root = Path(out_dir or os.environ.get(OUT_ENV) or DEFAULT_OUT) / _safe(scn.name)
    try:
        root.mkdir(parents=True, exist_ok=True)
        probe = root / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        print(f"error: output directory {root} is not writable: {exc.strerror}", file=sys.stderr)
        return EXIT_USAGE

    report = run_experiment(scn, jobs=jobs, keep_traces=not verify_only)
    traces = report.pop("traces", {})
    for (label, t), text in sorted(traces.items()):
        d = root / "traces" / _safe(label)
        d.mkdir(parents=True, exist_ok=True)
        (d / f"trial-{t:06d}.jsonl").write_text(text)
    report = {"version": REPORT_VERSION, **report}
    (root / "report.json").write_text(_dump(report))
    (root / "scenario.json").write_text(_dump(scn.model_dump(mode="json")))

    for v in report["variants"]:
        verdicts = ", ".join(f"{p} {d['pass']}/{d['pass'] + d['fail']}" for p, d in v["verdicts"].items())
        line = f"{v['variant']}: {verdicts}"
        if "attack" in v:
            line += f"; attack success {v['attack']['success_rate']:.3f}"
            if v["attack"].get("net_cost_mean") is not None:
                line += f", mean net cost {v['attack']['net_cost_mean']:.2f} USD"
        print(line)
    for g in report["hard_gates"]:
        print(f"gate {g['property']} [{g['variant']}]: {'PASS' if g['pass'] else 'FAIL'}")
    print(f"report: {root / 'report.json'}")
    return EXIT_OK if report["pass"] else EXIT_VIOLATION


def cmd_verify(trace_path: str, properties: Sequence[str], t_conf: Optional[int] = None,
               after: Optional[int] = None) -> int:
    unknown = [p for p in properties if p not in VERIFY_PROPERTIES]
    if unknown:
        print(f"error: unknown property {unknown[0]!r}; known properties: "
              f"{', '.join(VERIFY_PROPERTIES)}", file=sys.stderr)
        return EXIT_USAGE
    if "liveness" in properties and t_conf is None:
        print("error: liveness needs --t-conf", file=sys.stderr)
        return EXIT_USAGE
    try:
        trace = RunTrace.read(trace_path)
    except OSError as exc:
        print(f"error: cannot read trace {trace_path}: {exc.strerror}", file=sys.stderr)
        return EXIT_USAGE
    except TraceFormatError as exc:
        print(f"error: corrupt trace {trace_path}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    ok = True
    for prop in properties or ("consistency",):
        if prop == "consistency":
            v = verifiers.check_consistency(trace)
        elif prop == "liveness":
            v = verifiers.check_liveness(trace, t_conf, after=after)
        else:
            v = verifiers.check_recovery_lemma(trace)
        ok &= v.passed
        print(json.dumps(v.as_dict(), sort_keys=True))
    return EXIT_OK if ok else EXIT_VIOLATION


def cmd_presets() -> list[str]:
    names = preset_names()
    for name in names:
        desc = " ".join(load_scenario(preset=name).description.split())
        print(f"{name}\n    {desc}")
    return names


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="nakasim", description="Longest-chain consensus attack and recovery simulator.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run a scenario or preset")
    src = run.add_mutually_exclusive_group(required=True)
    src.add_argument("--scenario", help="path to a scenario YAML file")
    src.add_argument("--preset", help="name of a shipped preset")
    run.add_argument("--seed", type=int)
    run.add_argument("--trials", type=int)
    run.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                     help="set a scenario field, e.g. attack.attacker_power=20 (repeatable)")
    run.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
    run.add_argument("--jobs", type=int, default=1)
    run.add_argument("--verify-only", action="store_true",
                     help="write the report with verdicts but no per-trial traces")

    ver = sub.add_parser("verify", help="re-run verifiers on a stored trace")
    ver.add_argument("trace")
    ver.add_argument("--property", action="append", default=[], dest="properties",
                     help=f"one of {', '.join(VERIFY_PROPERTIES)} (repeatable; default consistency)")
    ver.add_argument("--t-conf", type=int)
    ver.add_argument("--after", type=int)

    sub.add_parser("presets", help="list shipped presets")
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        if args.jobs < 1 or (args.trials is not None and args.trials < 1):
            print("error: --jobs and --trials must be positive", file=sys.stderr)
            return EXIT_USAGE
        return cmd_run(args.scenario, args.override, args.out, preset=args.preset, seed=args.seed,
                       trials=args.trials, jobs=args.jobs, verify_only=args.verify_only)
    if args.command == "verify":
        return cmd_verify(args.trace, args.properties, args.t_conf, args.after)
    cmd_presets()
    return EXIT_OK

