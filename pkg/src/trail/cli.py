"""Command-line entry point: run scenarios, print size reports, verify logs."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

from .models import PRESETS, SizeModelParams, preset_report, scenario_report
from .simnet import SCENARIOS, EventLog, ScenarioError, load_scenario, simulate, verify_log


def _emit(report, fmt: str) -> str:
    return report.to_table() if fmt == "table" else report.to_text()


def cmd_run(args: argparse.Namespace) -> int:
    scenario = load_scenario(args.scenario, args.seed)
    sim = simulate(scenario)
    summary = sim.summary()
    report = scenario_report(scenario.to_dict(), summary)
    text = _emit(report, args.format)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        sim.log.write(out / "events.jsonl")
        (out / "report.json").write_text(report.to_json() + "\n")
        (out / ("report.tsv" if args.format == "table" else "report.txt")).write_text(text)
    sys.stdout.write(text)
    sys.stdout.write(f"log sha256 {sim.log.digest()}\n")
    return 1 if summary["violations"] else 0


def _parse_overrides(pairs: list[str]) -> dict:
    known = {f.name: f.type for f in fields(SizeModelParams)}
    out = {}
    for pair in pairs:
        key, _, value = pair.partition("=")
        if key not in known or not value:
            raise SystemExit(f"bad --set {pair!r}; keys: {', '.join(known)}")
        out[key] = float(value) if "." in value else int(value)
    return out


def cmd_report(args: argparse.Namespace) -> int:
    if args.log:
        log = EventLog.read(args.log)
        genesis, summary = log.of("genesis"), log.of("summary")
        if not genesis or not summary:
            print("log lacks genesis or summary records", file=sys.stderr)
            return 2
        report = scenario_report(genesis[0]["scenario"], summary[-1])
    else:
        params = replace(PRESETS[args.preset], **_parse_overrides(args.set))
        report = preset_report(params, f"preset {args.preset}")
    text = _emit(report, args.format)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "report.json").write_text(report.to_json() + "\n")
    sys.stdout.write(text)
    return 0


def cmd_verify(args: argparse.Namespace) -> int:
    log = EventLog.read(args.log)
    problems = verify_log(log)
    for p in problems:
        print(json.dumps(p, sort_keys=True))
    blocks = len(log.of("block"))
    print(f"{'FAIL' if problems else 'OK'}: {blocks} blocks replayed, {len(problems)} problems")
    return 1 if problems else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trail", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate a scenario and report sizes")
    run.add_argument("--scenario", required=True,
                     help=f"scenario file, or one of: {', '.join(SCENARIOS)}")
    run.add_argument("--seed", type=int, help="override the scenario seed")
    run.add_argument("--out", help="directory for events.jsonl and the report")
    run.add_argument("--format", choices=("text", "table"), default="text")
    run.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="evaluate the size models")
    rep.add_argument("--preset", choices=sorted(PRESETS), default="paper")
    rep.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                     help="override a model parameter, e.g. --set h_delete=50000")
    rep.add_argument("--log", help="report on a previous run's events.jsonl instead")
    rep.add_argument("--out", help="directory for report.json")
    rep.add_argument("--format", choices=("text", "table"), default="text")
    rep.set_defaults(func=cmd_report)

    ver = sub.add_parser("verify", help="replay an event log and re-check invariants")
    ver.add_argument("log", help="events.jsonl written by run")
    ver.set_defaults(func=cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (ScenarioError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
