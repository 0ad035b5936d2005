"""Command line entry point: ``netsync run|calibrate|report|presets``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import harness
from .metrics import PRESETS
from .scenario import ScenarioError, bundled_scenarios, load_scenario

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2


def _cmd_run(args: argparse.Namespace) -> int:
    sc = load_scenario(args.scenario)
    result = harness.run(sc, out=args.out, seed_override=args.seed_override)
    print(harness.format_summary(result.summary))
    print(f"wrote {result.directory}")
    if args.check and not result.all_pass:
        return EXIT_CHECK_FAILED
    return EXIT_OK


def _cmd_calibrate(args: argparse.Namespace) -> int:
    sc = load_scenario(args.scenario)
    try:
        cal = harness.calibrate_scenario(sc, args.target_power, lam_max=args.lam_max)
    except harness.NotBracketed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    for lam, p in cal.evaluations:
        print(f"  lambda={lam:<12.6g} power={p:.5f} W")
    print(json.dumps({"lambda": cal.lam, "avg_power_W": cal.power}))
    return EXIT_OK


def _cmd_report(args: argparse.Namespace) -> int:
    root = Path(args.dir)
    if not root.is_dir():
        print(f"error: {root} is not a directory", file=sys.stderr)
        return EXIT_CONFIG
    summary = harness.aggregate(root)
    print(harness.format_summary(summary))
    return EXIT_OK if summary["all_pass"] else EXIT_CHECK_FAILED


def _cmd_presets(args: argparse.Namespace) -> int:
    for name, th in PRESETS.items():
        parts = []
        if th.max_rtt_mean_us is not None:
            parts.append(f"rtt_mean <= {th.max_rtt_mean_us / 1000:g} ms")
        if th.max_rtt_max_us is not None:
            parts.append(f"rtt_max <= {th.max_rtt_max_us / 1000:g} ms")
        if th.max_one_way_us is not None:
            parts.append(f"one_way_max <= {th.max_one_way_us / 1000:g} ms")
        if th.min_delivery_ratio is not None:
            parts.append(f"delivery_ratio >= {th.min_delivery_ratio}")
        print(f"{name:<7} {'; '.join(parts) or '(thresholds from the scenario file)'}")
    names = sorted(bundled_scenarios())
    print(f"bundled scenarios: {', '.join(names)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="netsync", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a scenario and write its output bundle")
    p.add_argument("scenario", help="scenario file or bundled scenario name")
    p.add_argument("--seed-override", type=int, default=None, metavar="N")
    p.add_argument("--out", default=None, metavar="DIR", help="output root (default $NETSYNC_OUT or ./out)")
    p.add_argument("--check", action="store_true", help="exit 1 if any threshold verdict fails")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("calibrate", help="find the energy price giving a target JCCS power")
    p.add_argument("scenario")
    p.add_argument("--target-power", type=float, required=True, metavar="W")
    p.add_argument("--lam-max", type=float, default=1000.0)
    p.set_defaults(func=_cmd_calibrate)

    p = sub.add_parser("report", help="re-aggregate an output directory")
    p.add_argument("dir", metavar="DIR", help="out/<scenario> directory")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("presets", help="list threshold presets")
    p.add_argument("action", choices=["list"])
    p.set_defaults(func=_cmd_presets)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ScenarioError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
