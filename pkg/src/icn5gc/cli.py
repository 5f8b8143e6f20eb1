"""Command-line entry point: ``run`` a scenario or ``compare`` two."""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .report import IoError, emit_report
from .scenario import ParseError, ValidationError, bundled, load_scenario, run_scenario

EXIT_OK = 0
EXIT_ABORT = 1
EXIT_INVALID = 2


def _resolve_path(path: str) -> str:
    """Accept a file path or the bare name of a bundled fixture."""
    if os.path.exists(path):
        return path
    candidate = bundled(path if path.endswith(".scenario") else path + ".scenario")
    return candidate if os.path.exists(candidate) else path


def _write(path: str, text: str):
    try:
        with open(path, "w") as fh:
            fh.write(text)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _run(path: str, seed=None, max_time=None):
    cfg = load_scenario(_resolve_path(path))
    return run_scenario(cfg, seed=seed, max_time=max_time)


def _status(run) -> int:
    if not run.summary.quiescent or run.report.aborted:
        return EXIT_ABORT
    return EXIT_OK


def cmd_run(args) -> int:
    run = _run(args.scenario, args.seed, args.max_time)
    if args.trace:
        _write(args.trace, run.trace_text())
    if args.metrics:
        _write(args.metrics, run.metrics_text())
    emit_report(run.report, records_path=args.report)
    if run.report.handover is not None and args.steps:
        for rec in run.report.handover.records:
            print(rec)
    return _status(run)


def cmd_compare(args) -> int:
    a = _run(args.scenario_a, args.seed)
    b = _run(args.scenario_b, args.seed)
    emit_report(a.report, b.report, records_path=args.report)
    return max(_status(a), _status(b))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="icn5gc", description="Simulate ICN-enabled 5G core scenarios.")
    p.add_argument("-v", "--verbose", action="store_true", help="log warnings and progress")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one scenario")
    r.add_argument("scenario", help="scenario file, or the name of a bundled one")
    r.add_argument("--seed", type=int, help="override the scenario seed")
    r.add_argument("--trace", help="write the event trace here")
    r.add_argument("--metrics", help="write counters here, one 'name labels value' per line")
    r.add_argument("--max-time", type=int, dest="max_time", help="stop the clock at MS")
    r.add_argument("--report", help="write line-delimited report records here")
    r.add_argument("--steps", action="store_true", help="print the handover step log")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="run two scenarios and print them side by side")
    c.add_argument("scenario_a")
    c.add_argument("scenario_b")
    c.add_argument("--seed", type=int)
    c.add_argument("--report", help="write both reports' records here")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ParseError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except IoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
