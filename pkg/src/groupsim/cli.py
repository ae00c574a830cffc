"""Command-line front end: run scenarios, check traces, report metrics.

Exit codes: 0 success, 1 check failure, 2 input/validation error,
3 horizon timeout (the run never went quiescent).
"""

from __future__ import annotations

import argparse
import sys

from .checks import TraceError, run_checks
from .metrics import compute_metrics
from .simnet import Scenario, ScenarioError, run_scenario
from .simnet.kernel import fmt_time


def _cmd_run(args: argparse.Namespace) -> int:
    try:
        scenario = Scenario.load(args.scenario)
    except ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"cannot read scenario: {exc}", file=sys.stderr)
        return 2
    if args.seed is not None:
        scenario = scenario.with_seed(args.seed)
    try:
        result = run_scenario(scenario, trace_path=args.trace_out)
    except ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return 2
    where = args.trace_out or "(in memory, use --trace-out to keep it)"
    print(f"records={result.record_count} end={fmt_time(result.end_time_us)} "
          f"sha256={result.trace_sha256} trace={where}")
    if not result.quiescent:
        print("run did not quiesce before the horizon; live events:", file=sys.stderr)
        for entry in result.live_events:
            print(f"  {entry}", file=sys.stderr)
        return 3
    return 0


def _cmd_check(args: argparse.Namespace) -> int:
    try:
        report = run_checks(args.trace, props=args.props)
    except TraceError as exc:
        print(f"trace error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(report.render())
    return 0 if report.passed else 1


def _cmd_report(args: argparse.Namespace) -> int:
    try:
        report = compute_metrics(args.trace)
    except TraceError as exc:
        print(f"trace error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(report.render())
    print()
    for line in report.machine_lines():
        print(line)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="groupsim",
        description="Deterministic group-membership and cluster-view simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a scenario file")
    p_run.add_argument("--scenario", required=True, help="scenario file path")
    p_run.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p_run.add_argument("--trace-out", default=None, help="write the trace to this file")
    p_run.set_defaults(fn=_cmd_run)

    p_check = sub.add_parser("check", help="evaluate invariants over a trace")
    p_check.add_argument("--trace", required=True, help="trace file path")
    p_check.add_argument(
        "--props", default="all",
        help="comma-separated properties: all, 5.1, 5.2, 5.3, 5.4, cascade, "
             "single-round, fifo, detection, lifecycle, transactions")
    p_check.set_defaults(fn=_cmd_check)

    p_report = sub.add_parser("report", help="summarize metrics from a trace")
    p_report.add_argument("--trace", required=True, help="trace file path")
    p_report.set_defaults(fn=_cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
