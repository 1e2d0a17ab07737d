"""
FSL simulator: command-line entry point
=======================================

Commands
--------
run <config>            execute every run of an experiment, write traces + summary
check-theory <config>   step-size caps, constants and bounds against the traces
report <dir>            comparison table over the trace files of a directory
report <name> --db F    the same table over runs stored in a registry
gradcheck               finite-difference check of every loss model

Exit status: 0 on success, 1 on I/O failure, a failed check or an unexpected
error, 2 on invalid input (configuration, contract or bound errors).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import traceback
from typing import List, Optional

# ---------------------------------------------------------------------------
# Ensure the project root is on sys.path so flat imports resolve regardless of
# the working directory the script is started from.
# ---------------------------------------------------------------------------
_PROJECT_ROOT = os.path.dirname(os.path.abspath(__file__))
if _PROJECT_ROOT not in sys.path:
    sys.path.insert(0, _PROJECT_ROOT)

from config import FederationError

APP_NAME    = "fsl-sim"
APP_VERSION = "1.0.0"
LOG_FORMAT  = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

logger = logging.getLogger(APP_NAME)


# ---------------------------------------------------------------------------
# Unhandled-exception handler
# ---------------------------------------------------------------------------

def _excepthook(exc_type, exc_value, exc_tb) -> None:
    """Print the traceback of unexpected errors and exit with status 1."""
    if issubclass(exc_type, KeyboardInterrupt):
        sys.__excepthook__(exc_type, exc_value, exc_tb)
        return
    tb_text = "".join(traceback.format_exception(exc_type, exc_value, exc_tb))
    print(f"{APP_NAME}: unexpected error\n{tb_text}", file=sys.stderr)
    sys.exit(1)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _load_spec(args):
    from experiment import parse_config

    return parse_config(args.config).with_overrides(seed=args.seed, out=args.out)


def cmd_run(args) -> int:
    from runner import run_experiment

    spec = _load_spec(args)
    outcome = run_experiment(spec)
    for row in outcome.summary.get("rows", []):
        print(f"{row['label']:<22} rolling_acc={row['final_rolling_acc']:.4f} "
              f"rise={row['rise_time']}")
    print(f"wrote {len(outcome.files)} files to {spec.out_dir}")
    return outcome.status


def cmd_check_theory(args) -> int:
    from export_manager import write_summary_json
    from runner import check_theory

    spec = _load_spec(args)
    checks = check_theory(spec, replicas=args.replicas)
    for check in checks:
        print(check.summary())
        for note in check.notes:
            print(f"  note: {note}")
    if args.json:
        write_summary_json({c.label: c.to_dict() for c in checks}, args.json)
    return 0 if all(c.ok for c in checks) else 1


def cmd_report(args) -> int:
    import export_manager
    from report import compare_report, load_registry_runs, load_trace_dir

    if args.db:
        runs = load_registry_runs(args.source, args.db)
    else:
        runs = load_trace_dir(args.source)
    report = compare_report(runs)
    print(report.to_text())
    if args.xlsx:
        export_manager.export_report_excel(report, args.xlsx)
    if args.pdf:
        export_manager.export_report_pdf(report, args.pdf)
    if args.json:
        export_manager.write_summary_json(report.to_dict(), args.json)
    return 0


def cmd_gradcheck(args) -> int:
    from runner import GRADCHECK_TOLERANCE, gradcheck, gradcheck_passed

    errors = gradcheck(points=args.points, seed=args.seed or 0)
    for kind, err in errors.items():
        status = "ok" if err <= GRADCHECK_TOLERANCE[kind] else "FAIL"
        print(f"{kind:<10} max rel. error {err:.3e}  (tol {GRADCHECK_TOLERANCE[kind]:.0e})  {status}")
    return 0 if gradcheck_passed(errors) else 1


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=APP_NAME, description="Federated learning with server learning simulator")
    parser.add_argument("--version", action="version", version=f"{APP_NAME} {APP_VERSION}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def overrides(p: argparse.ArgumentParser) -> None:
        p.add_argument("--seed", type=int, default=None, help="run a single master seed")
        p.add_argument("--out", default=None, help="output directory")

    p_run = sub.add_parser("run", help="execute an experiment")
    p_run.add_argument("config")
    overrides(p_run)
    p_run.set_defaults(func=cmd_run)

    p_theory = sub.add_parser("check-theory", help="evaluate bounds against traces")
    p_theory.add_argument("config")
    p_theory.add_argument("--json", default=None, help="write the check results as JSON")
    p_theory.add_argument("--replicas", type=int, default=1000,
                          help="first-round replays for the expected-descent check")
    overrides(p_theory)
    p_theory.set_defaults(func=cmd_check_theory)

    p_report = sub.add_parser("report", help="comparison table over a trace directory")
    p_report.add_argument("source", help="trace directory, or experiment name with --db")
    p_report.add_argument("--db", default=None, help="read runs from this registry instead")
    p_report.add_argument("--xlsx", default=None)
    p_report.add_argument("--pdf", default=None)
    p_report.add_argument("--json", default=None)
    p_report.set_defaults(func=cmd_report)

    p_grad = sub.add_parser("gradcheck", help="finite-difference check of the loss models")
    p_grad.add_argument("--points", type=int, default=10)
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.set_defaults(func=cmd_gradcheck)
    return parser


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def main(argv: Optional[List[str]] = None) -> int:
    sys.excepthook = _excepthook
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format=LOG_FORMAT,
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except FederationError as exc:
        print(f"{APP_NAME}: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"{APP_NAME}: I/O error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
