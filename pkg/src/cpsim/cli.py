"""Command-line front end: run scenarios, reproduce the attack/defense
matrix, validate files, and enumerate attack and defense vocabularies."""
from __future__ import annotations

import argparse
import json
import sys

from . import adversary, defenses, harness, report as rpt
from .engine import SimError
from .scenario import SchemaError, load_file


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="cpsim",
        description="deterministic control-plane security simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one scenario file")
    p_run.add_argument("file")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--trace", default=None, help="write the event trace (JSONL)")
    p_run.add_argument("--out", default=None,
                       help="directory for report.json, metrics.csv and figures")
    p_run.add_argument("--json", action="store_true",
                       help="print the machine-readable report instead of a summary")

    p_matrix = sub.add_parser("matrix", help="run a matrix spec")
    p_matrix.add_argument("spec")
    p_matrix.add_argument("--jobs", type=int, default=None,
                          help=f"parallel workers (default ${harness.JOBS_ENV} or 1)")
    p_matrix.add_argument("--check", default=None,
                          help="expected-verdicts JSON; exit 1 on any deviation")
    p_matrix.add_argument("--out", default=None,
                          help="directory for matrix.json, matrix.csv and matrix.png")
    p_matrix.add_argument("--seed", type=int, default=None)

    p_val = sub.add_parser("validate", help="schema-check a scenario file")
    p_val.add_argument("file")

    sub.add_parser("list-attacks", help="list attack kinds")
    sub.add_parser("list-defenses", help="list defense policy kinds")

    args = parser.parse_args(argv)

    if args.command == "list-attacks":
        for kind in adversary.ATTACK_KINDS:
            print(kind)
        return 0
    if args.command == "list-defenses":
        for kind in defenses.POLICY_KINDS:
            print(kind)
        return 0
    if args.command == "validate":
        try:
            load_file(args.file)
        except (SchemaError, adversary.PlacementViolation) as exc:
            print(f"invalid: {exc}", file=sys.stderr)
            return 2
        print("ok")
        return 0
    if args.command == "run":
        try:
            report = harness.run_scenario_file(
                args.file, seed=args.seed, trace_out=args.trace, out_dir=args.out)
        except (SchemaError, adversary.PlacementViolation) as exc:
            print(f"invalid scenario: {exc}", file=sys.stderr)
            return 2
        except (SimError, OSError) as exc:
            print(f"engine error: {exc}", file=sys.stderr)
            return 3
        if args.json:
            print(json.dumps(report, indent=2, sort_keys=True, default=str))
        else:
            print(rpt.human_summary(report))
        return 0  # exit status never encodes the verdict
    if args.command == "matrix":
        try:
            matrix, ok = harness.run_matrix(
                args.spec, jobs=args.jobs, check_path=args.check,
                out_dir=args.out, seed=args.seed)
        except (SchemaError, adversary.PlacementViolation, SimError, OSError) as exc:
            print(f"matrix error: {exc}", file=sys.stderr)
            return 2
        print(harness.matrix_summary(matrix))
        if args.check and not ok:
            return 1
        return 0
    return 2


if __name__ == "__main__":
    sys.exit(main())
