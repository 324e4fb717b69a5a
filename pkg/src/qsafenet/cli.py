from __future__ import annotations

import argparse
import logging
import sys

from .errors import QsafeError
from .harness import REFERENCE_CASES, emit_report, load_topology, run_case


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qsafenet", description="Adaptive quantum-safe key establishment testbed")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run the reference test cases against a topology")
    run.add_argument("--topology", default="fig2.json", help="topology JSON (bare name falls back to bundled files)")
    run.add_argument("--case", action="append", choices=[*REFERENCE_CASES, "all"], default=None,
                     help="test case id; repeatable; default all")
    run.add_argument("--iterations", type=int, default=100)
    run.add_argument("--mode", choices=["inproc", "net"], default="inproc")
    run.add_argument("--report", default=None, help="output directory for samples.csv and summary.json")
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    cases = args.case or ["all"]
    if "all" in cases:
        cases = list(REFERENCE_CASES)

    failed = False
    samples = []
    try:
        testbed = load_topology(args.topology, mode=args.mode, seed=args.seed)
    except QsafeError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    with testbed:
        for case in cases:
            src, dst, expected = REFERENCE_CASES[case]
            result = run_case(testbed, case, args.iterations, strict=False)
            samples.extend(result.samples)
            status = "PASS" if result.passed else "FAIL"
            print(f"{case} {src} -> {dst} expected {expected.name}: {result.passes}/{args.iterations} {status}")
            for failure in result.failures[:5]:
                print(f"    {failure}")
            failed |= not result.passed
    if args.report and samples:
        paths = emit_report(samples, args.report)
        print(f"report: {paths['csv']} {paths['json']}")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
