#!/usr/bin/env python3
"""Run every bundled scenario and write one JSON report per run."""
import argparse
import asyncio
import sys
from pathlib import Path

from provguard.harness import SCENARIO_ROOT, Scenario, run_scenario


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("names", nargs="*", help="scenario names (default: all bundled)")
    ap.add_argument("--out", default="results", help="report directory")
    ap.add_argument("--workers", type=int)
    args = ap.parse_args()

    names = args.names or sorted(p.parent.name for p in SCENARIO_ROOT.glob("*/scenario.json"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    failed = 0
    for name in names:
        sc = Scenario.load(name)
        report = asyncio.run(run_scenario(sc, workers=args.workers, quarantine=out / f"{name}.quarantine"))
        report.write(out / f"{name}.json")
        print(report.table(), end="\n\n")
        failed += not report.passed
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
