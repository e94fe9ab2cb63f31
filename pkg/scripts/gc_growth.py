#!/usr/bin/env python3
"""Recorder graph size per request with and without garbage collection.

Writes a CSV (request, size_gc, size_nogc) so the growth curves can be
plotted with any tool.
"""
import argparse
import asyncio
import csv
import sys
from pathlib import Path

from provguard.harness import Scenario, run_scenario
from provguard.workload import WorkloadSpec, generate


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scenario", default="baseline-1k")
    ap.add_argument("--count", type=int, help="override the generated request count")
    ap.add_argument("--out", default="results/gc_growth.csv")
    args = ap.parse_args()

    sc = Scenario.load(args.scenario)
    if args.count:
        sc.requests = generate(WorkloadSpec(count=args.count, seed=20170501))
    on = asyncio.run(run_scenario(sc, gc=True))
    off = asyncio.run(run_scenario(sc, gc=False))

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["request", "size_gc", "size_nogc"])
        for i, (a, b) in enumerate(zip(on.size_by_request, off.size_by_request), 1):
            w.writerow([i, a, b])
    ratio = on.final_size / off.final_size if off.final_size else float("nan")
    print(f"final size with gc {on.final_size}, without {off.final_size} ({ratio:.1%})")
    for k in (100, 250, 500, len(on.size_by_request)):
        if k <= len(on.size_by_request):
            print(f"  peak by request {k:>5}: gc {max(on.size_by_request[:k]):>6}  no-gc {max(off.size_by_request[:k]):>6}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
