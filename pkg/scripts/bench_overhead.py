#!/usr/bin/env python3
"""Added latency of the interposition pipeline over direct database access."""
import argparse
import asyncio
import json
import sys
from pathlib import Path

from provguard.harness import bench_overhead


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("-n", "--requests", type=int, default=1000)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--repeat", type=int, default=3, help="independent runs")
    ap.add_argument("--out", default="results/overhead.json")
    args = ap.parse_args()

    runs = []
    for seed in range(1, args.repeat + 1):
        rep = asyncio.run(bench_overhead(args.requests, seed=seed, workers=args.workers))
        print(f"# run {seed}\n{rep.table()}\n")
        runs.append(rep.to_json())
    added = [r["summary"]["added_mean_ms"] for r in runs]
    print(f"added mean per run (ms): {', '.join(f'{a:.3f}' for a in added)}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(runs, indent=1) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
