"""Per-stage timing samples, in the five-row shape used for the overhead table."""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field

STAGES = ("unit_start", "unit_end", "parse", "transmit", "other")
STAGE_LABELS = {
    "unit_start": ("worker shim", "Transmit unit_start message"),
    "unit_end": ("worker shim", "Transmit unit_end message"),
    "parse": ("capture proxy", "Parse SQL query"),
    "transmit": ("capture proxy", "Transmit SQL provenance"),
    "other": ("capture proxy", "Other (incl. proxy cost)"),
}


def percentile(samples: list[float], q: float) -> float:
    if not samples:
        return 0.0
    ordered = sorted(samples)
    k = min(len(ordered) - 1, max(0, int(round(q * (len(ordered) - 1)))))
    return ordered[k]


def describe(samples: list[float]) -> dict[str, float]:
    """Summary in milliseconds for samples recorded in seconds."""
    ms = [s * 1000.0 for s in samples]
    return {
        "n": len(ms),
        "mean_ms": statistics.fmean(ms) if ms else 0.0,
        "p50_ms": percentile(ms, 0.50),
        "p95_ms": percentile(ms, 0.95),
        "max_ms": max(ms) if ms else 0.0,
    }


@dataclass
class StageTimings:
    samples: dict[str, list[float]] = field(default_factory=lambda: {s: [] for s in STAGES})

    def record(self, stage: str, seconds: float) -> None:
        self.samples[stage].append(seconds)

    def summary(self) -> dict[str, dict[str, float]]:
        return {s: describe(self.samples[s]) for s in STAGES}

    def table(self) -> str:
        rows = [f"{'Location':<14} {'Operation':<30} {'Mean':>9} {'p95':>9} {'n':>6}"]
        for s in STAGES:
            loc, op = STAGE_LABELS[s]
            d = describe(self.samples[s])
            rows.append(f"{loc:<14} {op:<30} {d['mean_ms']:>7.3f}ms {d['p95_ms']:>7.3f}ms {d['n']:>6}")
        return "\n".join(rows)
