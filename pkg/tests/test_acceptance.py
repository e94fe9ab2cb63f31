"""End-to-end acceptance checks, one PASS/FAIL line per criterion.

Thresholds are pinned here; each test prints its measured values so the
verdict line is useful in a plain `pytest -v` log.
"""

import asyncio
import statistics
import subprocess
import sys
import time
from pathlib import Path

import pytest

from challenges import ALIASES, CHALLENGES, CONCAT_QUERY, NESTED, WILDCARD
from oracle import Oracle

from provguard.extract import extract_sql
from provguard.harness import Scenario, bench_overhead, run_scenario
from provguard.metrics import STAGES, StageTimings
from provguard.model import EventKind, SqlObject
from provguard.workload import WorkloadSpec, generate

TESTS = Path(__file__).parent

# pinned tolerances
EXTRACT_BUDGET_S = 1.0
CHALLENGE_MIN = 30
CHALLENGE_BUDGET_S = 5.0
PROPERTY_BUDGET_S = 60.0
GC_RATIO_MAX = 0.35
GC_FLAT_FACTOR = 2.0
NOGC_GROWTH_MIN = 5.0
GC_BUDGET_S = 120.0
ADDED_MEAN_MAX_MS = 10.0
BENCH_REQUESTS = 1000
BENCH_BUDGET_S = 120.0
QUERY_MEAN_MAX_MS = 5.0
QUERY_COUNT = 1000
PARTITION_WORKERS = 8
PARTITION_MIN_EVENTS = 10_000


@pytest.fixture
def verdict(capsys):
    def emit(n, title, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n} {title}: {'PASS' if ok else 'FAIL'}  ({detail})")
        return ok

    return emit


def nesting_depth(sql):
    depth = best = 0
    toks = sql.upper().replace("(", " ( ").replace(")", " ) ").split()
    stack = []
    for i, t in enumerate(toks):
        if t == "(":
            sub = i + 1 < len(toks) and toks[i + 1] == "SELECT"
            stack.append(sub)
            depth += sub
            best = max(best, depth)
        elif t == ")" and stack:
            depth -= stack.pop()
    return best


def test_criterion_1_extraction_exactness(employee_schema, verdict):
    t0 = time.perf_counter()
    x = extract_sql(CONCAT_QUERY, employee_schema)
    dt = time.perf_counter() - t0
    want_reads = {SqlObject("employees"), SqlObject("employees", "employee_id"),
                  SqlObject("employees", "firstname"), SqlObject("employees", "lastname")}
    want_used = {SqlObject("employees", "salary")}
    ok = x.reads == want_reads and x.used == want_used and not x.writes and dt < EXTRACT_BUDGET_S
    verdict(1, "extraction exactness", ok,
            f"reads={sorted(map(str, x.reads))} used={sorted(map(str, x.used))} {dt * 1000:.1f}ms")
    assert ok


def test_criterion_2_challenge_suite(company_schema, verdict):
    oracle = Oracle(company_schema)
    t0 = time.perf_counter()
    disagree = []
    for sql in CHALLENGES:
        x = extract_sql(sql, company_schema)
        if (x.reads, x.used, x.writes) != oracle.run(sql):
            disagree.append(sql)
    dt = time.perf_counter() - t0
    deep = max(nesting_depth(s) for s in NESTED)
    covered = bool(WILDCARD) and bool(ALIASES) and deep >= 3
    ok = len(CHALLENGES) >= CHALLENGE_MIN and covered and not disagree and dt < CHALLENGE_BUDGET_S
    verdict(2, "parsing challenges vs oracle", ok,
            f"{len(CHALLENGES) - len(disagree)}/{len(CHALLENGES)} agree, wildcard={len(WILDCARD)} "
            f"alias={len(ALIASES)} nested={len(NESTED)} max depth={deep}, {dt:.2f}s")
    assert ok, disagree


PROPERTY_TESTS = [
    "test_model.py::test_round_trip",
    "test_extract.py::test_alias_erasure",
    "test_extract.py::test_alias_erasure_updates",
    "test_extract.py::test_ephemeral_blindness",
    "test_recorder.py::test_random_sequences_acyclic_and_monotone",
    "test_guard.py::test_evaluation_is_pure",
    "test_guard.py::test_evaluation_matches_reference",
    "test_guard.py::test_conjunctive_match_exhaustive",
]


def test_criterion_3_property_suites(verdict):
    t0 = time.perf_counter()
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *(str(TESTS / t) for t in PROPERTY_TESTS)],
        cwd=TESTS.parent, capture_output=True, text=True,
    )
    dt = time.perf_counter() - t0
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    ok = proc.returncode == 0 and dt < PROPERTY_BUDGET_S
    verdict(3, "property suites", ok, f"{tail}; {dt:.1f}s")
    assert ok, proc.stdout[-3000:]


def test_criterion_4_sqli_scenario(tmp_path, verdict):
    sc = Scenario.load("sqli-exfil")
    r = asyncio.run(run_scenario(sc, quarantine=tmp_path / "q.log"))
    injected = [o for o in r.outcomes if o.expect == "DENY"]
    benign = [o for o in r.outcomes if o.expect != "DENY"]
    blocked = sum(o.ok and o.code == 403 for o in injected)
    relayed = sum(o.ok and o.code == 200 for o in benign)
    ok = r.passed and blocked == len(injected) > 0 and relayed == len(benign) > 0
    verdict(4, "SQL injection scenario", ok,
            f"blocked {blocked}/{len(injected)}, relayed {relayed}/{len(benign)} byte-identical, "
            f"quarantined {r.quarantined}")
    assert ok, r.failures


def test_criterion_5_gc_storage(verdict):
    sc = Scenario.load("baseline-1k")
    t0 = time.perf_counter()
    on = asyncio.run(run_scenario(sc, gc=True))
    off = asyncio.run(run_scenario(sc, gc=False))
    dt = time.perf_counter() - t0
    ratio = on.final_size / off.final_size
    peak_100, peak_1000 = max(on.size_by_request[:100]), max(on.size_by_request)
    off_100, off_1000 = max(off.size_by_request[:100]), max(off.size_by_request)
    ok = (on.passed and off.passed and ratio <= GC_RATIO_MAX
          and peak_1000 <= GC_FLAT_FACTOR * peak_100
          and off_1000 >= NOGC_GROWTH_MIN * off_100 and dt < GC_BUDGET_S)
    verdict(5, "GC storage", ok,
            f"final {on.final_size} vs {off.final_size} ({ratio:.1%}); gc peak {peak_100}->{peak_1000}, "
            f"no-gc {off_100}->{off_1000} ({off_1000 / off_100:.1f}x); {dt:.1f}s")
    assert ok


@pytest.fixture(scope="module")
def overhead():
    t0 = time.perf_counter()
    rep = asyncio.run(bench_overhead(BENCH_REQUESTS))
    return rep, time.perf_counter() - t0


def test_criterion_6_overhead(overhead, verdict, capsys):
    rep, dt = overhead
    table = StageTimings(rep.stages).table()
    shaped = len(rep.stages) == len(STAGES) and all(rep.stages[s] for s in STAGES)
    ok = (len(rep.pipeline_s) == BENCH_REQUESTS and rep.added_mean_ms <= ADDED_MEAN_MAX_MS
          and shaped and dt < BENCH_BUDGET_S)
    verdict(6, "interposition overhead", ok,
            f"added mean {rep.added_mean_ms:.3f}ms ({rep.overhead_pct:.0f}%) over {len(rep.pipeline_s)}; {dt:.1f}s")
    with capsys.disabled():
        print(table)
    assert ok


def test_criterion_7_guard_query_latency(overhead, verdict):
    rep, _ = overhead
    q = rep.guard_query_s
    mean_ms = statistics.fmean(q) * 1000 if q else float("inf")
    ok = len(q) >= QUERY_COUNT and mean_ms <= QUERY_MEAN_MAX_MS
    verdict(7, "ancestry query latency", ok, f"mean {mean_ms:.3f}ms over {len(q)} queries")
    assert ok


def test_criterion_8_partitioning(verdict):
    base = Scenario.load("baseline-1k")
    base.requests = generate(WorkloadSpec(count=1400, seed=8, hosts=64))
    base.name = "partition-8"
    r = asyncio.run(run_scenario(base, workers=PARTITION_WORKERS))
    sql = sum(n for k, n in r.events.items() if EventKind[k].is_sql)
    ok = r.passed and r.misattributed == 0 and sql >= PARTITION_MIN_EVENTS and r.workers == PARTITION_WORKERS
    verdict(8, "partitioning under concurrency", ok,
            f"{sql} SQL events over {r.requests} units on {r.workers} workers, {r.misattributed} misattributed")
    assert ok, r.failures[:5]
