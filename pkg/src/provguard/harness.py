"""Scenario orchestration and benchmarks.

A scenario directory holds ``scenario.json`` naming a schema, a database stub
config, a policy and either a JSON-lines request file or a generator spec.
Every component runs in this process on ephemeral loopback ports.
"""

from __future__ import annotations

import asyncio
import json
import logging
import statistics
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .extract import extract_sql, to_events
from .extractor import DEFAULT_TIMEOUT, ExtractorPool
from .guard import BLOCKED_BODY, NetworkGuard, Policy, load_policy
from .metrics import STAGES, StageTimings, describe
from .model import EventKind, ProvEvent, decode_stream
from .net import Endpoint, close_writer, open_connection
from .proxy import CaptureProxy, DbStub, StubConfig
from .recorder import UNATTRIBUTED, ProvGraph, RecorderServer
from .schema import ExtractionError, Schema, load_schema
from .shim import SimRequest, WorkerPool, encode_response, load_requests, read_preamble, read_response, send_request
from .sql import ParseError
from .workload import WorkloadSpec, generate

log = logging.getLogger(__name__)

REPORT_VERSION = "1.0"
SCENARIO_ROOT = Path(__file__).resolve().parent / "scenarios"
LOOPBACK = Endpoint(host="127.0.0.1", port=0)


class ConfigError(ValueError):
    pass


@dataclass
class Scenario:
    name: str
    schema_path: Path
    stub: StubConfig
    policy: Policy
    requests: list[SimRequest]
    workers: int = 4
    expect_events: Optional[dict[str, int]] = None

    @classmethod
    def load(cls, where: str | Path) -> "Scenario":
        """Load from a directory or a bundled scenario name."""
        root = Path(where)
        if not (root / "scenario.json").exists():
            root = SCENARIO_ROOT / str(where)
        meta_path = root / "scenario.json"
        if not meta_path.exists():
            raise ConfigError(f"no scenario at {where!s}")
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        schema_path = (root / meta["schema"]).resolve()
        schema = load_schema(schema_path)
        if "generate" in meta:
            requests = generate(WorkloadSpec.from_json(meta["generate"]))
        else:
            with open(root / meta["requests"], encoding="utf-8") as fh:
                requests = load_requests(fh)
        stub = StubConfig.load(root / meta["dbstub"]) if meta.get("dbstub") else StubConfig()
        sc = cls(
            name=meta.get("name", root.name),
            schema_path=schema_path,
            stub=stub,
            policy=load_policy(root / meta["policy"]),
            requests=requests,
            workers=int(meta.get("workers", 4)),
            expect_events=meta.get("expect_events"),
        )
        sc.check(schema)
        return sc

    def check(self, schema: Schema) -> None:
        for table in list(self.stub.rows) + list(self.stub.affected):
            if not schema.has_table(table):
                raise ConfigError(f"stub config names unknown table {table!r}")
        for rule in self.policy.rules:
            for p in rule.objects:
                if not schema.has_table(p.table):
                    raise ConfigError(f"policy names unknown table {p.table!r}")


@dataclass
class Outcome:
    index: int
    label: str
    remote_addr: str
    expect: str
    got: str
    code: int
    ok: bool
    detail: str = ""


@dataclass
class BenchReport:
    scenario: str
    gc: bool
    workers: int
    requests: int
    latency_s: list[float] = field(default_factory=list)
    stages: dict[str, list[float]] = field(default_factory=lambda: {s: [] for s in STAGES})
    size_samples: list[tuple[float, int, int]] = field(default_factory=list)  # (t, nodes, edges)
    size_by_request: list[int] = field(default_factory=list)
    guard_query_s: list[float] = field(default_factory=list)
    outcomes: list[Outcome] = field(default_factory=list)
    events: dict[str, int] = field(default_factory=dict)
    misattributed: int = 0
    quarantined: int = 0
    final_nodes: int = 0
    final_edges: int = 0
    failures: list[str] = field(default_factory=list)
    version: str = REPORT_VERSION

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def final_size(self) -> int:
        return self.final_nodes + self.final_edges

    def to_json(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        return d

    @classmethod
    def from_json(cls, d: dict) -> "BenchReport":
        major = str(d.get("version", "1.0")).split(".")[0]
        if major != REPORT_VERSION.split(".")[0]:
            raise ConfigError(f"unsupported report version {d.get('version')!r}")
        known = {f for f in cls.__dataclass_fields__}
        kw = {k: v for k, v in d.items() if k in known}
        kw["outcomes"] = [Outcome(**o) for o in kw.get("outcomes", [])]
        kw["size_samples"] = [tuple(s) for s in kw.get("size_samples", [])]
        return cls(**kw)

    def table(self) -> str:
        lat = describe(self.latency_s)
        q = describe(self.guard_query_s)
        denied = sum(1 for o in self.outcomes if o.got == "DENY")
        lines = [
            f"scenario {self.scenario}  gc={'on' if self.gc else 'off'}  workers={self.workers}",
            f"requests {self.requests}  denied {denied}  quarantined {self.quarantined}"
            f"  misattributed {self.misattributed}",
            f"latency mean {lat['mean_ms']:.3f}ms  p95 {lat['p95_ms']:.3f}ms",
            f"ancestry query mean {q['mean_ms']:.3f}ms  p95 {q['p95_ms']:.3f}ms",
            f"final graph {self.final_nodes} nodes + {self.final_edges} edges",
            "",
            StageTimings(self.stages).table(),
            "",
            "PASS" if self.passed else "FAIL",
        ]
        lines += [f"  - {f}" for f in self.failures]
        return "\n".join(lines)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n", encoding="utf-8")


# -- attribution audit --------------------------------------------------------


@dataclass
class Audit:
    events: Counter
    misattributed: int
    problems: list[str]


def expected_events(worker: int, script: Sequence[str], schema: Schema) -> Counter:
    """Events a unit should produce; a rejected statement ends the script."""
    want: Counter = Counter()
    for stmt in script:
        try:
            evs = to_events(extract_sql(stmt, schema), worker)
        except (ParseError, ExtractionError, RecursionError):
            want[ProvEvent.parse_failure(worker, stmt)] += 1
            break
        want.update(evs)
    return want


def audit(
    tapped: Sequence[tuple[ProvEvent, str]],
    units: dict[str, tuple[int, SimRequest]],
    schema: Schema,
) -> Audit:
    """Compare what the recorder attributed against what each unit issued."""
    got: dict[str, Counter] = {}
    kinds: Counter = Counter()
    problems: list[str] = []
    bad = 0
    for e, uuid in tapped:
        kinds[e.kind.value] += 1
        if e.kind in (EventKind.UNIT_START, EventKind.UNIT_END, EventKind.RESPONSE_IMPACT):
            continue
        owner = units.get(uuid)
        if uuid == UNATTRIBUTED or owner is None or owner[0] != e.worker:
            bad += 1
            if len(problems) < 10:
                problems.append(f"{e.kind.value} from worker {e.worker} attributed to {uuid}")
            continue
        got.setdefault(uuid, Counter())[e] += 1
    for uuid, (worker, req) in units.items():
        want = expected_events(worker, req.script, schema)
        have = got.get(uuid, Counter())
        diff = sum(((want - have) + (have - want)).values())
        if diff:
            bad += diff
            if len(problems) < 10:
                problems.append(f"unit {uuid} on worker {worker}: {diff} events differ")
    return Audit(kinds, bad, problems)


def _quarantined_addrs(graph: ProvGraph, path: Optional[Path]) -> list[str]:
    blobs = list(graph.quarantine_records)
    if path is not None and path.exists():
        blobs.append(path.read_bytes())
    addrs = []
    for blob in blobs:
        for e in decode_stream(blob):
            if e.kind is EventKind.UNIT_START:
                addrs.append(str(e.remote_addr))
    return addrs


# -- orchestration ------------------------------------------------------------


@dataclass
class Stack:
    """Every component of the pipeline, started on loopback."""

    graph: ProvGraph
    recorder: RecorderServer
    stub: DbStub
    proxy: CaptureProxy
    pool: WorkerPool
    guard: NetworkGuard
    timings: StageTimings
    tapped: list[tuple[ProvEvent, str]]
    guard_ep: Endpoint
    recorder_ep: Endpoint

    @classmethod
    async def start(
        cls,
        schema_path: Path,
        stub: StubConfig,
        policy: Policy,
        workers: int,
        gc: bool = True,
        quarantine: Optional[Path] = None,
        extractor_path: Optional[str] = None,
        parse_timeout: float = DEFAULT_TIMEOUT,
        tap: bool = True,
    ) -> "Stack":
        schema = load_schema(schema_path)
        timings = StageTimings()
        graph = ProvGraph(quarantine=quarantine)
        tapped: list[tuple[ProvEvent, str]] = []
        rec = RecorderServer(graph, tap=(lambda e, u: tapped.append((e, u))) if tap else None)
        rec_ep = await rec.start(LOOPBACK)
        db = DbStub(schema, stub)
        db_ep = await db.start(LOOPBACK)
        extractor = ExtractorPool(schema_path, size=2, timeout=parse_timeout, exec_path=extractor_path)
        proxy = CaptureProxy(db_ep, rec_ep, extractor, timings)
        proxy_ep = await proxy.start(LOOPBACK)
        pool = WorkerPool(workers, proxy_ep, rec_ep, timings=timings)
        pool_ep = await pool.start(LOOPBACK)
        guard = NetworkGuard(pool_ep, rec_ep, policy, gc=gc)
        guard_ep = await guard.start(LOOPBACK)
        return cls(graph, rec, db, proxy, pool, guard, timings, tapped, guard_ep, rec_ep)

    async def stop(self) -> None:
        for part in (self.guard, self.pool, self.proxy, self.stub, self.recorder):
            try:
                await part.stop()
            except Exception:  # teardown must reach every component
                log.exception("stopping %s", type(part).__name__)

    def units(self) -> dict[str, tuple[int, SimRequest]]:
        return {u: (w.id, r) for w in self.pool.workers for u, r in w.units}


async def _sampler(graph: ProvGraph, out: list, interval: float) -> None:
    t0 = time.perf_counter()
    while True:
        out.append((round(time.perf_counter() - t0, 3), graph.node_count, graph.edge_count))
        await asyncio.sleep(interval)


async def run_scenario(
    sc: Scenario,
    *,
    gc: bool = True,
    workers: Optional[int] = None,
    concurrency: Optional[int] = None,
    quarantine: Optional[Path] = None,
    extractor_path: Optional[str] = None,
    parse_timeout: float = DEFAULT_TIMEOUT,
    sample_interval: float = 0.5,
) -> BenchReport:
    n = workers or sc.workers
    report = BenchReport(sc.name, gc, n, len(sc.requests))
    stack = await Stack.start(
        sc.schema_path, sc.stub, sc.policy, n, gc, quarantine, extractor_path, parse_timeout
    )
    sampler = asyncio.ensure_future(_sampler(stack.graph, report.size_samples, sample_interval))
    results: dict[int, tuple[int, bytes] | BaseException] = {}
    queue: asyncio.Queue[int] = asyncio.Queue()
    for i in range(len(sc.requests)):
        queue.put_nowait(i)

    async def client() -> None:
        while not queue.empty():
            i = queue.get_nowait()
            t0 = time.perf_counter()
            try:
                results[i] = await send_request(stack.guard_ep, sc.requests[i])
            except Exception as exc:  # recorded as a scenario failure
                results[i] = exc
            report.latency_s.append(time.perf_counter() - t0)
            report.size_by_request.append(stack.graph.size)

    try:
        await asyncio.gather(*(client() for _ in range(concurrency or n)))
    finally:
        sampler.cancel()
        await stack.stop()

    graph = stack.graph
    report.final_nodes, report.final_edges = graph.node_count, graph.edge_count
    report.stages = {s: list(v) for s, v in stack.timings.samples.items()}
    report.guard_query_s = stack.guard.query_times()
    report.quarantined = graph.quarantined
    aud = audit(stack.tapped, stack.units(), load_schema(sc.schema_path))
    report.events = dict(sorted(aud.events.items()))
    report.misattributed = aud.misattributed
    report.failures += aud.problems
    if sc.expect_events is not None:
        for kind, count in sc.expect_events.items():
            if report.events.get(kind, 0) != count:
                report.failures.append(f"expected {count} {kind} events, saw {report.events.get(kind, 0)}")

    quarantined = Counter(_quarantined_addrs(graph, quarantine))
    for i, req in enumerate(sc.requests):
        report.outcomes.append(_outcome(i, req, results.get(i), stack.stub, gc, quarantined))
    report.failures += [
        f"request {o.index} ({o.label}): expected {o.expect}, {o.detail}" for o in report.outcomes if not o.ok
    ]
    return report


def _outcome(i, req: SimRequest, res, stub: DbStub, gc: bool, quarantined: Counter) -> Outcome:
    expect = req.expect or "ALLOW"
    addr = str(req.remote_addr)
    if isinstance(res, BaseException) or res is None:
        return Outcome(i, req.label, addr, expect, "ERROR", 0, False, f"request failed: {res!r}")
    code, raw = res
    got = "DENY" if code == 403 else "ALLOW"
    detail = ""
    if got == "ALLOW":
        want = encode_response(200, b"".join(stub.respond(s) for s in req.script))
        if raw != want:
            detail = "response differs from the database replies"
    elif raw != encode_response(403, BLOCKED_BODY):
        detail = "blocked response has the wrong body"
    elif gc and quarantined[addr] != 1:
        detail = f"unit quarantined {quarantined[addr]} times"
    if got != expect and not detail:
        detail = f"got {got}"
    return Outcome(i, req.label, addr, expect, got, code, got == expect and not detail, detail)


# -- overhead benchmark -------------------------------------------------------


@dataclass
class OverheadReport:
    n: int
    direct_s: list[float]
    pipeline_s: list[float]
    stages: dict[str, list[float]]
    guard_query_s: list[float]
    version: str = REPORT_VERSION

    @property
    def added_mean_ms(self) -> float:
        return (statistics.fmean(self.pipeline_s) - statistics.fmean(self.direct_s)) * 1000.0

    @property
    def added_p95_ms(self) -> float:
        return describe(self.pipeline_s)["p95_ms"] - describe(self.direct_s)["p95_ms"]

    @property
    def overhead_pct(self) -> float:
        base = statistics.fmean(self.direct_s)
        return 100.0 * (statistics.fmean(self.pipeline_s) - base) / base

    def to_json(self) -> dict:
        d = asdict(self)
        d["summary"] = {
            "direct": describe(self.direct_s),
            "pipeline": describe(self.pipeline_s),
            "added_mean_ms": self.added_mean_ms,
            "added_p95_ms": self.added_p95_ms,
            "overhead_pct": self.overhead_pct,
            "guard_query": describe(self.guard_query_s),
        }
        return d

    def table(self) -> str:
        d, p = describe(self.direct_s), describe(self.pipeline_s)
        q = describe(self.guard_query_s)
        return "\n".join([
            f"{'mode':<10} {'mean':>10} {'p95':>10} {'n':>6}",
            f"{'direct':<10} {d['mean_ms']:>8.3f}ms {d['p95_ms']:>8.3f}ms {d['n']:>6}",
            f"{'pipeline':<10} {p['mean_ms']:>8.3f}ms {p['p95_ms']:>8.3f}ms {p['n']:>6}",
            f"added mean {self.added_mean_ms:.3f}ms ({self.overhead_pct:.1f}%)  p95 {self.added_p95_ms:.3f}ms",
            f"ancestry query mean {q['mean_ms']:.3f}ms over {q['n']}",
            "",
            StageTimings(self.stages).table(),
        ])


async def send_direct(ep: Endpoint, req: SimRequest) -> bytes:
    """Talk to the pool without a guard: read and drop the worker preamble."""
    r, w = await open_connection(ep)
    try:
        w.write(req.encode())
        await w.drain()
        await read_preamble(r)
        got = await read_response(r)
        return got[0] if got else b""
    finally:
        await close_writer(w)


def _check_distinct(a: Optional[Endpoint], b: Optional[Endpoint]) -> None:
    if a is None or b is None:
        return
    ephemeral = a.path is None and (a.port == 0 or b.port == 0)
    if a == b and not ephemeral:
        raise ConfigError(f"direct and pipeline modes both use {a}")


async def bench_overhead(
    n: int,
    *,
    seed: int = 1,
    schema_path: Optional[Path] = None,
    stub: Optional[StubConfig] = None,
    workers: int = 1,
    warmup: int = 20,
    direct_listen: Optional[Endpoint] = None,
    pipeline_listen: Optional[Endpoint] = None,
) -> OverheadReport:
    if n < 100:
        raise ConfigError("the overhead bench needs at least 100 requests")
    _check_distinct(direct_listen, pipeline_listen)
    schema_path = schema_path or SCENARIO_ROOT / "shop.sql"
    stub = stub or StubConfig.load(SCENARIO_ROOT / "dbstub.json")
    requests = generate(WorkloadSpec(count=n + warmup, seed=seed))
    schema = load_schema(schema_path)

    # direct: workers talk straight to the stub, nothing recorded
    db = DbStub(schema, stub)
    db_ep = await db.start(LOOPBACK)
    pool = WorkerPool(workers, db_ep, None, send_handshake=False)
    pool_ep = await pool.start(direct_listen or LOOPBACK)
    direct: list[float] = []
    try:
        for i, req in enumerate(requests):
            t0 = time.perf_counter()
            await send_direct(pool_ep, req)
            if i >= warmup:
                direct.append(time.perf_counter() - t0)
    finally:
        await pool.stop()
        await db.stop()

    stack = await Stack.start(schema_path, stub, Policy(), workers, tap=False)
    piped: list[float] = []
    try:
        for i, req in enumerate(requests):
            if i == warmup:
                stack.timings = _reset_timings(stack)
                stack.guard.decisions.clear()
            t0 = time.perf_counter()
            await send_request(stack.guard_ep, req)
            if i >= warmup:
                piped.append(time.perf_counter() - t0)
    finally:
        await stack.stop()
    return OverheadReport(
        n, direct, piped, {s: list(v) for s, v in stack.timings.samples.items()}, stack.guard.query_times()
    )


def _reset_timings(stack: Stack) -> StageTimings:
    fresh = StageTimings()
    stack.proxy.timings = fresh
    for w in stack.pool.workers:
        w.timings = fresh
    return fresh

