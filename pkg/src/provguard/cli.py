"""Command line entry point.

Exit status: 0 success, 1 scenario or extraction failure, 2 usage error.
Any flag can also come from ``--config file.json`` (keys are flag names,
dashes or underscores); explicit flags win.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .extract import extract_sql, to_events
from .extractor import ExtractorPool
from .guard import NetworkGuard, PolicySyntax, load_policy
from .harness import ConfigError, Scenario, bench_overhead, run_scenario
from .metrics import StageTimings
from .net import Endpoint
from .proxy import CaptureProxy, DbStub, StubConfig
from .recorder import ProvGraph, RecorderClient, RecorderError, RecorderServer, load_quarantine
from .schema import ExtractionError, SchemaError, load_schema
from .shim import RequestSyntax, WorkerPool, load_requests, send_request
from .sql import ParseError, split_statements

log = logging.getLogger("provguard")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _endpoint(text: str) -> Endpoint:
    try:
        return Endpoint.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="provguard", description="SQL provenance capture and egress guard")
    ap.add_argument("--config", help="JSON file supplying defaults for any flag")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a scenario end to end")
    p.add_argument("scenario", help="bundled scenario name or scenario directory")
    p.add_argument("--no-gc", action="store_true")
    p.add_argument("--workers", type=int)
    p.add_argument("--report", help="write the JSON report here")
    p.add_argument("--quarantine", help="quarantine log path")
    p.add_argument("--extractor-path")
    p.add_argument("--parse-timeout-ms", type=int, default=2000)

    p = sub.add_parser("bench", help="added latency of the full pipeline over direct access")
    p.add_argument("-n", "--requests", type=int, default=1000)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--report")

    p = sub.add_parser("extract", help="print provenance events for a file of statements")
    p.add_argument("sql_file")
    p.add_argument("--schema", required=True)
    p.add_argument("--worker", type=int, default=1)

    p = sub.add_parser("graph", help="DOT export from a quarantine log or a live recorder")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--quarantine")
    src.add_argument("--recorder-endpoint", type=_endpoint)
    p.add_argument("--uuid")

    p = sub.add_parser("recorder")
    p.add_argument("--listen", "--recorder-endpoint", dest="listen", type=_endpoint, required=True)
    p.add_argument("--quarantine")

    p = sub.add_parser("proxy")
    p.add_argument("--listen", type=_endpoint, required=True)
    p.add_argument("--upstream", type=_endpoint, required=True)
    p.add_argument("--recorder-endpoint", type=_endpoint, required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--extractor-path")
    p.add_argument("--parse-timeout-ms", type=int, default=2000)

    p = sub.add_parser("guard")
    p.add_argument("--listen", type=_endpoint, required=True)
    p.add_argument("--upstream", type=_endpoint, required=True)
    p.add_argument("--recorder-endpoint", type=_endpoint, required=True)
    p.add_argument("--policy", required=True)
    p.add_argument("--default", choices=["allow", "deny"])
    p.add_argument("--no-gc", action="store_true")

    p = sub.add_parser("pool")
    p.add_argument("--workers", type=int, default=4)
    p.add_argument("--db-endpoint", type=_endpoint, required=True)
    p.add_argument("--recorder-endpoint", type=_endpoint)
    p.add_argument("--listen", type=_endpoint, required=True)
    p.add_argument("--requests", help="JSON-lines requests to drive through --guard-endpoint")
    p.add_argument("--guard-endpoint", type=_endpoint)

    p = sub.add_parser("dbstub")
    p.add_argument("--listen", type=_endpoint, required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--stub-config")
    return ap


def parse_args(argv: Optional[Sequence[str]]) -> argparse.Namespace:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    ap = _build_parser()
    if known.config:
        try:
            conf = json.loads(Path(known.config).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            ap.error(f"cannot read config: {exc}")
        if not isinstance(conf, dict):
            ap.error("config must be a JSON object")
        _apply_config(ap, {k.replace("-", "_"): v for k, v in conf.items()})
    return ap.parse_args(argv)


def _apply_config(ap: argparse.ArgumentParser, conf: dict) -> None:
    subs = next(a for a in ap._actions if isinstance(a, argparse._SubParsersAction)).choices
    seen = {a.dest for a in ap._actions}
    for sub in subs.values():
        mine = {}
        for action in sub._actions:
            if action.dest not in conf:
                continue
            value = conf[action.dest]
            if action.type is not None and isinstance(value, str):
                value = action.type(value)
            mine[action.dest] = value
            action.required = False  # now satisfied by the config
        sub.set_defaults(**mine)
        seen |= set(mine)
    unknown = set(conf) - seen
    if unknown:
        ap.error(f"unknown config keys: {', '.join(sorted(unknown))}")


# -- subcommands --------------------------------------------------------------


def cmd_extract(args: argparse.Namespace) -> int:
    schema = load_schema(args.schema)
    text = Path(args.sql_file).read_text(encoding="utf-8")
    try:
        statements = split_statements(text)
    except ParseError as exc:
        print(f"error: {exc.message} at byte offset {exc.offset}", file=sys.stderr)
        return EXIT_FAIL
    status = EXIT_OK
    for n, stmt in enumerate(statements, 1):
        try:
            events = to_events(extract_sql(stmt, schema), args.worker)
        except ParseError as exc:
            print(f"error: statement {n}: {exc.message} at byte offset {exc.offset}", file=sys.stderr)
            status = EXIT_FAIL
            continue
        except (ExtractionError, RecursionError) as exc:
            print(f"error: statement {n}: {type(exc).__name__}: {exc}", file=sys.stderr)
            status = EXIT_FAIL
            continue
        for e in events:
            print("\t".join(e.fields()))
    return status


async def _graph(args: argparse.Namespace) -> int:
    if args.quarantine:
        graph = load_quarantine(Path(args.quarantine).read_bytes())
        if args.uuid and args.uuid not in graph.units:
            print(f"error: unknown unit {args.uuid}", file=sys.stderr)
            return EXIT_FAIL
        sys.stdout.write(graph.export_dot(args.uuid))
        return EXIT_OK
    client = await RecorderClient.connect(args.recorder_endpoint)
    try:
        sys.stdout.write(await client.dot(args.uuid))
    except RecorderError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    finally:
        await client.close()
    return EXIT_OK


async def _run(args: argparse.Namespace) -> int:
    sc = Scenario.load(args.scenario)
    report = await run_scenario(
        sc,
        gc=not args.no_gc,
        workers=args.workers,
        quarantine=Path(args.quarantine) if args.quarantine else None,
        extractor_path=args.extractor_path,
        parse_timeout=args.parse_timeout_ms / 1000.0,
    )
    if args.report:
        report.write(args.report)
    print(report.table())
    return EXIT_OK if report.passed else EXIT_FAIL


async def _bench(args: argparse.Namespace) -> int:
    rep = await bench_overhead(args.requests, seed=args.seed, workers=args.workers)
    if args.report:
        Path(args.report).write_text(json.dumps(rep.to_json(), indent=1) + "\n", encoding="utf-8")
    print(rep.table())
    return EXIT_OK


async def _forever(*parts) -> int:
    try:
        await asyncio.Event().wait()
    finally:
        for p in parts:
            await p.stop()
    return EXIT_OK


async def _recorder(args: argparse.Namespace) -> int:
    server = RecorderServer(ProvGraph(quarantine=args.quarantine))
    log.info("recorder on %s", await server.start(args.listen))
    return await _forever(server)


async def _proxy(args: argparse.Namespace) -> int:
    load_schema(args.schema)  # fail early on a bad schema
    pool = ExtractorPool(args.schema, timeout=args.parse_timeout_ms / 1000.0, exec_path=args.extractor_path)
    proxy = CaptureProxy(args.upstream, args.recorder_endpoint, pool, StageTimings())
    log.info("proxy on %s", await proxy.start(args.listen))
    return await _forever(proxy)


async def _guard(args: argparse.Namespace) -> int:
    policy = load_policy(args.policy, args.default)
    guard = NetworkGuard(args.upstream, args.recorder_endpoint, policy, gc=not args.no_gc)
    log.info("guard on %s", await guard.start(args.listen))
    return await _forever(guard)


async def _pool(args: argparse.Namespace) -> int:
    pool = WorkerPool(args.workers, args.db_endpoint, args.recorder_endpoint)
    bound = await pool.start(args.listen)
    log.info("pool of %d on %s", args.workers, bound)
    if not args.requests:
        return await _forever(pool)
    target = args.guard_endpoint or bound
    try:
        with open(args.requests, encoding="utf-8") as fh:
            reqs = load_requests(fh)
        for req in reqs:
            code, raw = await send_request(target, req)
            print(f"{req.remote_addr}\t{code}\t{len(raw)}")
    finally:
        await pool.stop()
    return EXIT_OK


async def _dbstub(args: argparse.Namespace) -> int:
    cfg = StubConfig.load(args.stub_config) if args.stub_config else StubConfig()
    stub = DbStub(load_schema(args.schema), cfg)
    log.info("db stub on %s", await stub.start(args.listen))
    return await _forever(stub)


ASYNC_COMMANDS = {
    "run": _run, "bench": _bench, "graph": _graph, "recorder": _recorder,
    "proxy": _proxy, "guard": _guard, "pool": _pool, "dbstub": _dbstub,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        if args.command == "extract":
            return cmd_extract(args)
        return asyncio.run(ASYNC_COMMANDS[args.command](args))
    except KeyboardInterrupt:
        return EXIT_OK
    except (ConfigError, PolicySyntax, SchemaError, RequestSyntax, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
