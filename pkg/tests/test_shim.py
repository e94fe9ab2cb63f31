import asyncio
import json

import pytest

from challenges import CONCAT_QUERY, EMPLOYEE_DDL

from provguard.guard import Policy
from provguard.harness import LOOPBACK, Stack, audit
from provguard.model import EventKind, RemoteAddr
from provguard.proxy import StubConfig
from provguard.shim import (
    RequestSyntax,
    SimRequest,
    WorkerPool,
    encode_response,
    load_requests,
    read_request,
    read_response,
)

ADDR = RemoteAddr.parse("203.0.113.9:40000")


def test_request_json_round_trip():
    r = SimRequest(ADDR, ("SELECT a FROM t",), "browse", "ALLOW")
    assert SimRequest.from_json(json.loads(json.dumps(r.to_json()))) == r


def test_load_requests_reports_line():
    with pytest.raises(RequestSyntax) as info:
        load_requests(['{"remote_addr": "1.2.3.4:5"}', "", '{"script": []}'])
    assert "line 3" in str(info.value)


def test_multiline_statement_rejected():
    with pytest.raises(RequestSyntax):
        SimRequest(ADDR, ("SELECT a\nFROM t",))


def test_request_wire_round_trip():
    async def body():
        r = asyncio.StreamReader()
        req = SimRequest(ADDR, ("SELECT a FROM t", "SHOW TABLES"))
        r.feed_data(req.encode())
        r.feed_eof()
        return req, await read_request(r)

    req, back = asyncio.run(body())
    assert back == req


def test_response_framing():
    async def body():
        r = asyncio.StreamReader()
        r.feed_data(encode_response(200, b"abc\n") + b"rest")
        r.feed_eof()
        return await read_response(r)

    raw, code, bodyb = asyncio.run(body())
    assert raw == b"200 4\nabc\n" and code == 200 and bodyb == b"abc\n"


def test_pool_needs_a_worker():
    with pytest.raises(ValueError):
        WorkerPool(0, LOOPBACK, None)


async def _stack(tmp_path, workers=1, stub=None):
    schema = tmp_path / "employees.sql"
    schema.write_text(EMPLOYEE_DDL)
    return await Stack.start(schema, stub or StubConfig(rows={"employees": 3}), Policy(), workers)


def unit_trace(stack, uuid):
    return [e for e, u in stack.tapped if u == uuid]


def test_unit_brackets_the_script(tmp_path):
    async def body():
        stack = await _stack(tmp_path)
        try:
            wid, resp = await stack.pool.submit(SimRequest(ADDR, (CONCAT_QUERY,)))
        finally:
            await stack.stop()
        return stack, wid, resp

    stack, wid, resp = asyncio.run(body())
    assert resp == encode_response(200, stack.stub.respond(CONCAT_QUERY))
    (uuid, _), = stack.units().items()
    kinds = [e.kind for e in unit_trace(stack, uuid)]
    assert kinds[0] is EventKind.UNIT_START and kinds[-1] is EventKind.UNIT_END
    assert kinds.count(EventKind.SQL_READ) + kinds.count(EventKind.SQL_USED) == 5
    assert kinds.count(EventKind.RESPONSE_IMPACT) == 1 and len(kinds) == 8
    assert len(stack.tapped) == 8


def test_empty_script(tmp_path):
    async def body():
        stack = await _stack(tmp_path)
        try:
            _, resp = await stack.pool.submit(SimRequest(ADDR, ()))
        finally:
            await stack.stop()
        return stack, resp

    stack, resp = asyncio.run(body())
    assert resp == b"200 0\n"
    assert [e.kind for e, _ in stack.tapped] == [EventKind.UNIT_START, EventKind.UNIT_END]


def test_sequential_units_get_distinct_uuids(tmp_path):
    async def body():
        stack = await _stack(tmp_path)
        try:
            for _ in range(3):
                await stack.pool.submit(SimRequest(ADDR, (CONCAT_QUERY,)))
        finally:
            await stack.stop()
        return stack

    stack = asyncio.run(body())
    uuids = [u for u, _ in stack.pool.workers[0].units]
    assert len(set(uuids)) == 3
    # never interleaved: each unit's events form one contiguous block
    order = [u for _, u in stack.tapped]
    blocks = [u for i, u in enumerate(order) if i == 0 or order[i - 1] != u]
    assert blocks == uuids


def test_dropped_db_connection_still_ends_unit(tmp_path):
    bad = "SELECT x FROM WHERE"

    async def body():
        stack = await _stack(tmp_path)
        try:
            _, resp = await stack.pool.submit(SimRequest(ADDR, (CONCAT_QUERY, bad, CONCAT_QUERY)))
            # the worker reconnects for its next unit
            _, again = await stack.pool.submit(SimRequest(ADDR, (CONCAT_QUERY,)))
        finally:
            await stack.stop()
        return stack, resp, again

    stack, resp, again = asyncio.run(body())
    assert resp.startswith(b"500 ")
    assert again.startswith(b"200 ")
    first = stack.pool.workers[0].units[0][0]
    trace = unit_trace(stack, first)
    assert trace[-1].kind is EventKind.UNIT_END
    assert [e.raw for e in trace if e.kind is EventKind.PARSE_FAILURE] == [bad]
    assert stack.graph.units[first].tainted


def test_concurrent_workers_partition_events(tmp_path):
    reqs = [SimRequest(RemoteAddr.parse(f"10.1.0.{i % 7 + 1}:{30000 + i}"),
                       (CONCAT_QUERY,) * (1 + i % 3) + ("UPDATE employees SET salary = 1 WHERE employee_id = 2",))
            for i in range(40)]

    async def body():
        stack = await _stack(tmp_path, workers=4)
        try:
            await asyncio.gather(*(stack.pool.submit(r) for r in reqs))
        finally:
            await stack.stop()
        return stack

    stack = asyncio.run(body())
    from provguard.schema import parse_schema
    a = audit(stack.tapped, stack.units(), parse_schema(EMPLOYEE_DDL))
    assert a.misattributed == 0, a.problems
    assert len(stack.units()) == 40
    assert len({w for w, _ in stack.units().values()}) == 4
    assert a.events["SQL_READ"] == 4 * sum(1 + i % 3 for i in range(40))
