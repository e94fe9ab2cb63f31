"""Simulated pre-forked worker pool.

Each worker owns one persistent database connection that is reused by every
request it serves, so units of work from different requests share the same
socket.  Around each request handler the worker reports UNIT_START and
UNIT_END to the recorder; the closing report is sent from a ``finally`` block
so a failing handler still ends its unit.

Request framing (client to pool, through the guard)::

    REQUEST <ip:port> <n>\\n
    <statement>\\n            n times

Response framing (pool to guard)::

    FROM-WORKER <id>\\n       stripped by the guard
    <code> <len>\\n<len body bytes>
"""

from __future__ import annotations

import asyncio
import json
import logging
import re
import time
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .metrics import StageTimings
from .model import ProvEvent, RemoteAddr, check_worker, new_uuid
from .net import Endpoint, close_writer, open_connection, start_server
from .proxy import ProtocolError, handshake, read_db_reply
from .recorder import RecorderClient

log = logging.getLogger(__name__)

FIRST_WORKER_ID = 1001
_REQUEST_RE = re.compile(r"^REQUEST (\S+) (\d+)$")
_PREAMBLE_RE = re.compile(rb"^FROM-WORKER ([1-9][0-9]*)\n$")
_STATUS_RE = re.compile(rb"^(\d{3}) (\d+)\n$")


class RequestSyntax(ValueError):
    pass


@dataclass(frozen=True)
class SimRequest:
    remote_addr: RemoteAddr
    script: tuple[str, ...] = ()
    label: str = ""
    expect: Optional[str] = None  # "ALLOW" / "DENY" when the scenario pins it

    def __post_init__(self) -> None:
        for stmt in self.script:
            if "\n" in stmt or "\r" in stmt:
                raise RequestSyntax("statements must be single lines")

    @classmethod
    def from_json(cls, obj: dict) -> "SimRequest":
        expect = obj.get("expect")
        if expect is not None and expect not in ("ALLOW", "DENY"):
            raise RequestSyntax(f"expect must be ALLOW or DENY, got {expect!r}")
        return cls(
            remote_addr=RemoteAddr.parse(obj["remote_addr"]),
            script=tuple(obj.get("script", ())),
            label=obj.get("label", ""),
            expect=expect,
        )

    def to_json(self) -> dict:
        out: dict = {"remote_addr": str(self.remote_addr), "script": list(self.script)}
        if self.label:
            out["label"] = self.label
        if self.expect:
            out["expect"] = self.expect
        return out

    def encode(self) -> bytes:
        head = f"REQUEST {self.remote_addr} {len(self.script)}\n"
        return (head + "".join(s + "\n" for s in self.script)).encode("utf-8")


def load_requests(lines: Iterable[str]) -> list[SimRequest]:
    out = []
    for n, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            continue
        try:
            out.append(SimRequest.from_json(json.loads(line)))
        except (ValueError, KeyError, TypeError) as exc:
            raise RequestSyntax(f"request line {n}: {exc}") from None
    return out


async def read_request(reader: asyncio.StreamReader) -> Optional[SimRequest]:
    head = await reader.readline()
    if not head:
        return None
    m = _REQUEST_RE.match(head.decode("utf-8", "replace").rstrip("\r\n"))
    if m is None:
        raise RequestSyntax(f"bad request line {head[:80]!r}")
    script = []
    for _ in range(int(m.group(2))):
        line = await reader.readline()
        if not line.endswith(b"\n"):
            raise RequestSyntax("truncated request")
        script.append(line.decode("utf-8", "replace").rstrip("\r\n"))
    return SimRequest(RemoteAddr.parse(m.group(1)), tuple(script))


def encode_response(code: int, body: bytes) -> bytes:
    return f"{code} {len(body)}\n".encode() + body


async def read_response(reader: asyncio.StreamReader) -> Optional[tuple[bytes, int, bytes]]:
    """(raw bytes, status code, body) of one response; None on clean EOF."""
    line = await reader.readline()
    if not line:
        return None
    m = _STATUS_RE.match(line)
    if m is None:
        raise ProtocolError(f"bad response status {line[:80]!r}")
    try:
        body = await reader.readexactly(int(m.group(2)))
    except asyncio.IncompleteReadError:
        raise ProtocolError("truncated response body") from None
    return line + body, int(m.group(1)), body


async def read_preamble(reader: asyncio.StreamReader) -> Optional[int]:
    line = await reader.readline()
    if not line:
        return None
    m = _PREAMBLE_RE.match(line)
    if m is None:
        raise ProtocolError(f"missing worker preamble, got {line[:80]!r}")
    return int(m.group(1))


class Worker:
    def __init__(
        self,
        worker_id: int,
        db: Endpoint,
        recorder: Optional[Endpoint],
        send_handshake: bool = True,
        timings: Optional[StageTimings] = None,
    ) -> None:
        self.id = check_worker(worker_id)
        self.db = db
        self.recorder_ep = recorder
        self.send_handshake = send_handshake
        self.timings = timings
        self.rec: Optional[RecorderClient] = None
        self._db: Optional[tuple[asyncio.StreamReader, asyncio.StreamWriter]] = None
        self.units: list[tuple[str, SimRequest]] = []  # (uuid, request) in handling order

    async def _db_conn(self) -> tuple[asyncio.StreamReader, asyncio.StreamWriter]:
        if self._db is None:
            r, w = await open_connection(self.db)
            if self.send_handshake:
                w.write(handshake(self.id))
            self._db = (r, w)
        return self._db

    async def _drop_db(self) -> None:
        if self._db is not None:
            await close_writer(self._db[1])
            self._db = None

    async def _report(self, event: ProvEvent, stage: str) -> None:
        if self.recorder_ep is None:
            return
        t0 = time.perf_counter()
        if self.rec is None:
            self.rec = await RecorderClient.connect(self.recorder_ep)
        await self.rec.send([event])
        if self.timings is not None:
            self.timings.record(stage, time.perf_counter() - t0)

    async def handle(self, req: SimRequest) -> bytes:
        """Serve one request; returns ``<code> <len>\\n<body>``."""
        uuid = new_uuid()
        self.units.append((uuid, req))
        await self._report(ProvEvent.unit_start(self.id, uuid, req.remote_addr), "unit_start")
        try:
            body = bytearray()
            for stmt in req.script:
                try:
                    r, w = await self._db_conn()
                    w.write(stmt.encode("utf-8") + b"\n")
                    await w.drain()
                    reply = await read_db_reply(r)
                except (OSError, ProtocolError):
                    reply = None
                if reply is None:
                    await self._drop_db()
                    return encode_response(500, b"500 database connection lost")
                body += reply
            return encode_response(200, bytes(body))
        finally:
            await self._report(ProvEvent.unit_end(self.id, uuid), "unit_end")

    async def close(self) -> None:
        await self._drop_db()
        if self.rec is not None:
            await self.rec.close()
            self.rec = None


@dataclass
class PoolStats:
    served: int = 0
    errors: int = 0
    by_worker: dict[int, int] = field(default_factory=dict)


class WorkerPool:
    """Fixed set of workers; a request waits for an idle one."""

    def __init__(
        self,
        n: int,
        db: Endpoint,
        recorder: Optional[Endpoint],
        send_handshake: bool = True,
        timings: Optional[StageTimings] = None,
        first_id: int = FIRST_WORKER_ID,
    ) -> None:
        if n < 1:
            raise ValueError("a pool needs at least one worker")
        self.workers = [
            Worker(first_id + i, db, recorder, send_handshake, timings) for i in range(n)
        ]
        self._idle: asyncio.Queue[Worker] = asyncio.Queue()
        for w in self.workers:
            self._idle.put_nowait(w)
        self.stats = PoolStats()
        self.server: Optional[asyncio.AbstractServer] = None

    async def _run(self, w: Worker, req: SimRequest) -> bytes:
        resp = await w.handle(req)
        self.stats.served += 1
        self.stats.by_worker[w.id] = self.stats.by_worker.get(w.id, 0) + 1
        if not resp.startswith(b"200 "):
            self.stats.errors += 1
        return resp

    async def submit(self, req: SimRequest) -> tuple[int, bytes]:
        w = await self._idle.get()
        try:
            return w.id, await self._run(w, req)
        finally:
            self._idle.put_nowait(w)

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            req = await read_request(reader)
        except (RequestSyntax, ValueError, ConnectionError) as exc:
            log.info("bad request: %s", exc)
            await close_writer(writer)
            return
        if req is None:
            await close_writer(writer)
            return
        w = await self._idle.get()
        try:
            resp = await self._run(w, req)
            writer.write(f"FROM-WORKER {w.id}\n".encode() + resp)
            await writer.drain()
            # hold the worker until the guard is done with this unit
            while await reader.read(65536):
                pass
        except ConnectionError:
            pass
        finally:
            self._idle.put_nowait(w)
            await close_writer(writer)

    async def start(self, ep: Endpoint) -> Endpoint:
        self.server, bound = await start_server(self._handle, ep)
        return bound

    async def stop(self) -> None:
        if self.server is not None:
            self.server.close()
            await self.server.wait_closed()
        for w in self.workers:
            await w.close()


async def send_request(ep: Endpoint, req: SimRequest) -> tuple[int, bytes]:
    """Client side: one request per connection; returns (code, raw response)."""
    r, w = await open_connection(ep)
    try:
        w.write(req.encode())
        await w.drain()
        got = await read_response(r)
        if got is None:
            raise ProtocolError("connection closed without a response")
        return got[1], got[0]
    finally:
        await close_writer(w)
