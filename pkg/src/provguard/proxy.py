"""Database capture proxy and the database stub it fronts.

Line protocol, application side to database side::

    WORKER <id>\\n            once per connection, consumed by the proxy
    <statement>\\n            one SQL statement per line

and back::

    OK rows=<n> bytes=<b>\\n<b payload bytes>
    ERR <message>\\n

The proxy relays every byte unchanged apart from the handshake.  Each
statement is forwarded first and extracted concurrently in an isolated
process; the database reply is held back until the statement's events (and
its response impact) have been acknowledged by the recorder.  A statement the
extractor rejects is reported as a parse failure and the connection is
dropped before any reply reaches the application.
"""

from __future__ import annotations

import asyncio
import json
import logging
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import sql as ast
from .extract import extract
from .extractor import ExtractorPool
from .metrics import StageTimings
from .model import ProvEvent
from .net import Endpoint, close_writer, open_connection, start_server
from .recorder import RecorderClient
from .schema import ExtractionError, Schema

log = logging.getLogger(__name__)

_OK_RE = re.compile(rb"^OK rows=(\d+) bytes=(\d+)\n$")
_HANDSHAKE_RE = re.compile(rb"^WORKER ([1-9][0-9]*)\r?\n$")
MAX_LINE = 1 << 20


class ProtocolError(Exception):
    pass


def handshake(worker: int) -> bytes:
    return f"WORKER {worker}\n".encode()


def parse_status(line: bytes) -> Optional[tuple[int, int]]:
    """(rows, bytes) for an OK status line, None for anything else."""
    m = _OK_RE.match(line)
    return (int(m.group(1)), int(m.group(2))) if m else None


async def read_db_reply(reader: asyncio.StreamReader) -> Optional[bytes]:
    """Read one complete reply (status line plus payload); None on EOF."""
    line = await reader.readline()
    if not line:
        return None
    if not line.endswith(b"\n"):
        raise ProtocolError("truncated status line")
    ok = parse_status(line)
    if ok is None:
        return line
    try:
        return line + await reader.readexactly(ok[1])
    except asyncio.IncompleteReadError:
        raise ProtocolError("truncated reply payload") from None


# -- database stub ------------------------------------------------------------


@dataclass
class StubConfig:
    """Canned table sizes; rows returned per table and rows hit by writes."""

    rows: dict[str, int] = field(default_factory=dict)
    default_rows: int = 1
    affected: dict[str, int] = field(default_factory=dict)
    default_affected: int = 1

    @classmethod
    def load(cls, path: str | Path) -> "StubConfig":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            rows={k.lower(): int(v) for k, v in data.get("rows", {}).items()},
            default_rows=int(data.get("default_rows", 1)),
            affected={k.lower(): int(v) for k, v in data.get("affected", {}).items()},
            default_affected=int(data.get("default_affected", 1)),
        )


def _first_table(sel: ast.Select) -> Optional[str]:
    for src in list(sel.sources) + [j.source for j in sel.joins]:
        if isinstance(src, ast.TableRef):
            return src.name
        inner = _first_table(src.query)
        if inner is not None:
            return inner
    return None


class DbStub:
    def __init__(self, schema: Schema, config: Optional[StubConfig] = None) -> None:
        self.schema = schema
        self.config = config or StubConfig()
        self.received = bytearray()  # every byte delivered to the stub
        self.server: Optional[asyncio.AbstractServer] = None

    def respond(self, line: str) -> bytes:
        """Deterministic reply for one statement (without its newline)."""
        try:
            st = ast.parse(line)
            x = extract(st, self.schema)
        except (ast.ParseError, ExtractionError, RecursionError):
            return b"ERR parse\n"
        root = st.root
        cfg = self.config
        if isinstance(root, ast.Select):
            table = _first_table(root)
            rows = cfg.rows.get(table or "", cfg.default_rows)
            cols = [str(o) for o in sorted(x.reads, key=lambda o: o.sort_key) if not o.is_table]
            payload = "".join(
                "\t".join(f"{c}#{i}" for c in cols) + "\n" for i in range(rows)
            ).encode()
        elif isinstance(root, (ast.Show, ast.Describe)):
            if isinstance(root, ast.Show) and root.what == "TABLES":
                names = list(self.schema.tables)
            else:
                names = list(self.schema.columns(root.table or ""))
            rows = len(names)
            payload = "".join(n + "\n" for n in names).encode()
        elif isinstance(root, ast.Insert):
            return f"OK rows={len(root.rows)} bytes=0\n".encode()
        else:
            assert isinstance(root, ast.Update)
            n = cfg.affected.get(root.table, cfg.default_affected)
            return f"OK rows={n} bytes=0\n".encode()
        return f"OK rows={rows} bytes={len(payload)}\n".encode() + payload

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            while True:
                line = await reader.readline()
                if not line:
                    break
                self.received += line
                text = line.decode("utf-8", errors="replace").rstrip("\r\n")
                writer.write(self.respond(text))
                await writer.drain()
        except (ConnectionError, asyncio.LimitOverrunError, ValueError):
            pass
        finally:
            await close_writer(writer)

    async def start(self, ep: Endpoint) -> Endpoint:
        self.server, bound = await start_server(self._handle, ep)
        return bound

    async def stop(self) -> None:
        if self.server is not None:
            self.server.close()
            await self.server.wait_closed()


# -- capture proxy ------------------------------------------------------------


class CaptureProxy:
    def __init__(
        self,
        upstream: Endpoint,
        recorder: Endpoint,
        extractor: ExtractorPool,
        timings: Optional[StageTimings] = None,
    ) -> None:
        self.upstream = upstream
        self.recorder = recorder
        self.extractor = extractor
        self.timings = timings
        self.server: Optional[asyncio.AbstractServer] = None
        self.connections = 0
        self.dropped = 0
        self._tasks: set[asyncio.Task] = set()

    async def start(self, ep: Endpoint) -> Endpoint:
        await self.extractor.start()
        self.server, bound = await start_server(self._handle, ep)
        return bound

    async def stop(self) -> None:
        if self.server is not None:
            self.server.close()
            await self.server.wait_closed()
        await self.extractor.close()

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        self.connections += 1
        up_w: Optional[asyncio.StreamWriter] = None
        rec: Optional[RecorderClient] = None
        try:
            first = await reader.readline()
            m = _HANDSHAKE_RE.match(first)
            if m is None:
                log.warning("connection without worker handshake dropped")
                self.dropped += 1
                return
            worker = int(m.group(1))
            rec = await RecorderClient.connect(self.recorder)
            try:
                up_r, up_w = await open_connection(self.upstream)
            except OSError:
                up_r = up_w = None
            while True:
                line = await reader.readline()
                if not line:
                    break
                if up_w is None:
                    writer.write(b"ERR upstream\n")
                    await writer.drain()
                    continue
                keep = await self._statement(worker, line, up_r, up_w, writer, rec)
                if keep is None:  # upstream went away
                    await close_writer(up_w)
                    up_w = None
                elif not keep:
                    self.dropped += 1
                    break
        except (ConnectionError, asyncio.IncompleteReadError, ProtocolError, ValueError) as exc:
            log.info("proxy connection ended: %r", exc)
        finally:
            await close_writer(up_w)
            await close_writer(writer)
            if rec is not None:
                await rec.close()

    async def _statement(
        self,
        worker: int,
        line: bytes,
        up_r: asyncio.StreamReader,
        up_w: asyncio.StreamWriter,
        writer: asyncio.StreamWriter,
        rec: RecorderClient,
    ) -> Optional[bool]:
        """Handle one statement; False drops the connection, None means upstream is gone."""
        t0 = time.perf_counter()
        up_w.write(line)
        await up_w.drain()
        sql = line.decode("utf-8", errors="replace").rstrip("\r\n")
        reply_task = asyncio.ensure_future(read_db_reply(up_r))
        result = await self.extractor.extract(sql, worker)
        if not result.ok:
            reply_task.cancel()
            log.warning("worker %d: rejected statement (%s)", worker, result.error)
            await rec.send([ProvEvent.parse_failure(worker, sql)])
            return False
        try:
            reply = await reply_task
        except ProtocolError:
            reply = None
        if reply is None:
            writer.write(b"ERR upstream\n")
            await writer.drain()
            return None
        events = list(result.events)
        status = parse_status(reply[: reply.index(b"\n") + 1])
        if status is not None:
            events.append(ProvEvent.response_impact(worker, status[1], status[0]))
        t1 = time.perf_counter()
        await rec.send(events)
        t2 = time.perf_counter()
        writer.write(reply)
        await writer.drain()
        if self.timings is not None:
            total = time.perf_counter() - t0
            self.timings.record("parse", result.elapsed)
            self.timings.record("transmit", t2 - t1)
            self.timings.record("other", max(0.0, total - result.elapsed - (t2 - t1)))
        return True
