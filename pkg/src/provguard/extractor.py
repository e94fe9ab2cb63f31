"""Parse-and-extract as a separate process.

One-shot use reads a statement on stdin and writes encoded event frames to
stdout, exiting 0 on success and 1 when the statement cannot be parsed or
resolved.  With ``--serve`` the process stays resident and answers framed
``EXTRACT`` requests on stdin; the proxy keeps a few of these around so that a
crash or hang costs one process, never the proxy itself.
"""

from __future__ import annotations

import argparse
import asyncio
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .extract import extract, to_events
from .model import (
    NeedMoreData, ProvEvent, WireError, decode_stream, encode_event, encode_frame, split_frame,
)
from .schema import ExtractionError, Schema, load_schema
from .sql import ParseError, parse

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 2.0


def run_once(sql: str, schema: Schema, worker: int) -> list[ProvEvent]:
    return to_events(extract(parse(sql), schema), worker)


def _serve(schema: Schema) -> int:
    stdin, stdout = sys.stdin.buffer, sys.stdout.buffer
    buf = bytearray()
    while True:
        try:
            text, used = split_frame(buf)
        except NeedMoreData:
            chunk = os.read(stdin.fileno(), 65536)
            if not chunk:
                return 0
            buf += chunk
            continue
        del buf[:used]
        kind, worker, sql = text.split("\t", 2)
        if kind != "EXTRACT":
            return 2
        try:
            events = run_once(sql, schema, int(worker))
        except (ParseError, ExtractionError, RecursionError) as exc:
            reply = encode_frame(["RESULT", "FAIL", f"{type(exc).__name__}: {exc}"], free_tail=True)
        else:
            reply = encode_frame(["RESULT", "OK", str(len(events))])
            reply += b"".join(encode_event(e) for e in events)
        stdout.write(reply)
        stdout.flush()


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = argparse.ArgumentParser(prog="provguard-extractor", description=__doc__.splitlines()[0])
    ap.add_argument("--schema", required=True)
    ap.add_argument("--worker", type=int, default=1)
    ap.add_argument("--serve", action="store_true", help="answer framed requests until EOF")
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        schema = load_schema(args.schema)
    except (OSError, ValueError) as exc:
        print(f"cannot load schema: {exc}", file=sys.stderr)
        return 2
    if args.serve:
        return _serve(schema)
    sql = sys.stdin.buffer.read().decode("utf-8", errors="replace").strip()
    try:
        events = run_once(sql, schema, args.worker)
    except (ParseError, ExtractionError, RecursionError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    sys.stdout.buffer.write(b"".join(encode_event(e) for e in events))
    sys.stdout.buffer.flush()
    return 0


# -- proxy side ---------------------------------------------------------------


@dataclass
class ExtractResult:
    ok: bool
    events: list[ProvEvent] = field(default_factory=list)
    error: str = ""
    elapsed: float = 0.0


def _child_env() -> dict[str, str]:
    env = dict(os.environ)
    src = str(Path(__file__).resolve().parent.parent)
    env["PYTHONPATH"] = src + (os.pathsep + env["PYTHONPATH"] if env.get("PYTHONPATH") else "")
    return env


class _Resident:
    def __init__(self, proc: asyncio.subprocess.Process) -> None:
        self.proc = proc

    async def ask(self, worker: int, sql: str) -> ExtractResult:
        assert self.proc.stdin is not None and self.proc.stdout is not None
        self.proc.stdin.write(encode_frame(["EXTRACT", str(worker), sql], free_tail=True))
        await self.proc.stdin.drain()
        head = await self._payload()
        kind, status, rest = (head.split("\t", 2) + ["", ""])[:3]
        if kind != "RESULT":
            raise WireError(f"unexpected extractor reply {kind!r}")
        if status != "OK":
            return ExtractResult(False, error=rest)
        events = []
        for _ in range(int(rest)):
            events.append(decode_stream(await self._frame())[0])
        return ExtractResult(True, events)

    async def _frame(self) -> bytes:
        assert self.proc.stdout is not None
        header = await self.proc.stdout.readexactly(4)
        body = await self.proc.stdout.readexactly(int.from_bytes(header, "big"))
        return header + body

    async def _payload(self) -> str:
        return (await self._frame())[4:].decode("utf-8")

    def kill(self) -> None:
        if self.proc.returncode is None:
            self.proc.kill()


class ExtractorPool:
    """Runs extraction outside the proxy process with a watchdog.

    With ``exec_path`` every statement spawns that executable (one-shot
    protocol, exit status decides).  Otherwise ``size`` resident processes
    are kept; one that hangs past ``timeout`` or dies is killed and replaced.
    """

    def __init__(
        self,
        schema_path: str | Path,
        size: int = 2,
        timeout: float = DEFAULT_TIMEOUT,
        exec_path: Optional[str] = None,
        resident_command: Optional[Sequence[str]] = None,
    ) -> None:
        self.schema_path = str(schema_path)
        self.size = max(1, size)
        self.timeout = timeout
        self.exec_path = exec_path
        self.command = list(resident_command) if resident_command else [
            sys.executable, "-m", "provguard.extractor", "--serve", "--schema", self.schema_path,
        ]
        self._idle: Optional[asyncio.Queue[_Resident]] = None
        self._all: set[_Resident] = set()
        self.failures = 0
        self.restarts = 0

    async def _spawn(self) -> _Resident:
        proc = await asyncio.create_subprocess_exec(
            *self.command,
            stdin=asyncio.subprocess.PIPE,
            stdout=asyncio.subprocess.PIPE,
            stderr=asyncio.subprocess.DEVNULL,
            env=_child_env(),
        )
        r = _Resident(proc)
        self._all.add(r)
        return r

    async def start(self) -> None:
        if self.exec_path is not None:
            return
        self._idle = asyncio.Queue()
        fresh = [await self._spawn() for _ in range(self.size)]
        # one throwaway request each so interpreter start-up is not billed to traffic
        await asyncio.gather(*(self._warm(r) for r in fresh), return_exceptions=True)
        for r in fresh:
            self._idle.put_nowait(r)

    async def _warm(self, r: _Resident) -> None:
        await asyncio.wait_for(r.ask(1, "SHOW TABLES"), max(self.timeout, 10.0))

    async def extract(self, sql: str, worker: int) -> ExtractResult:
        t0 = time.perf_counter()
        if self.exec_path is not None:
            res = await self._exec(sql, worker)
        else:
            res = await self._resident(sql, worker)
        res.elapsed = time.perf_counter() - t0
        if not res.ok:
            self.failures += 1
        return res

    async def _exec(self, sql: str, worker: int) -> ExtractResult:
        proc = await asyncio.create_subprocess_exec(
            self.exec_path, "--schema", self.schema_path, "--worker", str(worker),
            stdin=asyncio.subprocess.PIPE,
            stdout=asyncio.subprocess.PIPE,
            stderr=asyncio.subprocess.PIPE,
            env=_child_env(),
        )
        try:
            out, err = await asyncio.wait_for(proc.communicate(sql.encode("utf-8")), self.timeout)
        except asyncio.TimeoutError:
            proc.kill()
            await proc.wait()
            return ExtractResult(False, error="extractor timed out")
        if proc.returncode != 0:
            return ExtractResult(False, error=err.decode("utf-8", "replace").strip() or f"exit {proc.returncode}")
        try:
            return ExtractResult(True, decode_stream(out))
        except WireError as exc:
            return ExtractResult(False, error=f"bad extractor output: {exc}")

    async def _resident(self, sql: str, worker: int) -> ExtractResult:
        if self._idle is None:
            await self.start()
        assert self._idle is not None
        r = await self._idle.get()
        try:
            res = await asyncio.wait_for(r.ask(worker, sql), self.timeout)
        except asyncio.TimeoutError:
            res = ExtractResult(False, error="extractor timed out")
        except (WireError, asyncio.IncompleteReadError, ConnectionError, ValueError) as exc:
            res = ExtractResult(False, error=f"extractor crashed: {exc!r}")
        else:
            self._idle.put_nowait(r)
            return res
        # the process is hung or dead; replace it
        r.kill()
        self._all.discard(r)
        self.restarts += 1
        self._idle.put_nowait(await self._spawn())
        return res

    async def close(self) -> None:
        for r in list(self._all):
            r.kill()
            try:
                await asyncio.wait_for(r.proc.wait(), 2)
            except asyncio.TimeoutError:
                pass
        self._all.clear()


if __name__ == "__main__":
    sys.exit(main())
