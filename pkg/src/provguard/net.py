"""Endpoint parsing and small asyncio stream helpers shared by the servers."""

from __future__ import annotations

import asyncio
from dataclasses import dataclass
from typing import Awaitable, Callable, Optional

from .model import encode_frame, read_payload

Handler = Callable[[asyncio.StreamReader, asyncio.StreamWriter], Awaitable[None]]


@dataclass(frozen=True)
class Endpoint:
    """``host:port`` for TCP or ``unix:/path`` for a Unix stream socket."""

    host: Optional[str] = None
    port: Optional[int] = None
    path: Optional[str] = None

    @classmethod
    def parse(cls, text: str) -> "Endpoint":
        if text.startswith("unix:"):
            path = text[len("unix:") :]
            if not path:
                raise ValueError("empty unix socket path")
            return cls(path=path)
        host, sep, port = text.rpartition(":")
        if not sep or not port.isdigit():
            raise ValueError(f"expected host:port or unix:/path, got {text!r}")
        return cls(host=host or "127.0.0.1", port=int(port))

    def __str__(self) -> str:
        return f"unix:{self.path}" if self.path else f"{self.host}:{self.port}"


async def open_connection(ep: Endpoint) -> tuple[asyncio.StreamReader, asyncio.StreamWriter]:
    if ep.path:
        return await asyncio.open_unix_connection(ep.path)
    return await asyncio.open_connection(ep.host, ep.port)


async def start_server(handler: Handler, ep: Endpoint) -> tuple[asyncio.AbstractServer, Endpoint]:
    """Start listening; returns the server and the bound endpoint (port 0 resolved)."""
    if ep.path:
        server = await asyncio.start_unix_server(handler, ep.path)
        return server, ep
    server = await asyncio.start_server(handler, ep.host, ep.port)
    host, port = server.sockets[0].getsockname()[:2]
    return server, Endpoint(host=host, port=port)


async def close_writer(writer: Optional[asyncio.StreamWriter]) -> None:
    if writer is None:
        return
    writer.close()
    try:
        await writer.wait_closed()
    except (ConnectionError, OSError):
        pass


class FramedChannel:
    """Request/response over length-prefixed frames; one request in flight."""

    def __init__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        self.reader = reader
        self.writer = writer
        self.lock = asyncio.Lock()

    @classmethod
    async def connect(cls, ep: Endpoint) -> "FramedChannel":
        r, w = await open_connection(ep)
        return cls(r, w)

    async def request(self, frames: bytes) -> list[str]:
        async with self.lock:
            self.writer.write(frames)
            await self.writer.drain()
            payload = await read_payload(self.reader)
        if payload is None:
            raise ConnectionError("peer closed the connection")
        return payload.split("\t")

    async def send(self, frames: bytes) -> None:
        async with self.lock:
            self.writer.write(frames)
            await self.writer.drain()

    async def close(self) -> None:
        await close_writer(self.writer)


def frame(*fields: str, free_tail: bool = False) -> bytes:
    return encode_frame(list(fields), free_tail=free_tail)
