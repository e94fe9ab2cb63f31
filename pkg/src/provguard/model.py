"""Domain vocabulary shared by every component, plus the framed wire codec.

A frame is a 4-byte big-endian payload length followed by a UTF-8 payload of
tab-separated fields.  Provenance events put their kind first and the worker
id second; control messages used by the recorder reuse the same framing.
"""

from __future__ import annotations

import asyncio
import enum
import ipaddress
import re
import struct
import uuid as uuidlib
from dataclasses import dataclass
from typing import Iterable, Iterator, Optional, Sequence

MAX_FRAME = 1 << 20  # 1 MiB payload limit
_HEADER = struct.Struct(">I")
_IDENT_BAD = re.compile(r"[\s.`'\"]")
_UUID_RE = re.compile(r"^[0-9a-f]{8}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{12}$")


class WireError(Exception):
    """Base class for framing and codec failures."""


class NeedMoreData(WireError):
    pass


class FrameTooLarge(WireError):
    pass


class UnknownKind(WireError):
    pass


class MalformedFrame(WireError):
    pass


class EncodingError(WireError):
    """A field cannot be represented in a frame (embedded tab/newline)."""


@dataclass(frozen=True)
class SqlObject:
    """A database table, or one column of it.  Names are case-folded."""

    table: str
    column: Optional[str] = None

    def __post_init__(self) -> None:
        table = self.table.lower() if isinstance(self.table, str) else self.table
        column = self.column.lower() if isinstance(self.column, str) else self.column
        if column == "":
            column = None
        if not isinstance(table, str) or not table or _IDENT_BAD.search(table):
            raise ValueError(f"invalid table name {self.table!r}")
        if column is not None and _IDENT_BAD.search(column):
            raise ValueError(f"invalid column name {self.column!r}")
        object.__setattr__(self, "table", table)
        object.__setattr__(self, "column", column)

    @property
    def is_table(self) -> bool:
        return self.column is None

    @property
    def sort_key(self) -> tuple[str, str]:
        return (self.table, self.column or "")

    def __str__(self) -> str:
        return self.table if self.column is None else f"{self.table}.{self.column}"

    @classmethod
    def parse(cls, text: str) -> "SqlObject":
        table, _, column = text.strip().partition(".")
        return cls(table, column or None)


def sorted_objects(objs: Iterable[SqlObject]) -> list[SqlObject]:
    return sorted(objs, key=lambda o: o.sort_key)


def check_worker(worker: int) -> int:
    if isinstance(worker, bool) or not isinstance(worker, int) or worker <= 0:
        raise ValueError(f"worker id must be a positive integer, got {worker!r}")
    return worker


@dataclass(frozen=True)
class RemoteAddr:
    host: str
    port: int

    def __post_init__(self) -> None:
        ipaddress.IPv4Address(self.host)
        if not 0 <= self.port <= 65535:
            raise ValueError(f"port out of range: {self.port}")

    def __str__(self) -> str:
        return f"{self.host}:{self.port}"

    @classmethod
    def parse(cls, text: str) -> "RemoteAddr":
        host, sep, port = text.rpartition(":")
        if not sep:
            raise ValueError(f"expected host:port, got {text!r}")
        return cls(host, int(port))


def new_uuid() -> str:
    return str(uuidlib.uuid4())


def check_uuid(value: str) -> str:
    if not isinstance(value, str) or not _UUID_RE.match(value):
        raise ValueError(f"not a canonical lowercase uuid: {value!r}")
    return value


class UnitState(str, enum.Enum):
    OPEN = "OPEN"
    CLOSED = "CLOSED"


@dataclass(frozen=True)
class UnitOfWork:
    uuid: str
    worker: int
    remote_addr: RemoteAddr
    started_at: int
    state: UnitState = UnitState.OPEN
    ended_at: Optional[int] = None

    def __post_init__(self) -> None:
        check_uuid(self.uuid)
        check_worker(self.worker)
        if (self.ended_at is None) != (self.state is UnitState.OPEN):
            raise ValueError("ended_at must be set exactly when the unit is CLOSED")
        if self.ended_at is not None and self.ended_at < self.started_at:
            raise ValueError("ended_at precedes started_at")


class EventKind(str, enum.Enum):
    SQL_READ = "SQL_READ"
    SQL_USED = "SQL_USED"
    SQL_WASGENERATEDBY = "SQL_WASGENERATEDBY"
    UNIT_START = "UNIT_START"
    UNIT_END = "UNIT_END"
    PARSE_FAILURE = "PARSE_FAILURE"
    RESPONSE_IMPACT = "RESPONSE_IMPACT"

    @property
    def is_sql(self) -> bool:
        return self in SQL_KINDS


SQL_KINDS = frozenset({EventKind.SQL_READ, EventKind.SQL_USED, EventKind.SQL_WASGENERATEDBY})
EVENT_KIND_NAMES = frozenset(k.value for k in EventKind)


@dataclass(frozen=True)
class ProvEvent:
    """One provenance message.  Which optional fields are set depends on kind."""

    kind: EventKind
    worker: int
    obj: Optional[SqlObject] = None
    uuid: Optional[str] = None
    remote_addr: Optional[RemoteAddr] = None
    raw: Optional[str] = None
    impact_bytes: Optional[int] = None
    impact_rows: Optional[int] = None

    def __post_init__(self) -> None:
        kind = EventKind(self.kind)
        object.__setattr__(self, "kind", kind)
        check_worker(self.worker)
        present = {
            "obj": self.obj is not None,
            "uuid": self.uuid is not None,
            "remote_addr": self.remote_addr is not None,
            "raw": self.raw is not None,
            "impact": self.impact_bytes is not None or self.impact_rows is not None,
        }
        if kind in SQL_KINDS:
            want = {"obj"}
        elif kind is EventKind.UNIT_START:
            want = {"uuid", "remote_addr"}
        elif kind is EventKind.UNIT_END:
            want = {"uuid"}
        elif kind is EventKind.PARSE_FAILURE:
            want = {"raw"}
        else:
            want = {"impact"}
        have = {k for k, v in present.items() if v}
        if have != want:
            raise ValueError(f"{kind.value} needs exactly {sorted(want)}, got {sorted(have)}")
        if self.uuid is not None:
            check_uuid(self.uuid)
        if kind is EventKind.RESPONSE_IMPACT:
            for n in (self.impact_bytes, self.impact_rows):
                if not isinstance(n, int) or n < 0:
                    raise ValueError("impact counts must be non-negative integers")

    # convenience constructors
    @classmethod
    def sql(cls, kind: EventKind, worker: int, obj: SqlObject) -> "ProvEvent":
        return cls(kind, worker, obj=obj)

    @classmethod
    def unit_start(cls, worker: int, uuid: str, remote_addr: RemoteAddr) -> "ProvEvent":
        return cls(EventKind.UNIT_START, worker, uuid=uuid, remote_addr=remote_addr)

    @classmethod
    def unit_end(cls, worker: int, uuid: str) -> "ProvEvent":
        return cls(EventKind.UNIT_END, worker, uuid=uuid)

    @classmethod
    def parse_failure(cls, worker: int, raw: str) -> "ProvEvent":
        return cls(EventKind.PARSE_FAILURE, worker, raw=raw)

    @classmethod
    def response_impact(cls, worker: int, nbytes: int, rows: int) -> "ProvEvent":
        return cls(EventKind.RESPONSE_IMPACT, worker, impact_bytes=nbytes, impact_rows=rows)

    def fields(self) -> list[str]:
        out = [self.kind.value, str(self.worker)]
        k = self.kind
        if k in SQL_KINDS:
            assert self.obj is not None
            out += [self.obj.table, self.obj.column or ""]
        elif k is EventKind.UNIT_START:
            out += [self.uuid, str(self.remote_addr)]
        elif k is EventKind.UNIT_END:
            out += [self.uuid]
        elif k is EventKind.PARSE_FAILURE:
            out += [self.raw]
        else:
            out += [str(self.impact_bytes), str(self.impact_rows)]
        return out


# -- framing -----------------------------------------------------------------


def encode_frame(fields: Sequence[str], *, free_tail: bool = False) -> bytes:
    """Join fields with tabs and prefix the length.

    With ``free_tail`` the last field may contain tabs and newlines; the
    decoder must then split with a bounded field count.
    """
    check = fields[:-1] if free_tail else fields
    for f in check:
        if "\t" in f or "\n" in f or "\r" in f:
            raise EncodingError(f"field contains a tab or newline: {f!r}")
    payload = "\t".join(fields).encode("utf-8")
    if len(payload) > MAX_FRAME:
        raise FrameTooLarge(f"payload of {len(payload)} bytes exceeds {MAX_FRAME}")
    return _HEADER.pack(len(payload)) + payload


def split_frame(buf: bytes | bytearray | memoryview) -> tuple[str, int]:
    """Return (payload text, bytes consumed) for the first frame in ``buf``."""
    if len(buf) < 4:
        raise NeedMoreData(4 - len(buf))
    (length,) = _HEADER.unpack_from(buf, 0)
    if length > MAX_FRAME:
        raise FrameTooLarge(f"declared length {length} exceeds {MAX_FRAME}")
    end = 4 + length
    if len(buf) < end:
        raise NeedMoreData(end - len(buf))
    try:
        text = bytes(buf[4:end]).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedFrame(f"payload is not UTF-8: {exc}") from None
    return text, end


def encode_event(e: ProvEvent) -> bytes:
    return encode_frame(e.fields(), free_tail=e.kind is EventKind.PARSE_FAILURE)


def _int(text: str, what: str) -> int:
    if not text.isdigit():
        raise MalformedFrame(f"{what} is not a non-negative integer: {text!r}")
    return int(text)


def event_from_payload(text: str) -> ProvEvent:
    kind_name, _, rest = text.partition("\t")
    if kind_name not in EVENT_KIND_NAMES:
        raise UnknownKind(kind_name)
    kind = EventKind(kind_name)
    worker_text, _, rest = rest.partition("\t")
    worker = _int(worker_text, "worker")
    try:
        if kind in SQL_KINDS:
            parts = rest.split("\t")
            if len(parts) != 2:
                raise MalformedFrame(f"{kind.value} expects table and column fields")
            return ProvEvent(kind, worker, obj=SqlObject(parts[0], parts[1] or None))
        if kind is EventKind.UNIT_START:
            parts = rest.split("\t")
            if len(parts) != 2:
                raise MalformedFrame("UNIT_START expects uuid and address")
            return ProvEvent(kind, worker, uuid=parts[0], remote_addr=RemoteAddr.parse(parts[1]))
        if kind is EventKind.UNIT_END:
            if "\t" in rest:
                raise MalformedFrame("UNIT_END expects a single uuid field")
            return ProvEvent(kind, worker, uuid=rest)
        if kind is EventKind.PARSE_FAILURE:
            return ProvEvent(kind, worker, raw=rest)
        parts = rest.split("\t")
        if len(parts) != 2:
            raise MalformedFrame("RESPONSE_IMPACT expects bytes and rows")
        return ProvEvent(
            kind, worker, impact_bytes=_int(parts[0], "bytes"), impact_rows=_int(parts[1], "rows")
        )
    except ValueError as exc:
        raise MalformedFrame(str(exc)) from None


def decode_event(buf: bytes | bytearray | memoryview) -> tuple[ProvEvent, int]:
    """Decode the first frame of ``buf``; returns the event and bytes consumed."""
    text, used = split_frame(buf)
    return event_from_payload(text), used


class FrameDecoder:
    """Incremental decoder: feed arbitrary chunks, pull complete payloads."""

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, data: bytes) -> None:
        self._buf += data

    def payloads(self) -> Iterator[str]:
        while True:
            try:
                text, used = split_frame(self._buf)
            except NeedMoreData:
                return
            del self._buf[:used]
            yield text

    def events(self) -> Iterator[ProvEvent]:
        for text in self.payloads():
            yield event_from_payload(text)

    @property
    def pending(self) -> int:
        return len(self._buf)


async def read_payload(reader: asyncio.StreamReader) -> Optional[str]:
    """Read one frame payload; None on clean EOF between frames."""
    try:
        header = await reader.readexactly(4)
    except asyncio.IncompleteReadError as exc:
        if not exc.partial:
            return None
        raise MalformedFrame("connection closed inside a frame header") from None
    (length,) = _HEADER.unpack(header)
    if length > MAX_FRAME:
        raise FrameTooLarge(f"declared length {length} exceeds {MAX_FRAME}")
    try:
        body = await reader.readexactly(length)
    except asyncio.IncompleteReadError:
        raise MalformedFrame("connection closed inside a frame body") from None
    try:
        return body.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedFrame(f"payload is not UTF-8: {exc}") from None


def decode_stream(data: bytes) -> list[ProvEvent]:
    """Decode a complete buffer of concatenated frames."""
    dec = FrameDecoder()
    dec.feed(data)
    events = list(dec.events())
    if dec.pending:
        raise NeedMoreData(f"{dec.pending} trailing bytes do not form a frame")
    return events
