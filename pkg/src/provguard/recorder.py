"""Versioned in-memory provenance graph with unit-scoped garbage collection,
plus the socket server and client that agents and the guard talk to.

Node kinds follow PROV: SQL entities (versioned per write), units of work
(activities), workers and remote hosts (agents) and attribute nodes holding
raw inputs that failed to parse.  Edges always point from the newer node to
the older one, so ingest can only ever add edges toward existing history.
"""

from __future__ import annotations

import asyncio
import enum
import itertools
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Callable, Iterable, Iterator, Optional, Union

from .model import (
    EventKind,
    MalformedFrame,
    ProvEvent,
    RemoteAddr,
    SqlObject,
    UnitState,
    WireError,
    check_uuid,
    decode_stream,
    encode_event,
    event_from_payload,
    EVENT_KIND_NAMES,
    read_payload,
)
from .net import Endpoint, FramedChannel, close_writer, frame, start_server

log = logging.getLogger(__name__)

UNATTRIBUTED = "00000000-0000-0000-0000-000000000000"


class RecorderError(Exception):
    code = "ERROR"


class OrphanEvent(RecorderError):
    code = "ORPHAN"


class UnknownUnit(RecorderError):
    code = "UNKNOWN_UNIT"


class UnitStillOpen(RecorderError):
    code = "UNIT_OPEN"


class NoActiveUnit(RecorderError):
    code = "NO_ACTIVE_UNIT"


class DuplicateUnit(RecorderError):
    code = "DUPLICATE_UNIT"


_ERRORS = {c.code: c for c in (RecorderError, OrphanEvent, UnknownUnit, UnitStillOpen, NoActiveUnit, DuplicateUnit)}


class GcVerdict(str, enum.Enum):
    ALLOWED = "ALLOWED"
    SUSPICIOUS = "SUSPICIOUS"


class Relation(str, enum.Enum):
    USED = "used"
    WAS_GENERATED_BY = "wasGeneratedBy"
    WAS_ASSOCIATED_WITH = "wasAssociatedWith"
    WAS_STARTED_BY = "wasStartedBy"
    HAS_ATTRIBUTE = "hasAttribute"


# -- node identities ----------------------------------------------------------


@dataclass(frozen=True)
class SqlEntity:
    obj: SqlObject
    version: int


@dataclass(frozen=True)
class UnitNode:
    uuid: str


@dataclass(frozen=True)
class WorkerNode:
    id: int


@dataclass(frozen=True)
class HostNode:
    addr: str


@dataclass(frozen=True)
class AttributeNode:
    owner: str
    index: int
    text: str


Node = Union[SqlEntity, UnitNode, WorkerNode, HostNode, AttributeNode]


@dataclass(frozen=True)
class Edge:
    src: Node
    dst: Node
    relation: Relation
    flag: Optional[str] = None  # "read" / "used" on USED edges


@dataclass
class UnitRecord:
    uuid: str
    worker: Optional[int]
    remote_addr: Optional[RemoteAddr]
    started_at: int
    state: UnitState = UnitState.OPEN
    ended_at: Optional[int] = None
    tainted: bool = False
    impact_bytes: int = 0
    impact_rows: int = 0
    events: list[ProvEvent] = field(default_factory=list)
    # reads kept off the graph because an edge would point forward in time
    unlinked: set[tuple[SqlObject, str]] = field(default_factory=set)
    n_attrs: int = 0


@dataclass(frozen=True)
class AncestrySummary:
    uuid: str
    remote_addr: Optional[RemoteAddr]
    ancestors: tuple[tuple[SqlObject, str], ...]
    tainted: bool = False
    impact_bytes: int = 0
    impact_rows: int = 0
    state: UnitState = UnitState.OPEN

    def objects(self) -> set[SqlObject]:
        return {o for o, _ in self.ancestors}

    def to_fields(self) -> list[str]:
        out = [
            self.uuid,
            str(self.remote_addr) if self.remote_addr else "",
            self.state.value,
            "1" if self.tainted else "0",
            str(self.impact_bytes),
            str(self.impact_rows),
        ]
        for obj, flag in self.ancestors:
            out += [str(obj), flag]
        return out

    @classmethod
    def from_fields(cls, f: list[str]) -> "AncestrySummary":
        if len(f) < 6 or (len(f) - 6) % 2:
            raise MalformedFrame("bad ancestry reply")
        pairs = tuple((SqlObject.parse(f[i]), f[i + 1]) for i in range(6, len(f), 2))
        return cls(
            uuid=f[0],
            remote_addr=RemoteAddr.parse(f[1]) if f[1] else None,
            ancestors=pairs,
            tainted=f[3] == "1",
            impact_bytes=int(f[4]),
            impact_rows=int(f[5]),
            state=UnitState(f[2]),
        )


_FLAG_FOR = {EventKind.SQL_READ: "read", EventKind.SQL_USED: "used"}


def _host_of(addr: RemoteAddr) -> str:
    return addr.host


class ProvGraph:
    def __init__(self, quarantine: Union[str, Path, BinaryIO, None] = None) -> None:
        self.nodes: dict[Node, int] = {}  # node -> logical creation tick
        self.out_edges: dict[Node, set[Edge]] = {}
        self.in_edges: dict[Node, set[Edge]] = {}
        self.latest: dict[SqlObject, int] = {}
        self.units: dict[str, UnitRecord] = {}
        self.open_units: dict[int, str] = {}
        self.current: dict[int, str] = {}
        self.orphans = 0
        self.quarantined = 0
        self.edge_count = 0
        self._tick = itertools.count(1)
        self._quarantine = quarantine
        self.quarantine_records: list[bytes] = []  # used when no log is configured

    # -- primitive graph ops --------------------------------------------------

    def _add_node(self, node: Node, tick: Optional[int] = None) -> Node:
        if node not in self.nodes:
            self.nodes[node] = next(self._tick) if tick is None else tick
            self.out_edges[node] = set()
            self.in_edges[node] = set()
        return node

    def _add_edge(self, edge: Edge) -> None:
        out = self.out_edges[edge.src]
        if edge not in out:
            out.add(edge)
            self.in_edges[edge.dst].add(edge)
            self.edge_count += 1

    def _remove_edge(self, edge: Edge) -> None:
        self.out_edges[edge.src].discard(edge)
        self.in_edges[edge.dst].discard(edge)
        self.edge_count -= 1

    def _remove_node(self, node: Node) -> None:
        for e in list(self.out_edges[node]) + list(self.in_edges[node]):
            self._remove_edge(e)
        del self.nodes[node], self.out_edges[node], self.in_edges[node]

    def _drop_if_idle(self, node: SqlEntity) -> None:
        """Forget a superseded version nothing points at any more."""
        if node not in self.nodes or self.latest.get(node.obj) == node.version:
            return
        if not self.out_edges[node] and not self.in_edges[node]:
            self._remove_node(node)

    def iter_edges(self) -> Iterator[Edge]:
        for edges in self.out_edges.values():
            yield from edges

    @property
    def node_count(self) -> int:
        return len(self.nodes)

    @property
    def size(self) -> int:
        """Storage proxy: nodes plus edges."""
        return len(self.nodes) + self.edge_count

    # -- ingest ---------------------------------------------------------------

    def _entity_for_read(self, obj: SqlObject) -> SqlEntity:
        version = self.latest.get(obj)
        if version is None:
            self.latest[obj] = 0
            # pre-existing data: older than anything captured
            return self._add_node(SqlEntity(obj, 0), tick=0)  # type: ignore[return-value]
        node = SqlEntity(obj, version)
        return self._add_node(node)  # type: ignore[return-value]

    def _unattributed(self) -> UnitRecord:
        rec = self.units.get(UNATTRIBUTED)
        if rec is None:
            rec = UnitRecord(UNATTRIBUTED, None, None, time.monotonic_ns())
            self.units[UNATTRIBUTED] = rec
            self._add_node(UnitNode(UNATTRIBUTED))
        return rec

    def ingest(self, e: ProvEvent) -> str:
        """Apply one event; returns the uuid of the unit it was attributed to."""
        k = e.kind
        if k is EventKind.UNIT_START:
            self._unit_start(e)
            return e.uuid  # type: ignore[return-value]
        if k is EventKind.UNIT_END:
            self._unit_end(e)
            return e.uuid  # type: ignore[return-value]
        uuid = self.open_units.get(e.worker)
        orphan = uuid is None
        rec = self._unattributed() if orphan else self.units[uuid]  # type: ignore[index]
        rec.events.append(e)
        unit = UnitNode(rec.uuid)
        if k in (EventKind.SQL_READ, EventKind.SQL_USED):
            flag = _FLAG_FOR[k]
            ent = self._entity_for_read(e.obj)  # type: ignore[arg-type]
            if self.nodes[ent] < self.nodes[unit]:
                self._add_edge(Edge(unit, ent, Relation.USED, flag))
            elif not self.in_edges[unit]:
                # version is newer than the unit, which has generated nothing yet:
                # re-date the unit so its edges keep pointing back in time
                self.nodes[unit] = next(self._tick)
                self._add_edge(Edge(unit, ent, Relation.USED, flag))
            else:
                # own write, or a concurrent writer after this unit wrote: an edge could close a cycle
                rec.unlinked.add((ent.obj, flag))
        elif k is EventKind.SQL_WASGENERATEDBY:
            obj = e.obj
            assert obj is not None
            prev = self.latest.get(obj)
            version = 0 if prev is None else prev + 1
            self.latest[obj] = version
            if prev is not None:
                self._drop_if_idle(SqlEntity(obj, prev))
            ent = self._add_node(SqlEntity(obj, version))
            self._add_edge(Edge(ent, unit, Relation.WAS_GENERATED_BY))
        elif k is EventKind.PARSE_FAILURE:
            # an annotation of the unit: dated with it so edges still point back in time
            attr = self._add_node(AttributeNode(rec.uuid, rec.n_attrs, e.raw or ""), tick=self.nodes[unit])
            rec.n_attrs += 1
            rec.tainted = True
            self._add_edge(Edge(unit, attr, Relation.HAS_ATTRIBUTE))
        elif k is EventKind.RESPONSE_IMPACT:
            rec.impact_bytes += e.impact_bytes or 0
            rec.impact_rows += e.impact_rows or 0
        if orphan:
            self.orphans += 1
            raise OrphanEvent(f"{k.value} from worker {e.worker} outside any unit")
        return rec.uuid

    def _unit_start(self, e: ProvEvent) -> None:
        assert e.uuid is not None and e.remote_addr is not None
        if e.uuid in self.units:
            raise DuplicateUnit(e.uuid)
        stale = self.open_units.get(e.worker)
        if stale is not None:
            # the handler never reported its end; close it so the worker invariant holds
            log.warning("worker %d started %s while %s was open", e.worker, e.uuid, stale)
            self._close(self.units[stale])
        rec = UnitRecord(e.uuid, e.worker, e.remote_addr, time.monotonic_ns())
        rec.events.append(e)
        self.units[e.uuid] = rec
        worker = self._add_node(WorkerNode(e.worker))
        host = self._add_node(HostNode(_host_of(e.remote_addr)))
        unit = self._add_node(UnitNode(e.uuid))
        self._add_edge(Edge(unit, worker, Relation.WAS_ASSOCIATED_WITH))
        self._add_edge(Edge(unit, host, Relation.WAS_STARTED_BY))
        self.open_units[e.worker] = e.uuid
        self.current[e.worker] = e.uuid

    def _close(self, rec: UnitRecord) -> None:
        rec.state = UnitState.CLOSED
        rec.ended_at = max(time.monotonic_ns(), rec.started_at)
        if rec.worker is not None and self.open_units.get(rec.worker) == rec.uuid:
            del self.open_units[rec.worker]

    def _unit_end(self, e: ProvEvent) -> None:
        rec = self.units.get(e.uuid or "")
        if rec is None or rec.uuid == UNATTRIBUTED:
            raise UnknownUnit(e.uuid)
        rec.events.append(e)
        if rec.state is UnitState.OPEN:
            self._close(rec)

    def ingest_all(self, events: Iterable[ProvEvent]) -> int:
        """Ingest a sequence, tolerating orphans; returns how many were orphaned."""
        before = self.orphans
        for e in events:
            try:
                self.ingest(e)
            except OrphanEvent:
                pass
        return self.orphans - before

    # -- queries --------------------------------------------------------------

    def summary(self, uuid: str) -> AncestrySummary:
        rec = self.units.get(uuid)
        if rec is None:
            raise UnknownUnit(uuid)
        unit = UnitNode(uuid)
        pairs: set[tuple[SqlObject, str]] = set(rec.unlinked)
        for edge in self.out_edges[unit]:
            if edge.relation is Relation.USED:
                pairs.add((edge.dst.obj, edge.flag))  # type: ignore[union-attr]
        for edge in self.in_edges[unit]:
            if edge.relation is Relation.WAS_GENERATED_BY:
                pairs.add((edge.src.obj, "wrote"))  # type: ignore[union-attr]
        ordered = tuple(sorted(pairs, key=lambda p: (p[0].sort_key, p[1])))
        return AncestrySummary(
            uuid, rec.remote_addr, ordered, rec.tainted, rec.impact_bytes, rec.impact_rows, rec.state
        )

    def ancestry(self, worker: int) -> AncestrySummary:
        uuid = self.current.get(worker)
        if uuid is None or uuid not in self.units:
            raise NoActiveUnit(f"worker {worker} has no current unit")
        return self.summary(uuid)

    # -- garbage collection ---------------------------------------------------

    def gc_unit(self, uuid: str, verdict: GcVerdict) -> None:
        verdict = GcVerdict(verdict)
        rec = self.units.get(uuid)
        if rec is None or uuid == UNATTRIBUTED:
            raise UnknownUnit(uuid)
        if rec.state is UnitState.OPEN:
            raise UnitStillOpen(uuid)
        if verdict is GcVerdict.SUSPICIOUS:
            self._write_quarantine(rec)
        unit = UnitNode(uuid)
        neighbours = [e.dst for e in self.out_edges[unit]] + [e.src for e in self.in_edges[unit]]
        self._remove_node(unit)
        for node in neighbours:
            if node not in self.nodes:
                continue
            if isinstance(node, AttributeNode):
                self._remove_node(node)
            elif isinstance(node, SqlEntity):
                self._drop_if_idle(node)
        del self.units[uuid]
        if rec.worker is not None and self.current.get(rec.worker) == uuid:
            del self.current[rec.worker]

    def _write_quarantine(self, rec: UnitRecord) -> None:
        blob = b"".join(encode_event(e) for e in rec.events)
        self.quarantined += 1
        target = self._quarantine
        if target is None:
            self.quarantine_records.append(blob)
        elif isinstance(target, (str, Path)):
            with open(target, "ab") as fh:
                fh.write(blob)
        else:
            target.write(blob)
            target.flush()

    # -- rendering ------------------------------------------------------------

    def export_dot(self, uuid: Optional[str] = None) -> str:
        if uuid is None:
            nodes = set(self.nodes)
            edges = set(self.iter_edges())
        elif UnitNode(uuid) in self.nodes:
            unit = UnitNode(uuid)
            edges = self.out_edges[unit] | self.in_edges[unit]
            nodes = {unit} | {e.src for e in edges} | {e.dst for e in edges}
        else:
            nodes, edges = set(), set()
        return render_dot(nodes, edges)


def _node_key(node: Node) -> tuple:
    if isinstance(node, UnitNode):
        return (0, node.uuid)
    if isinstance(node, WorkerNode):
        return (1, f"{node.id:012d}")
    if isinstance(node, HostNode):
        return (2, node.addr)
    if isinstance(node, SqlEntity):
        return (3, node.obj.sort_key, node.version)
    return (4, node.owner, node.index)


def _dot_escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n")


def _node_attrs(node: Node) -> str:
    if isinstance(node, UnitNode):
        return f'label="unit {node.uuid}", shape=box'
    if isinstance(node, WorkerNode):
        return f'label="worker {node.id}", shape=house'
    if isinstance(node, HostNode):
        return f'label="host {node.addr}", shape=house'
    if isinstance(node, SqlEntity):
        return f'label="{node.obj} v{node.version}", shape=ellipse'
    return f'label="{_dot_escape(node.text)}", shape=note'


def render_dot(nodes: Iterable[Node], edges: Iterable[Edge]) -> str:
    ordered = sorted(nodes, key=_node_key)
    ids = {n: f"n{i}" for i, n in enumerate(ordered)}
    lines = ["digraph prov {"]
    for n in ordered:
        lines.append(f"  {ids[n]} [{_node_attrs(n)}];")
    edge_lines = []
    for e in edges:
        label = e.relation.value if e.flag is None else f"{e.relation.value} ({e.flag})"
        edge_lines.append(f'  {ids[e.src]} -> {ids[e.dst]} [label="{label}"];')
    lines += sorted(edge_lines)
    lines.append("}")
    return "\n".join(lines) + "\n"


def load_quarantine(data: bytes) -> ProvGraph:
    """Replay a quarantine log into a fresh graph (units end up CLOSED)."""
    g = ProvGraph()
    g.ingest_all(decode_stream(data))
    return g


# -- socket server ------------------------------------------------------------

CONTROL_KINDS = frozenset({"SYNC", "ANCESTRY", "GC", "STATS", "DOT"})

# observer called with (event, uuid it was attributed to) after each ingest
Tap = Callable[[ProvEvent, str], None]


class RecorderServer:
    """Single event loop owning the graph; agents stream frames at it."""

    def __init__(self, graph: Optional[ProvGraph] = None, tap: Optional[Tap] = None) -> None:
        self.graph = graph or ProvGraph()
        self.tap = tap
        self.malformed = 0
        self.errors: dict[str, int] = {}
        self.server: Optional[asyncio.AbstractServer] = None
        self.endpoint: Optional[Endpoint] = None

    async def start(self, ep: Endpoint) -> Endpoint:
        self.server, self.endpoint = await start_server(self._handle, ep)
        return self.endpoint

    async def stop(self) -> None:
        if self.server is not None:
            self.server.close()
            await self.server.wait_closed()

    def _count(self, exc: RecorderError) -> None:
        self.errors[exc.code] = self.errors.get(exc.code, 0) + 1

    def stats(self) -> dict[str, int]:
        g = self.graph
        return {
            "nodes": g.node_count,
            "edges": g.edge_count,
            "units": len(g.units),
            "open_units": len(g.open_units),
            "orphans": g.orphans,
            "malformed": self.malformed,
            "quarantined": g.quarantined,
        }

    def handle_payload(self, payload: str) -> Optional[bytes]:
        """Apply one frame; returns the reply frame for control messages."""
        kind, _, rest = payload.partition("\t")
        if kind in EVENT_KIND_NAMES:
            event = event_from_payload(payload)
            try:
                uuid = self.graph.ingest(event)
            except OrphanEvent as exc:
                self._count(exc)
                uuid = UNATTRIBUTED
            except RecorderError as exc:
                self._count(exc)
                return None
            if self.tap is not None:
                self.tap(event, uuid)
            return None
        if kind not in CONTROL_KINDS:
            raise MalformedFrame(f"unknown message kind {kind!r}")
        args = rest.split("\t") if rest else []
        try:
            if kind == "SYNC":
                return frame("ACK", *args)
            if kind == "ANCESTRY":
                s = self.graph.ancestry(int(args[0]))
                return frame("ANCESTRY", *s.to_fields())
            if kind == "GC":
                self.graph.gc_unit(check_uuid(args[0]), GcVerdict(args[1]))
                return frame("OK")
            if kind == "STATS":
                st = self.stats()
                return frame("STATS", *(f"{k}={v}" for k, v in st.items()))
            uuid = args[0] if args and args[0] else None
            if uuid is not None and uuid not in self.graph.units:
                raise UnknownUnit(uuid)
            return frame("DOT", self.graph.export_dot(uuid), free_tail=True)
        except RecorderError as exc:
            self._count(exc)
            return frame("ERR", exc.code, str(exc).replace("\t", " ").replace("\n", " "))
        except (ValueError, IndexError) as exc:
            return frame("ERR", "BAD_REQUEST", str(exc).replace("\t", " ").replace("\n", " "))

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            while True:
                payload = await read_payload(reader)
                if payload is None:
                    break
                reply = self.handle_payload(payload)
                if reply is not None:
                    writer.write(reply)
                    await writer.drain()
        except WireError as exc:
            self.malformed += 1
            log.warning("dropping recorder connection: %s", exc)
        except (ConnectionError, asyncio.IncompleteReadError):
            pass
        finally:
            await close_writer(writer)


class RecorderClient:
    """Async client used by the proxy, the worker shim and the guard."""

    def __init__(self, channel: FramedChannel) -> None:
        self.channel = channel
        self._token = itertools.count()

    @classmethod
    async def connect(cls, ep: Endpoint) -> "RecorderClient":
        return cls(await FramedChannel.connect(ep))

    async def send(self, events: Iterable[ProvEvent], sync: bool = True) -> None:
        """Stream events; with ``sync`` wait until the recorder has applied them."""
        blob = b"".join(encode_event(e) for e in events)
        if not sync:
            await self.channel.send(blob)
            return
        token = str(next(self._token))
        reply = await self.channel.request(blob + frame("SYNC", token))
        if reply != ["ACK", token]:
            raise RecorderError(f"unexpected sync reply {reply!r}")

    @staticmethod
    def _check(reply: list[str], expect: str) -> list[str]:
        if reply[0] == "ERR":
            cls = _ERRORS.get(reply[1], RecorderError)
            raise cls(reply[2] if len(reply) > 2 else reply[1])
        if reply[0] != expect:
            raise RecorderError(f"unexpected reply {reply[0]!r}")
        return reply[1:]

    async def ancestry(self, worker: int) -> AncestrySummary:
        reply = await self.channel.request(frame("ANCESTRY", str(worker)))
        return AncestrySummary.from_fields(self._check(reply, "ANCESTRY"))

    async def gc(self, uuid: str, verdict: GcVerdict) -> None:
        reply = await self.channel.request(frame("GC", uuid, GcVerdict(verdict).value))
        self._check(reply, "OK")

    async def stats(self) -> dict[str, int]:
        reply = self._check(await self.channel.request(frame("STATS")), "STATS")
        return {k: int(v) for k, v in (f.split("=", 1) for f in reply)}

    async def dot(self, uuid: Optional[str] = None) -> str:
        reply = await self.channel.request(frame("DOT", uuid or ""))
        return "\t".join(self._check(reply, "DOT"))

    async def close(self) -> None:
        await self.channel.close()


async def serve(graph: ProvGraph, ep: Endpoint) -> None:
    """Run a recorder until cancelled."""
    server = RecorderServer(graph)
    bound = await server.start(ep)
    log.info("recorder listening on %s", bound)
    try:
        await asyncio.Event().wait()
    finally:
        await server.stop()
