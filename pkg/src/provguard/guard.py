"""Egress guard: decides per response whether its ancestry may leave the host.

Policy file grammar, one rule per line::

    ALLOW|DENY [pattern, pattern, ...] SIZE=<n>
    # comment
    DEFAULT ALLOW|DENY            optional, last non-comment line

A pattern is ``table.column``, ``table.*`` (anything in the table) or
``table`` (the table-level object).
"""

from __future__ import annotations

import asyncio
import enum
import logging
import re
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .model import SqlObject
from .net import Endpoint, close_writer, open_connection, start_server
from .proxy import ProtocolError
from .recorder import AncestrySummary, GcVerdict, RecorderClient, RecorderError
from .shim import encode_response, read_preamble, read_response

log = logging.getLogger(__name__)

BLOCKED_BODY = b"403 blocked by provenance policy"
_IDENT = r"[a-z_][a-z0-9_$]*"
_PATTERN_RE = re.compile(rf"^({_IDENT})(?:\.({_IDENT}|\*))?$")
_RULE_RE = re.compile(r"^(ALLOW|DENY)\s*\[(.*)\]\s*SIZE\s*=\s*(\d+)$", re.IGNORECASE)
_DEFAULT_RE = re.compile(r"^DEFAULT\s+(ALLOW|DENY)$", re.IGNORECASE)


class PolicySyntax(ValueError):
    def __init__(self, line: int, msg: str) -> None:
        super().__init__(f"policy line {line}: {msg}")
        self.line = line


class Action(str, enum.Enum):
    ALLOW = "ALLOW"
    DENY = "DENY"


@dataclass(frozen=True)
class Pattern:
    table: str
    column: Optional[str]  # None = table-level object, "*" = whole table

    @classmethod
    def parse(cls, text: str) -> "Pattern":
        m = _PATTERN_RE.match(text.strip().lower())
        if m is None:
            raise ValueError(f"bad object pattern {text!r}")
        return cls(m.group(1), m.group(2))

    def matches(self, obj: SqlObject) -> bool:
        if obj.table != self.table:
            return False
        return self.column == "*" or obj.column == self.column

    def __str__(self) -> str:
        return self.table if self.column is None else f"{self.table}.{self.column}"


@dataclass(frozen=True)
class PolicyRule:
    action: Action
    objects: tuple[Pattern, ...]
    size_limit: int = 0

    def covers(self, ancestors: set[SqlObject]) -> bool:
        return all(any(p.matches(o) for o in ancestors) for p in self.objects)

    def __str__(self) -> str:
        objs = ", ".join(str(p) for p in self.objects)
        return f"{self.action.value} [{objs}] SIZE={self.size_limit}"


@dataclass(frozen=True)
class Policy:
    rules: tuple[PolicyRule, ...] = ()
    default: Action = Action.ALLOW


def parse_policy(text: str) -> Policy:
    rules: list[PolicyRule] = []
    default: Optional[Action] = None
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if default is not None:
            raise PolicySyntax(n, "DEFAULT must be the last rule")
        m = _DEFAULT_RE.match(line)
        if m:
            default = Action(m.group(1).upper())
            continue
        m = _RULE_RE.match(line)
        if m is None:
            raise PolicySyntax(n, f"cannot parse {line!r}")
        items = [s for s in (x.strip() for x in m.group(2).split(",")) if s]
        if not items:
            raise PolicySyntax(n, "empty object list")
        try:
            pats = tuple(Pattern.parse(s) for s in items)
        except ValueError as exc:
            raise PolicySyntax(n, str(exc)) from None
        rules.append(PolicyRule(Action(m.group(1).upper()), pats, int(m.group(3))))
    return Policy(tuple(rules), default or Action.ALLOW)


def load_policy(path: str | Path, default: Optional[str] = None) -> Policy:
    p = parse_policy(Path(path).read_text(encoding="utf-8"))
    if default is not None:
        p = Policy(p.rules, Action(default.upper()))
    return p


@dataclass(frozen=True)
class Verdict:
    decision: Action
    rule_index: Optional[int]  # None when the default (or a non-rule trigger) decided
    trigger: str  # "rule", "size", "taint", "default" or "fail-closed"
    ancestry: Optional[AncestrySummary]
    reason: str

    @property
    def allowed(self) -> bool:
        return self.decision is Action.ALLOW


def evaluate(policy: Policy, a: AncestrySummary) -> Verdict:
    if a.tainted:
        return Verdict(Action.DENY, None, "taint", a, "unit contains an unparseable statement")
    objs = a.objects()
    for i, rule in enumerate(policy.rules):
        if not rule.covers(objs):
            continue
        if rule.action is Action.DENY and rule.size_limit > 0:
            if a.impact_bytes > rule.size_limit:
                return Verdict(
                    Action.DENY, i, "size", a,
                    f"rule {i} ({rule}): {a.impact_bytes} bytes exceeds {rule.size_limit}",
                )
            continue
        return Verdict(rule.action, i, "rule", a, f"rule {i} ({rule})")
    return Verdict(policy.default, None, "default", a, f"default {policy.default.value}")


def fail_closed(reason: str) -> Verdict:
    return Verdict(Action.DENY, None, "fail-closed", None, reason)


@dataclass
class Decision:
    worker: int
    uuid: Optional[str]
    verdict: Verdict
    query_seconds: float


class NetworkGuard:
    def __init__(
        self,
        upstream: Endpoint,
        recorder: Endpoint,
        policy: Policy,
        gc: bool = True,
    ) -> None:
        self.upstream = upstream
        self.recorder = recorder
        self.policy = policy
        self.gc = gc
        self.decisions: list[Decision] = []
        self.server: Optional[asyncio.AbstractServer] = None
        self._rec: Optional[RecorderClient] = None
        self._active: set[asyncio.Task] = set()

    async def start(self, ep: Endpoint) -> Endpoint:
        self.server, bound = await start_server(self._handle, ep)
        return bound

    async def stop(self) -> None:
        if self.server is not None:
            self.server.close()
            await self.server.wait_closed()
        # let in-flight verdicts finish their gc call
        if self._active:
            await asyncio.wait(list(self._active), timeout=5)
        if self._rec is not None:
            await self._rec.close()
            self._rec = None

    async def _client(self) -> RecorderClient:
        if self._rec is None:
            self._rec = await RecorderClient.connect(self.recorder)
        return self._rec

    async def decide(self, worker: int) -> Decision:
        t0 = time.perf_counter()
        try:
            rec = await self._client()
            a = await rec.ancestry(worker)
        except (RecorderError, OSError, ValueError, asyncio.IncompleteReadError) as exc:
            log.error("ancestry query for worker %d failed, denying: %r", worker, exc)
            if self._rec is not None:
                await self._rec.close()
                self._rec = None
            return Decision(worker, None, fail_closed(repr(exc)), time.perf_counter() - t0)
        dt = time.perf_counter() - t0
        return Decision(worker, a.uuid, evaluate(self.policy, a), dt)

    async def _pump(self, src: asyncio.StreamReader, dst: asyncio.StreamWriter) -> None:
        try:
            while True:
                chunk = await src.read(65536)
                if not chunk:
                    break
                dst.write(chunk)
                await dst.drain()
            # no half-close upstream: the worker stays held until the verdict is out
        except (ConnectionError, OSError):
            pass

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        up_w: Optional[asyncio.StreamWriter] = None
        pump: Optional[asyncio.Task] = None
        me = asyncio.current_task()
        if me is not None:
            self._active.add(me)
        try:
            up_r, up_w = await open_connection(self.upstream)
            pump = asyncio.ensure_future(self._pump(reader, up_w))
            worker = await read_preamble(up_r)
            if worker is None:
                return
            got = await read_response(up_r)
            if got is None:
                raise ProtocolError("upstream closed before the response")
            d = await self.decide(worker)
            self.decisions.append(d)
            if d.verdict.allowed:
                writer.write(got[0])
            else:
                log.warning("worker %d unit %s blocked: %s", worker, d.uuid, d.verdict.reason)
                writer.write(encode_response(403, BLOCKED_BODY))
            await writer.drain()
            if self.gc and d.uuid is not None:
                verdict = GcVerdict.ALLOWED if d.verdict.allowed else GcVerdict.SUSPICIOUS
                try:
                    await (await self._client()).gc(d.uuid, verdict)
                except (RecorderError, OSError) as exc:
                    log.error("gc of %s failed: %r", d.uuid, exc)
        except (ConnectionError, OSError, ProtocolError) as exc:
            log.info("guard connection ended: %r", exc)
        finally:
            self._active.discard(me)  # type: ignore[arg-type]
            if pump is not None:
                pump.cancel()
            await close_writer(up_w)
            await close_writer(writer)

    def query_times(self) -> list[float]:
        return [d.query_seconds for d in self.decisions]
