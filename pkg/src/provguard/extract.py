"""Classify the persistent objects a statement touches.

Rules:

* SELECT: named columns in the select list and the FROM tables are *read*;
  columns in WHERE, JOIN ... ON, GROUP BY, HAVING and ORDER BY are *used*.
* INSERT/UPDATE: the target table and assigned columns are *written*; the
  right-hand side of SET and the WHERE clause are *used*.
* SHOW COLUMNS / DESCRIBE read the named table.
* Literals and function names never appear.

Aliases (table, column and derived-table) are resolved away, and subqueries are
unnested into the enclosing statement.  A subquery inside a non-primary clause
contributes everything it touches as *used*.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

from . import sql as ast
from .model import EventKind, ProvEvent, SqlObject, sorted_objects
from .schema import (
    AmbiguousColumn,
    ExtractionError,
    Schema,
    UnknownTable,
    UnresolvedColumn,
    expand_wildcard,
    owner_of,
)

__all__ = ["Extraction", "extract", "extract_sql", "to_events", "ExtractionError"]

Objs = frozenset[SqlObject]


@dataclass(frozen=True)
class Extraction:
    reads: frozenset[SqlObject] = frozenset()
    used: frozenset[SqlObject] = frozenset()
    writes: frozenset[SqlObject] = frozenset()
    alias_map: dict[str, frozenset[SqlObject]] = field(default_factory=dict, compare=False)

    @property
    def event_count(self) -> int:
        return len(self.reads) + len(self.used) + len(self.writes)


@dataclass
class _Source:
    name: Optional[str]  # exposed name (alias or table name)
    table: Optional[str] = None  # base table, or None for a derived table
    outputs: dict[str, Objs] = field(default_factory=dict)  # derived-table columns
    output_order: list[tuple[Optional[str], Objs]] = field(default_factory=list)


class _Scope:
    def __init__(self, schema: Schema, sources: list[_Source], parent: Optional["_Scope"]) -> None:
        self.schema = schema
        self.sources = sources
        self.parent = parent
        self.aliases: dict[str, ast.Expr] = {}
        self._alias_cache: dict[str, Objs] = {}
        self._resolving: set[str] = set()
        self.resolver: Optional["_Select"] = None

    def find_source(self, name: str) -> Optional[_Source]:
        scope: Optional[_Scope] = self
        while scope is not None:
            for s in scope.sources:
                if s.name == name:
                    return s
            scope = scope.parent
        return None

    def lookup_bare(self, column: str) -> Optional[Objs]:
        """Resolve an unqualified column in this scope only (no parents)."""
        base = [s.table for s in self.sources if s.table is not None]
        hits: list[Objs] = []
        if base:
            try:
                hits.append(frozenset({SqlObject(owner_of(self.schema, column, base), column)}))
            except UnresolvedColumn:
                pass
        for s in self.sources:
            if s.table is None and column in s.outputs:
                hits.append(s.outputs[column])
        if len(hits) > 1:
            raise AmbiguousColumn(f"column {column} is ambiguous")
        return hits[0] if hits else None

    def alias_objects(self, name: str) -> Optional[Objs]:
        if name not in self.aliases:
            return None
        if name in self._alias_cache:
            return self._alias_cache[name]
        if name in self._resolving:
            raise UnresolvedColumn(f"alias {name} is defined in terms of itself")
        self._resolving.add(name)
        try:
            assert self.resolver is not None
            reads, used = self.resolver.collect(self.aliases[name], primary=True, allow_alias=True)
        finally:
            self._resolving.discard(name)
        objs = reads | used
        self._alias_cache[name] = objs
        return objs


class _Select:
    """Walks one SELECT; collects reads/used and its output columns."""

    def __init__(self, schema: Schema, alias_map: dict[str, Objs]) -> None:
        self.schema = schema
        self.alias_map = alias_map
        self.scope: Optional[_Scope] = None

    def run(self, sel: ast.Select, parent: Optional[_Scope]) -> tuple[set, set, list]:
        reads: set[SqlObject] = set()
        used: set[SqlObject] = set()
        sources: list[_Source] = []
        for src in list(sel.sources) + [j.source for j in sel.joins]:
            sources.append(self.source(src, reads, used))
        names = [s.name for s in sources if s.name is not None]
        dup = {n for n in names if names.count(n) > 1}
        if dup:
            raise AmbiguousColumn(f"table name {sorted(dup)[0]} is used twice in FROM")
        scope = _Scope(self.schema, sources, parent)
        scope.resolver = self
        self.scope = scope
        for item in sel.items:
            if item.alias is not None and not isinstance(item.expr, ast.Star):
                scope.aliases[item.alias] = item.expr

        outputs: list[tuple[Optional[str], Objs]] = []
        for item in sel.items:
            if isinstance(item.expr, ast.Star):
                for name, objs in self.star(item.expr, scope):
                    reads |= objs
                    outputs.append((name, objs))
                continue
            r, u = self.collect(item.expr, primary=True, allow_alias=True)
            reads |= r
            used |= u
            if item.alias is not None:
                name: Optional[str] = item.alias
                self.alias_map[item.alias] = frozenset(r | u)
            elif isinstance(item.expr, ast.ColumnRef):
                name = item.expr.name
            else:
                name = None
            outputs.append((name, frozenset(r | u)))

        secondary: list[ast.Expr] = [j.on for j in sel.joins]
        if sel.where is not None:
            secondary.append(sel.where)
        secondary += sel.group_by
        if sel.having is not None:
            secondary.append(sel.having)
        secondary += [o.expr for o in sel.order_by]
        for e in secondary:
            r, u = self.collect(e, primary=False, allow_alias=True)
            used |= r | u
        return reads, used, outputs

    def source(self, src: ast.Source, reads: set, used: set) -> _Source:
        if isinstance(src, ast.TableRef):
            if not self.schema.has_table(src.name):
                raise UnknownTable(src.name)
            reads.add(SqlObject(src.name))
            if src.alias is not None:
                self.alias_map[src.alias] = frozenset({SqlObject(src.name)})
            return _Source(src.alias or src.name, src.name)
        inner = _Select(self.schema, self.alias_map)
        r, u, outs = inner.run(src.query, None)
        reads |= r
        used |= u
        out = _Source(src.alias)
        for name, objs in outs:
            out.output_order.append((name, objs))
            if name is not None and name not in out.outputs:
                out.outputs[name] = objs
                if src.alias is not None:
                    self.alias_map[f"{src.alias}.{name}"] = objs
        return out

    def star(self, star: ast.Star, scope: _Scope) -> list[tuple[Optional[str], Objs]]:
        if star.qualifier is not None:
            src = next((s for s in scope.sources if s.name == star.qualifier), None)
            if src is None:
                raise UnresolvedColumn(f"unknown table {star.qualifier} in {star.qualifier}.*")
            targets = [src]
        else:
            targets = scope.sources
        out: list[tuple[Optional[str], Objs]] = []
        for s in targets:
            if s.table is not None:
                out += [(o.column, frozenset({o})) for o in expand_wildcard(self.schema, s.table)]
            else:
                out += s.output_order
        return out

    def column(self, ref: ast.ColumnRef, allow_alias: bool) -> Objs:
        scope = self.scope
        assert scope is not None
        if ref.qualifier is not None:
            src = scope.find_source(ref.qualifier)
            if src is None:
                raise UnresolvedColumn(f"unknown table {ref.qualifier} for column {ref.name}")
            if src.table is not None:
                if ref.name not in self.schema.columns(src.table):
                    raise UnresolvedColumn(f"{src.table} has no column {ref.name}")
                return frozenset({SqlObject(src.table, ref.name)})
            if ref.name not in src.outputs:
                raise UnresolvedColumn(f"derived table {ref.qualifier} has no column {ref.name}")
            return src.outputs[ref.name]
        level: Optional[_Scope] = scope
        first = True
        while level is not None:
            hit = level.lookup_bare(ref.name)
            if hit is not None:
                return hit
            if first and allow_alias:
                hit = level.alias_objects(ref.name)
                if hit is not None:
                    return hit
            first = False
            level = level.parent
        raise UnresolvedColumn(f"column {ref.name} not found")

    def subquery(self, q: ast.Select) -> tuple[set, set]:
        inner = _Select(self.schema, self.alias_map)
        r, u, _ = inner.run(q, self.scope)
        return r, u

    def collect(self, e: ast.Expr, primary: bool, allow_alias: bool) -> tuple[set, set]:
        """Return (reads, used) contributed by an expression.

        Column references land in reads when ``primary``; subqueries keep their
        own split in primary position and collapse to used otherwise.
        """
        reads: set[SqlObject] = set()
        used: set[SqlObject] = set()
        stack: list[ast.Expr] = [e]
        while stack:
            node = stack.pop()
            if isinstance(node, ast.ColumnRef):
                (reads if primary else used).update(self.column(node, allow_alias))
            elif isinstance(node, ast.Literal):
                pass
            elif isinstance(node, ast.FuncCall):
                stack.extend(node.args)
            elif isinstance(node, ast.BinaryOp):
                stack += [node.left, node.right]
            elif isinstance(node, ast.UnaryOp):
                stack.append(node.operand)
            elif isinstance(node, ast.InList):
                stack.append(node.expr)
                stack.extend(node.items)
            elif isinstance(node, ast.Between):
                stack += [node.expr, node.low, node.high]
            elif isinstance(node, ast.IsNull):
                stack.append(node.expr)
            elif isinstance(node, ast.Case):
                if node.operand is not None:
                    stack.append(node.operand)
                for cond, res in node.whens:
                    stack += [cond, res]
                if node.default is not None:
                    stack.append(node.default)
            elif isinstance(node, (ast.InSubquery, ast.Exists, ast.ScalarSubquery)):
                if isinstance(node, ast.InSubquery):
                    stack.append(node.expr)
                r, u = self.subquery(node.query)
                if primary and isinstance(node, ast.ScalarSubquery):
                    reads |= r
                    used |= u
                else:
                    used |= r | u
            else:  # pragma: no cover - parser produces nothing else
                raise TypeError(f"unexpected node {node!r}")
        return reads, used


def _target_scope(schema: Schema, table: str, alias: Optional[str]) -> tuple[_Select, _Scope]:
    walker = _Select(schema, {})
    scope = _Scope(schema, [_Source(alias or table, table)], None)
    scope.resolver = walker
    walker.scope = scope
    return walker, scope


def extract(st: ast.Statement, schema: Schema) -> Extraction:
    root = st.root
    if isinstance(root, ast.Select):
        walker = _Select(schema, {})
        reads, used, _ = walker.run(root, None)
        return Extraction(frozenset(reads), frozenset(used), frozenset(), walker.alias_map)
    if isinstance(root, ast.Show):
        if root.table is None:
            return Extraction()
        schema.columns(root.table)
        return Extraction(reads=frozenset({SqlObject(root.table)}))
    if isinstance(root, ast.Describe):
        schema.columns(root.table)
        return Extraction(reads=frozenset({SqlObject(root.table)}))
    if isinstance(root, ast.Insert):
        cols = schema.columns(root.table)
        named = root.columns if root.columns is not None else list(cols)
        for c in named:
            if c not in cols:
                raise UnresolvedColumn(f"{root.table} has no column {c}")
        if root.columns is None:
            for row in root.rows:
                if len(row) != len(cols):
                    raise ExtractionError(
                        f"VALUES row has {len(row)} values but {root.table} has {len(cols)} columns"
                    )
        writes = {SqlObject(root.table)} | {SqlObject(root.table, c) for c in named}
        walker, _ = _target_scope(schema, root.table, None)
        used: set[SqlObject] = set()
        for row in root.rows:
            for e in row:
                r, u = walker.collect(e, primary=False, allow_alias=False)
                used |= r | u
        return Extraction(frozenset(), frozenset(used), frozenset(writes), walker.alias_map)
    if isinstance(root, ast.Update):
        schema.columns(root.table)
        walker, _ = _target_scope(schema, root.table, root.alias)
        if root.alias is not None:
            walker.alias_map[root.alias] = frozenset({SqlObject(root.table)})
        writes: set[SqlObject] = {SqlObject(root.table)}
        used = set()
        for a in root.assignments:
            writes |= walker.column(a.target, allow_alias=False)
            r, u = walker.collect(a.value, primary=False, allow_alias=False)
            used |= r | u
        if root.where is not None:
            r, u = walker.collect(root.where, primary=False, allow_alias=False)
            used |= r | u
        return Extraction(frozenset(), frozenset(used), frozenset(writes), walker.alias_map)
    raise TypeError(f"unsupported statement {type(root).__name__}")


def extract_sql(text: str, schema: Schema) -> Extraction:
    return extract(ast.parse(text), schema)


def to_events(x: Extraction, worker: int) -> list[ProvEvent]:
    """Writes, then reads, then used; each group in lexicographic order."""
    events: list[ProvEvent] = []
    for kind, objs in (
        (EventKind.SQL_WASGENERATEDBY, x.writes),
        (EventKind.SQL_READ, x.reads),
        (EventKind.SQL_USED, x.used),
    ):
        events += [ProvEvent.sql(kind, worker, o) for o in sorted_objects(objs)]
    return events


def classify(events: Iterable[ProvEvent]) -> Extraction:
    """Inverse of to_events, for consumers holding a decoded event list."""
    buckets: dict[EventKind, set[SqlObject]] = {k: set() for k in
                                                 (EventKind.SQL_READ, EventKind.SQL_USED, EventKind.SQL_WASGENERATEDBY)}
    for e in events:
        if e.kind in buckets:
            buckets[e.kind].add(e.obj)
    return Extraction(
        frozenset(buckets[EventKind.SQL_READ]),
        frozenset(buckets[EventKind.SQL_USED]),
        frozenset(buckets[EventKind.SQL_WASGENERATEDBY]),
    )
