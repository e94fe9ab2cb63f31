"""Schema catalog loaded from a trimmed mysqldump-style DDL file.

Only ``CREATE TABLE name ( col type ..., ... );`` blocks are understood.
Column types and constraints are skipped; everything outside a CREATE TABLE
block is ignored.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional

from .model import SqlObject


class SchemaError(Exception):
    pass


class SchemaConflict(SchemaError):
    pass


class SchemaSyntax(SchemaError):
    def __init__(self, line: int, message: str) -> None:
        super().__init__(f"line {line}: {message}")
        self.line = line


class ExtractionError(Exception):
    """Name resolution failed; upstream treats this like a parse failure."""


class UnknownTable(ExtractionError):
    pass


class UnresolvedColumn(ExtractionError):
    pass


class AmbiguousColumn(ExtractionError):
    pass


_CREATE = re.compile(r"\bCREATE\s+TABLE\s+(?:IF\s+NOT\s+EXISTS\s+)?", re.IGNORECASE)
_NAME = re.compile(r"\s*(`[^`]+`|[A-Za-z_][A-Za-z0-9_$]*)")
# column-list entries that are constraints rather than columns
_CONSTRAINT_WORDS = {"primary", "key", "unique", "index", "constraint", "foreign", "check", "fulltext"}


def _unquote(name: str) -> str:
    return name[1:-1] if name.startswith("`") else name


@dataclass(frozen=True)
class Schema:
    tables: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    source_path: Optional[str] = None

    def __post_init__(self) -> None:
        norm: dict[str, tuple[str, ...]] = {}
        for name, cols in self.tables.items():
            key = name.lower()
            if key in norm:
                raise SchemaConflict(f"duplicate table {key}")
            lowered = tuple(c.lower() for c in cols)
            if len(set(lowered)) != len(lowered):
                raise SchemaConflict(f"duplicate column in table {key}")
            norm[key] = lowered
        object.__setattr__(self, "tables", norm)

    def has_table(self, table: str) -> bool:
        return table.lower() in self.tables

    def columns(self, table: str) -> tuple[str, ...]:
        try:
            return self.tables[table.lower()]
        except KeyError:
            raise UnknownTable(table) from None


def _split_top_level(body: str) -> list[str]:
    parts, depth, cur = [], 0, []
    for ch in body:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    parts.append("".join(cur))
    return parts


def parse_schema(text: str, source_path: Optional[str] = None) -> Schema:
    tables: dict[str, tuple[str, ...]] = {}
    pos = 0
    while True:
        m = _CREATE.search(text, pos)
        if m is None:
            break
        line = text.count("\n", 0, m.start()) + 1
        nm = _NAME.match(text, m.end())
        if nm is None:
            raise SchemaSyntax(line, "expected a table name after CREATE TABLE")
        table = _unquote(nm.group(1)).lower()
        i = nm.end()
        while i < len(text) and text[i].isspace():
            i += 1
        if i >= len(text) or text[i] != "(":
            raise SchemaSyntax(line, f"expected '(' after table {table}")
        depth, j = 0, i
        while j < len(text):
            if text[j] == "(":
                depth += 1
            elif text[j] == ")":
                depth -= 1
                if depth == 0:
                    break
            j += 1
        if depth != 0:
            raise SchemaSyntax(line, f"unbalanced parentheses in table {table}")
        cols: list[str] = []
        for entry in _split_top_level(text[i + 1 : j]):
            entry = entry.strip()
            if not entry:
                raise SchemaSyntax(line, f"empty column definition in table {table}")
            cm = _NAME.match(entry)
            if cm is None:
                raise SchemaSyntax(line, f"bad column definition {entry!r}")
            name = _unquote(cm.group(1))
            if not cm.group(1).startswith("`") and name.lower() in _CONSTRAINT_WORDS:
                continue
            cols.append(name.lower())
        if not cols:
            raise SchemaSyntax(line, f"table {table} declares no columns")
        if table in tables:
            raise SchemaConflict(f"duplicate table {table} (line {line})")
        if len(set(cols)) != len(cols):
            raise SchemaSyntax(line, f"duplicate column in table {table}")
        tables[table] = tuple(cols)
        pos = j + 1
    return Schema(tables, source_path)


def load_schema(path: str | Path) -> Schema:
    p = Path(path)
    return parse_schema(p.read_text(encoding="utf-8"), str(p))


def expand_wildcard(schema: Schema, table: str) -> list[SqlObject]:
    t = table.lower()
    return [SqlObject(t, c) for c in schema.columns(t)]


def owner_of(schema: Schema, column: str, candidate_tables: Iterable[str]) -> str:
    """Return the single candidate table that defines ``column``."""
    cands = list(dict.fromkeys(t.lower() for t in candidate_tables))
    if not cands:
        raise ValueError("candidate_tables must be non-empty")
    col = column.lower()
    owners = [t for t in cands if col in schema.columns(t)]
    if not owners:
        raise UnresolvedColumn(f"column {col} not found in {', '.join(sorted(cands))}")
    if len(owners) > 1:
        raise AmbiguousColumn(f"column {col} is ambiguous between {', '.join(sorted(owners))}")
    return owners[0]
