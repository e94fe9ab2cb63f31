"""Lexer and recursive-descent parser for the SQL subset we extract from.

Covered: SELECT (comma joins, [INNER|LEFT|RIGHT] JOIN ... ON, derived tables,
subqueries in expressions, aliases, wildcards, function calls, GROUP BY,
HAVING, ORDER BY, LIMIT), INSERT ... VALUES, UPDATE, SHOW TABLES,
SHOW COLUMNS FROM, DESCRIBE.  Anything else is a ParseError carrying the
UTF-8 byte offset of the offending token.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional, Union

MAX_DEPTH = 64


class ParseError(Exception):
    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} at offset {offset}")
        self.message = message
        self.offset = offset


KEYWORDS = frozenset(
    """
    SELECT FROM WHERE GROUP BY HAVING ORDER LIMIT OFFSET AS AND OR NOT IN IS NULL
    LIKE BETWEEN EXISTS DISTINCT ALL JOIN INNER LEFT RIGHT OUTER CROSS ON INSERT
    INTO VALUES UPDATE SET SHOW TABLES COLUMNS FIELDS DESCRIBE DESC ASC UNION CASE
    WHEN THEN ELSE END TRUE FALSE DELETE DROP CREATE ALTER XOR DIV MOD REGEXP
    """.split()
)

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<comment>--[^\n]*|\#[^\n]*|/\*.*?\*/)
  | (?P<number>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<string>'(?:[^'\\]|\\.|'')*'|"(?:[^"\\]|\\.|"")*")
  | (?P<quoted>`[^`]+`)
  | (?P<name>[A-Za-z_][A-Za-z0-9_$]*)
  | (?P<op><=>|<=|>=|<>|!=|\|\||&&|[=<>+\-*/%(),.;!])
    """,
    re.VERBOSE | re.DOTALL,
)


@dataclass(frozen=True)
class Token:
    kind: str  # KEYWORD, IDENT, NUMBER, STRING, OP, EOF
    value: str
    pos: int  # character index into the source


def tokenize(sql: str) -> list[Token]:
    out: list[Token] = []
    i, n = 0, len(sql)
    while i < n:
        m = _TOKEN_RE.match(sql, i)
        if m is None:
            if sql.startswith("/*", i):
                raise ParseError("unterminated comment", _byte_offset(sql, i))
            if sql[i] in "'\"":
                raise ParseError("unterminated string literal", _byte_offset(sql, i))
            raise ParseError(f"unexpected character {sql[i]!r}", _byte_offset(sql, i))
        kind = m.lastgroup
        text = m.group()
        if kind == "name":
            upper = text.upper()
            if upper in KEYWORDS:
                out.append(Token("KEYWORD", upper, i))
            else:
                out.append(Token("IDENT", text.lower(), i))
        elif kind == "quoted":
            out.append(Token("IDENT", text[1:-1].lower(), i))
        elif kind == "number":
            out.append(Token("NUMBER", text, i))
        elif kind == "string":
            out.append(Token("STRING", text, i))
        elif kind == "op":
            out.append(Token("OP", text, i))
        i = m.end()
    out.append(Token("EOF", "", n))
    return out


def _byte_offset(sql: str, char_index: int) -> int:
    return len(sql[:char_index].encode("utf-8"))


# -- AST ----------------------------------------------------------------------


@dataclass
class ColumnRef:
    name: str
    qualifier: Optional[str] = None


@dataclass
class Star:
    """``*`` or ``t.*`` in a select list."""

    qualifier: Optional[str] = None


@dataclass
class Literal:
    value: str
    kind: str  # NUMBER, STRING, NULL, BOOL


@dataclass
class FuncCall:
    name: str
    args: list["Expr"]
    distinct: bool = False
    star: bool = False  # COUNT(*)


@dataclass
class BinaryOp:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass
class UnaryOp:
    op: str
    operand: "Expr"


@dataclass
class InList:
    expr: "Expr"
    items: list["Expr"]
    negated: bool = False


@dataclass
class InSubquery:
    expr: "Expr"
    query: "Select"
    negated: bool = False


@dataclass
class Between:
    expr: "Expr"
    low: "Expr"
    high: "Expr"
    negated: bool = False


@dataclass
class IsNull:
    expr: "Expr"
    negated: bool = False


@dataclass
class Exists:
    query: "Select"
    negated: bool = False


@dataclass
class ScalarSubquery:
    query: "Select"


@dataclass
class Case:
    operand: Optional["Expr"]
    whens: list[tuple["Expr", "Expr"]]
    default: Optional["Expr"] = None


Expr = Union[
    ColumnRef, Literal, FuncCall, BinaryOp, UnaryOp, InList, InSubquery, Between, IsNull,
    Exists, ScalarSubquery, Case,
]


@dataclass
class SelectItem:
    expr: Union[Expr, Star]
    alias: Optional[str] = None


@dataclass
class TableRef:
    name: str
    alias: Optional[str] = None


@dataclass
class DerivedTable:
    query: "Select"
    alias: Optional[str] = None


Source = Union[TableRef, DerivedTable]


@dataclass
class Join:
    kind: str  # INNER, LEFT, RIGHT
    source: Source
    on: Expr


@dataclass
class OrderItem:
    expr: Expr
    descending: bool = False


@dataclass
class Select:
    items: list[SelectItem]
    sources: list[Source]
    joins: list[Join] = field(default_factory=list)
    where: Optional[Expr] = None
    group_by: list[Expr] = field(default_factory=list)
    having: Optional[Expr] = None
    order_by: list[OrderItem] = field(default_factory=list)
    limit: Optional[tuple[int, Optional[int]]] = None  # (count, offset)
    distinct: bool = False


@dataclass
class Insert:
    table: str
    columns: Optional[list[str]]
    rows: list[list[Expr]]


@dataclass
class Assignment:
    target: ColumnRef
    value: Expr


@dataclass
class Update:
    table: str
    alias: Optional[str]
    assignments: list[Assignment]
    where: Optional[Expr] = None


@dataclass
class Show:
    what: str  # TABLES or COLUMNS
    table: Optional[str] = None


@dataclass
class Describe:
    table: str


Root = Union[Select, Insert, Update, Show, Describe]


@dataclass
class Statement:
    kind: str  # SELECT, SHOW, DESCRIBE, INSERT, UPDATE
    root: Root
    depth: int
    sql: str = ""


# -- parser -------------------------------------------------------------------

_COMPARISON = {"=", "<", ">", "<=", ">=", "<>", "!=", "<=>"}


class _Parser:
    def __init__(self, sql: str) -> None:
        self.sql = sql
        self.toks = tokenize(sql)
        self.i = 0
        self.depth = 0
        self.max_depth = 0

    # token helpers
    @property
    def tok(self) -> Token:
        return self.toks[self.i]

    def peek(self, k: int = 1) -> Token:
        return self.toks[min(self.i + k, len(self.toks) - 1)]

    def error(self, message: str, tok: Optional[Token] = None) -> ParseError:
        t = tok or self.tok
        what = "end of input" if t.kind == "EOF" else repr(t.value)
        return ParseError(f"{message}, found {what}", _byte_offset(self.sql, t.pos))

    def is_kw(self, *words: str) -> bool:
        return self.tok.kind == "KEYWORD" and self.tok.value in words

    def is_op(self, *ops: str) -> bool:
        return self.tok.kind == "OP" and self.tok.value in ops

    def accept_kw(self, *words: str) -> Optional[str]:
        if self.is_kw(*words):
            v = self.tok.value
            self.i += 1
            return v
        return None

    def accept_op(self, *ops: str) -> Optional[str]:
        if self.is_op(*ops):
            v = self.tok.value
            self.i += 1
            return v
        return None

    def expect_kw(self, word: str) -> None:
        if not self.accept_kw(word):
            raise self.error(f"expected {word}")

    def expect_op(self, op: str) -> None:
        if not self.accept_op(op):
            raise self.error(f"expected {op!r}")

    def ident(self, what: str = "identifier") -> str:
        if self.tok.kind != "IDENT":
            raise self.error(f"expected {what}")
        v = self.tok.value
        self.i += 1
        return v

    def enter(self) -> None:
        self.depth += 1
        self.max_depth = max(self.max_depth, self.depth)
        if self.depth > MAX_DEPTH:
            raise self.error("nesting too deep")

    def leave(self) -> None:
        self.depth -= 1

    # statements
    def statement(self) -> Statement:
        if self.is_kw("SELECT"):
            root: Root = self.select()
            kind = "SELECT"
        elif self.is_kw("INSERT"):
            root, kind = self.insert(), "INSERT"
        elif self.is_kw("UPDATE"):
            root, kind = self.update(), "UPDATE"
        elif self.is_kw("SHOW"):
            root, kind = self.show(), "SHOW"
        elif self.is_kw("DESCRIBE", "DESC"):
            self.i += 1
            root, kind = Describe(self.ident("table name")), "DESCRIBE"
        else:
            raise self.error("expected SELECT, INSERT, UPDATE, SHOW or DESCRIBE")
        self.accept_op(";")
        if self.tok.kind != "EOF":
            raise self.error("unexpected trailing input")
        return Statement(kind, root, self.max_depth, self.sql)

    def select(self) -> Select:
        self.enter()
        self.expect_kw("SELECT")
        distinct = bool(self.accept_kw("DISTINCT"))
        if not distinct:
            self.accept_kw("ALL")
        items = [self.select_item()]
        while self.accept_op(","):
            items.append(self.select_item())
        self.expect_kw("FROM")
        sources, joins = self.from_clause()
        sel = Select(items, sources, joins, distinct=distinct)
        if self.accept_kw("WHERE"):
            sel.where = self.expr()
        if self.accept_kw("GROUP"):
            self.expect_kw("BY")
            sel.group_by.append(self.expr())
            while self.accept_op(","):
                sel.group_by.append(self.expr())
        if self.accept_kw("HAVING"):
            sel.having = self.expr()
        if self.accept_kw("ORDER"):
            self.expect_kw("BY")
            sel.order_by.append(self.order_item())
            while self.accept_op(","):
                sel.order_by.append(self.order_item())
        if self.accept_kw("LIMIT"):
            first = self.int_literal()
            second = None
            if self.accept_op(","):
                first, second = self.int_literal(), first
            elif self.accept_kw("OFFSET"):
                second = self.int_literal()
            sel.limit = (first, second)
        self.leave()
        return sel

    def int_literal(self) -> int:
        if self.tok.kind != "NUMBER" or not self.tok.value.isdigit():
            raise self.error("expected an integer")
        v = int(self.tok.value)
        self.i += 1
        return v

    def order_item(self) -> OrderItem:
        e = self.expr()
        if self.accept_kw("DESC"):
            return OrderItem(e, True)
        self.accept_kw("ASC")
        return OrderItem(e, False)

    def alias(self) -> Optional[str]:
        if self.accept_kw("AS"):
            return self.ident("alias")
        if self.tok.kind == "IDENT":
            return self.ident()
        return None

    def select_item(self) -> SelectItem:
        if self.accept_op("*"):
            return SelectItem(Star())
        if self.tok.kind == "IDENT" and self.peek().value == "." and self.peek(2).value == "*" \
                and self.peek().kind == "OP" and self.peek(2).kind == "OP":
            q = self.ident()
            self.i += 2
            return SelectItem(Star(q))
        e = self.expr()
        return SelectItem(e, self.alias())

    def source(self) -> Source:
        if self.is_op("(") and self.peek().kind == "KEYWORD" and self.peek().value == "SELECT":
            self.i += 1
            q = self.select()
            self.expect_op(")")
            return DerivedTable(q, self.alias())
        name = self.ident("table name")
        return TableRef(name, self.alias())

    def from_clause(self) -> tuple[list[Source], list[Join]]:
        sources = [self.source()]
        joins: list[Join] = []
        while True:
            if self.accept_op(","):
                sources.append(self.source())
                continue
            kind = None
            if self.accept_kw("INNER"):
                kind = "INNER"
            elif self.is_kw("LEFT", "RIGHT"):
                kind = self.tok.value
                self.i += 1
                self.accept_kw("OUTER")
            elif self.is_kw("JOIN"):
                kind = "INNER"
            if kind is None:
                break
            self.expect_kw("JOIN")
            src = self.source()
            self.expect_kw("ON")
            joins.append(Join(kind, src, self.expr()))
        return sources, joins

    def insert(self) -> Insert:
        self.expect_kw("INSERT")
        self.expect_kw("INTO")
        table = self.ident("table name")
        cols: Optional[list[str]] = None
        if self.accept_op("("):
            cols = [self.ident("column name")]
            while self.accept_op(","):
                cols.append(self.ident("column name"))
            self.expect_op(")")
        self.expect_kw("VALUES")
        rows = [self.value_row(cols)]
        while self.accept_op(","):
            rows.append(self.value_row(cols))
        return Insert(table, cols, rows)

    def value_row(self, cols: Optional[list[str]]) -> list[Expr]:
        start = self.tok
        self.expect_op("(")
        vals = [self.expr()]
        while self.accept_op(","):
            vals.append(self.expr())
        self.expect_op(")")
        if cols is not None and len(vals) != len(cols):
            raise ParseError(
                f"VALUES row has {len(vals)} values for {len(cols)} columns",
                _byte_offset(self.sql, start.pos),
            )
        return vals

    def update(self) -> Update:
        self.expect_kw("UPDATE")
        table = self.ident("table name")
        alias = None if self.is_kw("SET") else self.alias()
        self.expect_kw("SET")
        assigns = [self.assignment()]
        while self.accept_op(","):
            assigns.append(self.assignment())
        where = self.expr() if self.accept_kw("WHERE") else None
        return Update(table, alias, assigns, where)

    def assignment(self) -> Assignment:
        target = self.column_ref(self.ident("column name"))
        self.expect_op("=")
        return Assignment(target, self.expr())

    def column_ref(self, first: str) -> ColumnRef:
        if self.accept_op("."):
            return ColumnRef(self.ident("column name"), first)
        return ColumnRef(first)

    def show(self) -> Show:
        self.expect_kw("SHOW")
        if self.accept_kw("TABLES"):
            return Show("TABLES")
        if self.accept_kw("COLUMNS", "FIELDS"):
            if not self.accept_kw("FROM", "IN"):
                raise self.error("expected FROM")
            return Show("COLUMNS", self.ident("table name"))
        raise self.error("expected TABLES or COLUMNS")

    # expressions, lowest precedence first
    def expr(self) -> Expr:
        self.enter()
        left = self.and_expr()
        while self.accept_kw("OR", "XOR") or self.accept_op("||"):
            left = BinaryOp("OR", left, self.and_expr())
        self.leave()
        return left

    def and_expr(self) -> Expr:
        left = self.not_expr()
        while self.accept_kw("AND") or self.accept_op("&&"):
            left = BinaryOp("AND", left, self.not_expr())
        return left

    def not_expr(self) -> Expr:
        if self.accept_kw("NOT") or self.accept_op("!"):
            return UnaryOp("NOT", self.not_expr())
        return self.predicate()

    def predicate(self) -> Expr:
        left = self.additive()
        while True:
            op = self.accept_op(*_COMPARISON)
            if op:
                left = BinaryOp(op, left, self.additive())
                continue
            if self.is_kw("IS"):
                self.i += 1
                neg = bool(self.accept_kw("NOT"))
                if self.accept_kw("NULL"):
                    left = IsNull(left, neg)
                elif self.accept_kw("TRUE", "FALSE"):
                    left = BinaryOp("IS", left, Literal(self.toks[self.i - 1].value, "BOOL"))
                else:
                    raise self.error("expected NULL, TRUE or FALSE")
                continue
            neg = False
            save = self.i
            if self.accept_kw("NOT"):
                neg = True
                if not self.is_kw("IN", "LIKE", "BETWEEN", "REGEXP"):
                    self.i = save
                    break
            if self.accept_kw("LIKE", "REGEXP"):
                node: Expr = BinaryOp("LIKE", left, self.additive())
                left = UnaryOp("NOT", node) if neg else node
                continue
            if self.accept_kw("BETWEEN"):
                low = self.additive()
                self.expect_kw("AND")
                left = Between(left, low, self.additive(), neg)
                continue
            if self.accept_kw("IN"):
                self.expect_op("(")
                if self.is_kw("SELECT"):
                    q = self.select()
                    self.expect_op(")")
                    left = InSubquery(left, q, neg)
                else:
                    items = [self.expr()]
                    while self.accept_op(","):
                        items.append(self.expr())
                    self.expect_op(")")
                    left = InList(left, items, neg)
                continue
            break
        return left

    def additive(self) -> Expr:
        left = self.multiplicative()
        while True:
            op = self.accept_op("+", "-")
            if not op:
                break
            left = BinaryOp(op, left, self.multiplicative())
        return left

    def multiplicative(self) -> Expr:
        left = self.unary()
        while True:
            op = self.accept_op("*", "/", "%") or self.accept_kw("DIV", "MOD")
            if not op:
                break
            left = BinaryOp(op, left, self.unary())
        return left

    def unary(self) -> Expr:
        op = self.accept_op("-", "+")
        if op:
            return UnaryOp(op, self.unary())
        return self.primary()

    def primary(self) -> Expr:
        t = self.tok
        if t.kind == "NUMBER":
            self.i += 1
            return Literal(t.value, "NUMBER")
        if t.kind == "STRING":
            self.i += 1
            return Literal(t.value, "STRING")
        if t.kind == "KEYWORD":
            if t.value == "NULL":
                self.i += 1
                return Literal("NULL", "NULL")
            if t.value in ("TRUE", "FALSE"):
                self.i += 1
                return Literal(t.value, "BOOL")
            if t.value == "EXISTS":
                self.i += 1
                self.expect_op("(")
                q = self.select()
                self.expect_op(")")
                return Exists(q)
            if t.value == "CASE":
                return self.case()
            if t.value in ("LEFT", "RIGHT", "MOD") and self.peek().value == "(":
                self.i += 1
                return self.call(t.value.lower())
            raise self.error("expected an expression")
        if t.kind == "IDENT":
            self.i += 1
            if self.is_op("("):
                return self.call(t.value)
            return self.column_ref(t.value)
        if self.accept_op("("):
            if self.is_kw("SELECT"):
                q = self.select()
                self.expect_op(")")
                return ScalarSubquery(q)
            e = self.expr()
            self.expect_op(")")
            return e
        raise self.error("expected an expression")

    def call(self, name: str) -> FuncCall:
        self.expect_op("(")
        if self.accept_op("*"):
            self.expect_op(")")
            return FuncCall(name, [], star=True)
        if self.accept_op(")"):
            return FuncCall(name, [])
        distinct = bool(self.accept_kw("DISTINCT"))
        args = [self.expr()]
        while self.accept_op(","):
            args.append(self.expr())
        self.expect_op(")")
        return FuncCall(name, args, distinct)

    def case(self) -> Case:
        self.expect_kw("CASE")
        operand = None if self.is_kw("WHEN") else self.expr()
        whens = []
        while self.accept_kw("WHEN"):
            cond = self.expr()
            self.expect_kw("THEN")
            whens.append((cond, self.expr()))
        if not whens:
            raise self.error("expected WHEN")
        default = self.expr() if self.accept_kw("ELSE") else None
        self.expect_kw("END")
        return Case(operand, whens, default)


def parse(sql: str) -> Statement:
    """Parse one statement; a trailing semicolon is optional."""
    return _Parser(sql).statement()


def split_statements(text: str) -> list[str]:
    """Split a script on top-level semicolons, skipping empty pieces."""
    toks = tokenize(text)
    out, start = [], 0
    for t in toks:
        if (t.kind == "OP" and t.value == ";") or t.kind == "EOF":
            piece = text[start : t.pos].strip()
            if piece:
                out.append(piece)
            start = t.pos + 1
    return out
