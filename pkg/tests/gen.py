"""Hypothesis strategies producing statements over the company schema.

A statement is drawn once as a structure and can then be rendered several
ways: with or without table/column aliases, and with any literal values.
Every rendering of one structure must extract identically.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from hypothesis import strategies as st

COLUMNS = {
    "employees": ["id", "firstname", "lastname", "salary", "dept_id", "manager_id", "hired"],
    "departments": ["id", "name", "budget", "location_id"],
    "locations": ["id", "city", "country"],
    "projects": ["id", "title", "dept_id", "lead_id", "cost"],
}
JOINS = [
    (("employees", "dept_id"), ("departments", "id")),
    (("projects", "dept_id"), ("departments", "id")),
    (("departments", "location_id"), ("locations", "id")),
    (("projects", "lead_id"), ("employees", "id")),
]
FUNCS = ["UPPER", "ABS", "MAX", "COUNT", "LENGTH"]


@dataclass(frozen=True)
class Ref:
    src: int  # index into the FROM list
    column: str


@dataclass(frozen=True)
class Item:
    ref: Ref
    func: Optional[str] = None
    plus: bool = False  # render as ``ref + <literal>``


@dataclass(frozen=True)
class Pred:
    kind: str  # cmp, like, in, between, null, sub
    ref: Ref
    sub_table: Optional[str] = None
    sub_col: Optional[str] = None
    sub_where: Optional[str] = None


@dataclass(frozen=True)
class Query:
    tables: tuple[str, ...]
    on: Optional[tuple[str, str]]  # join columns of tables[0], tables[1]
    items: tuple[Item, ...]
    preds: tuple[Pred, ...]
    order: Optional[int]  # index of a select item to order by


@st.composite
def queries(draw) -> Query:
    if draw(st.booleans()):
        (ta, ca), (tb, cb) = draw(st.sampled_from(JOINS))
        tables, on = (ta, tb), (ca, cb)
    else:
        tables, on = (draw(st.sampled_from(sorted(COLUMNS))),), None

    def ref() -> Ref:
        i = draw(st.integers(0, len(tables) - 1))
        return Ref(i, draw(st.sampled_from(COLUMNS[tables[i]])))

    items = []
    for _ in range(draw(st.integers(1, 4))):
        r = ref()
        func = draw(st.none() | st.sampled_from(FUNCS))
        items.append(Item(r, func, plus=func is None and draw(st.booleans())))
    preds = []
    for _ in range(draw(st.integers(0, 3))):
        kind = draw(st.sampled_from(["cmp", "like", "in", "between", "null", "sub"]))
        if kind == "sub":
            t = draw(st.sampled_from(sorted(COLUMNS)))
            preds.append(Pred(kind, ref(), t, draw(st.sampled_from(COLUMNS[t])), draw(st.sampled_from(COLUMNS[t]))))
        else:
            preds.append(Pred(kind, ref()))
    order = draw(st.none() | st.integers(0, len(items) - 1))
    return Query(tuple(tables), on, tuple(items), tuple(preds), order)


class Literals:
    """Hands out literal text; ``seed`` changes every value, never the shape."""

    def __init__(self, seed: int) -> None:
        self.n = seed

    def num(self) -> str:
        self.n += 7
        return str(self.n % 9973)

    def text(self) -> str:
        self.n += 13
        return f"'v{self.n % 997}%'"


def render(q: Query, aliased: bool, seed: int = 0) -> str:
    lit = Literals(seed)
    two = len(q.tables) > 1

    def col(r: Ref) -> str:
        if aliased:
            return f"t{r.src}.{r.column}"
        return f"{q.tables[r.src]}.{r.column}" if two else r.column

    def item_expr(it: Item) -> str:
        if it.func:
            return f"{it.func}({col(it.ref)})"
        return f"{col(it.ref)} + {lit.num()}" if it.plus else col(it.ref)

    sel = []
    for k, it in enumerate(q.items):
        e = item_expr(it)
        sel.append(f"{e} AS c{k}" if aliased else e)
    if aliased:
        frm = [f"{t} AS t{i}" for i, t in enumerate(q.tables)]
    else:
        frm = list(q.tables)
    sql = f"SELECT {', '.join(sel)} FROM {frm[0]}"
    if two:
        a, b = q.on  # type: ignore[misc]
        sql += f" JOIN {frm[1]} ON {col(Ref(0, a))} = {col(Ref(1, b))}"
    conds = []
    for p in q.preds:
        c = col(p.ref)
        if p.kind == "cmp":
            conds.append(f"{c} > {lit.num()}")
        elif p.kind == "like":
            conds.append(f"{c} LIKE {lit.text()}")
        elif p.kind == "in":
            conds.append(f"{c} IN ({lit.num()}, {lit.num()})")
        elif p.kind == "between":
            conds.append(f"{c} BETWEEN {lit.num()} AND {lit.num()}")
        elif p.kind == "null":
            conds.append(f"{c} IS NOT NULL")
        else:
            if aliased:
                inner = f"SELECT s.{p.sub_col} FROM {p.sub_table} s WHERE s.{p.sub_where} = {lit.num()}"
            else:
                inner = f"SELECT {p.sub_col} FROM {p.sub_table} WHERE {p.sub_where} = {lit.num()}"
            conds.append(f"{c} IN ({inner})")
    if conds:
        sql += " WHERE " + " AND ".join(conds)
    if q.order is not None:
        target = f"c{q.order}" if aliased else item_expr_plain(q, q.order, col)
        sql += f" ORDER BY {target}"
    return sql


def item_expr_plain(q: Query, k: int, col) -> str:
    # ORDER BY the underlying column; ephemeral parts never matter
    return col(q.items[k].ref)


@st.composite
def updates(draw) -> tuple[str, str]:
    """(plain, aliased) renderings of one UPDATE."""
    t = draw(st.sampled_from(sorted(COLUMNS)))
    cols = COLUMNS[t]
    sets = draw(st.lists(st.sampled_from(cols), min_size=1, max_size=3, unique=True))
    rhs = [draw(st.sampled_from(cols)) for _ in sets]
    w = draw(st.sampled_from(cols))
    n = draw(st.integers(0, 999))
    plain = f"UPDATE {t} SET " + ", ".join(f"{s} = {r} + {n}" for s, r in zip(sets, rhs)) + f" WHERE {w} = {n}"
    ali = f"UPDATE {t} u SET " + ", ".join(f"u.{s} = u.{r} + {n}" for s, r in zip(sets, rhs)) + f" WHERE u.{w} = {n}"
    return plain, ali
