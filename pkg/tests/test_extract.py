import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from challenges import ALIASES, CHALLENGES, CONCAT_QUERY, NESTED, WILDCARD
from gen import queries, render, updates
from oracle import Oracle

from provguard.extract import classify, extract_sql, to_events
from provguard.model import EventKind, SqlObject
from provguard.schema import AmbiguousColumn, UnknownTable, UnresolvedColumn
from provguard.sql import ParseError

E = "employees"


def objs(*names):
    out = set()
    for n in names:
        t, _, c = n.partition(".")
        out.add(SqlObject(t, c or None))
    return frozenset(out)


def test_concat_query(employee_schema):
    x = extract_sql(CONCAT_QUERY, employee_schema)
    assert x.reads == objs(E, "employees.employee_id", "employees.firstname", "employees.lastname")
    assert x.used == objs("employees.salary")
    assert x.writes == frozenset()


def test_alias_from_derived_table(employee_schema):
    x = extract_sql("SELECT A FROM (SELECT employee_id AS A FROM employees)", employee_schema)
    assert x.reads == objs(E, "employees.employee_id")
    assert x.used == frozenset()


def test_alias_from_derived_table_company(company_schema):
    x = extract_sql("SELECT A FROM (SELECT id AS A FROM employees)", company_schema)
    assert x.reads == objs(E, "employees.id")
    assert x.used == frozenset()


def test_star_expansion(employee_schema):
    x = extract_sql("SELECT * FROM employees", employee_schema)
    assert x.reads == objs(E, "employees.employee_id", "employees.firstname",
                           "employees.lastname", "employees.salary")


def test_update_rule(employee_schema):
    x = extract_sql("UPDATE employees SET salary = 0 WHERE employee_id = 7", employee_schema)
    assert x.writes == objs(E, "employees.salary")
    assert x.used == objs("employees.employee_id")
    assert x.reads == frozenset()


def test_update_matches_oracle(employee_schema):
    sql = "UPDATE employees SET salary = 0 WHERE employee_id = 7"
    x = extract_sql(sql, employee_schema)
    assert (x.reads, x.used, x.writes) == Oracle(employee_schema).run(sql)


def test_insert_without_columns_writes_all(employee_schema):
    x = extract_sql("INSERT INTO employees VALUES (1, 'a', 'b', 3)", employee_schema)
    assert x.writes == objs(E, "employees.employee_id", "employees.firstname",
                            "employees.lastname", "employees.salary")


def test_show_and_describe_read_table(employee_schema):
    assert extract_sql("DESCRIBE employees", employee_schema).reads == objs(E)
    assert extract_sql("SHOW COLUMNS FROM employees", employee_schema).reads == objs(E)


def test_column_in_both_clauses_yields_both(employee_schema):
    x = extract_sql("SELECT salary FROM employees WHERE salary > 3", employee_schema)
    assert SqlObject(E, "salary") in x.reads and SqlObject(E, "salary") in x.used


def test_function_names_and_literals_never_objects(employee_schema):
    x = extract_sql("SELECT CONCAT(firstname, 'salary') FROM employees WHERE 'lastname' = 'x'",
                    employee_schema)
    assert x.reads == objs(E, "employees.firstname") and x.used == frozenset()


def test_to_events_for_concat_query(employee_schema):
    evs = to_events(extract_sql(CONCAT_QUERY, employee_schema), 41)
    kinds = [e.kind for e in evs]
    assert kinds.count(EventKind.SQL_READ) == 4 and kinds.count(EventKind.SQL_USED) == 1
    assert len(evs) == 5 and all(e.worker == 41 for e in evs)


def test_to_events_for_update(employee_schema):
    evs = to_events(extract_sql("UPDATE employees SET salary = 0 WHERE employee_id = 7",
                                employee_schema), 9)
    assert [e.kind for e in evs] == [EventKind.SQL_WASGENERATEDBY] * 2 + [EventKind.SQL_USED]


def test_to_events_empty():
    from provguard.extract import Extraction
    assert to_events(Extraction(), 1) == []


def test_to_events_order_and_inverse(company_schema):
    x = extract_sql("UPDATE projects SET cost = cost * 2, title = 'x' WHERE lead_id = 3", company_schema)
    evs = to_events(x, 2)
    order = {EventKind.SQL_WASGENERATEDBY: 0, EventKind.SQL_READ: 1, EventKind.SQL_USED: 2}
    keys = [(order[e.kind], e.obj.sort_key) for e in evs]
    assert keys == sorted(keys)
    assert classify(evs) == x


@pytest.mark.parametrize("sql,exc", [
    ("SELECT a FROM ghosts", UnknownTable),
    ("SELECT nope FROM employees", UnresolvedColumn),
    ("SELECT id FROM employees, departments", AmbiguousColumn),
    ("SELECT x.id FROM employees e", UnresolvedColumn),
])
def test_resolution_errors(company_schema, sql, exc):
    with pytest.raises(exc):
        extract_sql(sql, company_schema)


def test_parse_error_propagates(company_schema):
    with pytest.raises(ParseError):
        extract_sql("SELECT FROM", company_schema)


# -- hand-written challenge suite against the clause-walking oracle ------------


def test_challenge_suite_shape():
    assert len(CHALLENGES) >= 30
    assert len(WILDCARD) >= 5 and len(ALIASES) >= 5 and len(NESTED) >= 5


@pytest.mark.parametrize("sql", CHALLENGES)
def test_challenge_matches_oracle(company_schema, sql):
    x = extract_sql(sql, company_schema)
    assert (x.reads, x.used, x.writes) == Oracle(company_schema).run(sql)


def _schema_objects(schema):
    out = set()
    for t, cols in schema.tables.items():
        out.add(SqlObject(t))
        out |= {SqlObject(t, c) for c in cols}
    return out


@pytest.mark.parametrize("sql", CHALLENGES)
def test_no_alias_survives(company_schema, sql):
    x = extract_sql(sql, company_schema)
    assert (x.reads | x.used | x.writes) <= _schema_objects(company_schema)


# -- generated-statement properties -------------------------------------------


def _triple(sql, schema):
    x = extract_sql(sql, schema)
    return x.reads, x.used, x.writes


@settings(max_examples=250)
@given(queries(), st.booleans())
def test_generated_matches_oracle(company_schema, q, aliased):
    sql = render(q, aliased)
    assert _triple(sql, company_schema) == Oracle(company_schema).run(sql)


@settings(max_examples=100)
@given(updates())
def test_generated_updates_match_oracle(company_schema, pair):
    for sql in pair:
        assert _triple(sql, company_schema) == Oracle(company_schema).run(sql)


@settings(max_examples=250)
@given(queries())
def test_alias_erasure(company_schema, q):
    assert _triple(render(q, False), company_schema) == _triple(render(q, True), company_schema)


@settings(max_examples=100)
@given(updates())
def test_alias_erasure_updates(company_schema, pair):
    plain, aliased = pair
    assert _triple(plain, company_schema) == _triple(aliased, company_schema)


@settings(max_examples=250)
@given(queries(), st.booleans(), st.integers(0, 10**6), st.integers(0, 10**6))
def test_ephemeral_blindness(company_schema, q, aliased, s1, s2):
    a, b = render(q, aliased, s1), render(q, aliased, s2)
    assert _triple(a, company_schema) == _triple(b, company_schema)


@settings(max_examples=250)
@given(queries())
def test_nesting_flattening(company_schema, q):
    inner = render(q, False)
    wrapped = f"SELECT * FROM ({inner}) w"
    assert _triple(wrapped, company_schema) == _triple(inner, company_schema)


@settings(max_examples=50)
@given(queries(), st.integers(2, 4))
def test_deep_nesting_flattening(company_schema, q, depth):
    sql = render(q, False)
    flat = _triple(sql, company_schema)
    for i in range(depth):
        sql = f"SELECT * FROM ({sql}) w{i}"
    assert _triple(sql, company_schema) == flat
