import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from provguard.model import (
    MAX_FRAME,
    EncodingError,
    EventKind,
    FrameDecoder,
    FrameTooLarge,
    MalformedFrame,
    NeedMoreData,
    ProvEvent,
    RemoteAddr,
    SqlObject,
    UnknownKind,
    decode_event,
    decode_stream,
    encode_event,
    encode_frame,
    new_uuid,
)

UUID = "0f8fad5b-d9cb-469f-a165-70867728950e"


def payload(frame: bytes) -> str:
    (n,) = struct.unpack(">I", frame[:4])
    assert len(frame) == 4 + n
    return frame[4:].decode()


def test_sql_read_payload_layout():
    e = ProvEvent.sql(EventKind.SQL_READ, 41, SqlObject("employees", "firstname"))
    assert payload(encode_event(e)) == "SQL_READ\t41\temployees\tfirstname"


def test_unit_start_payload_layout():
    e = ProvEvent.unit_start(7, UUID, RemoteAddr.parse("10.0.0.5:51332"))
    assert payload(encode_event(e)) == f"UNIT_START\t7\t{UUID}\t10.0.0.5:51332"


def test_table_level_object_has_empty_column_field():
    e = ProvEvent.sql(EventKind.SQL_USED, 3, SqlObject("orders"))
    assert payload(encode_event(e)) == "SQL_USED\t3\torders\t"


def test_tab_in_identifier_rejected():
    with pytest.raises((EncodingError, ValueError)):
        encode_event(ProvEvent.sql(EventKind.SQL_READ, 1, SqlObject("emp\tloyees", "id")))


def test_encoding_is_deterministic():
    e = ProvEvent.response_impact(9, 120, 3)
    assert encode_event(e) == encode_event(e)


def test_empty_buffer_needs_more_data():
    with pytest.raises(NeedMoreData):
        decode_event(b"")


def test_truncated_frame_needs_more_data():
    frame = encode_event(ProvEvent.unit_end(2, UUID))
    with pytest.raises(NeedMoreData):
        decode_event(frame[:-1])


def test_two_mib_declared_length_rejected():
    with pytest.raises(FrameTooLarge):
        decode_event(struct.pack(">I", 2 << 20) + b"x" * 16)


def test_frame_limit_on_encode():
    with pytest.raises((EncodingError, FrameTooLarge)):
        encode_frame(["PARSE_FAILURE", "1", "x" * (MAX_FRAME + 1)], free_tail=True)


def test_unknown_kind_rejected():
    with pytest.raises(UnknownKind):
        decode_event(encode_frame(["SQL_DELETE", "1", "t", "c"]))


def test_malformed_worker_rejected():
    with pytest.raises(MalformedFrame):
        decode_event(encode_frame(["SQL_READ", "zero", "t", "c"]))


def test_decode_reports_bytes_consumed():
    a = encode_event(ProvEvent.unit_end(2, UUID))
    b = encode_event(ProvEvent.response_impact(2, 0, 0))
    e, used = decode_event(a + b)
    assert used == len(a) and e.kind is EventKind.UNIT_END


def test_parse_failure_keeps_raw_input_verbatim():
    raw = "'); DROP TABLE--\tand\nmore"
    e = ProvEvent.parse_failure(5, raw)
    assert decode_event(encode_event(e))[0].raw == raw


def test_object_equality_is_case_insensitive():
    assert SqlObject("Employees", "ID") == SqlObject("employees", "id")
    assert hash(SqlObject("Employees", "ID")) == hash(SqlObject("employees", "id"))


@pytest.mark.parametrize("bad", ["", "a b", "a.b", "a'b", 'a"b'])
def test_bad_table_names_rejected(bad):
    with pytest.raises(ValueError):
        SqlObject(bad, "c")


def test_nonpositive_worker_rejected():
    with pytest.raises(ValueError):
        ProvEvent.unit_end(0, UUID)


# -- property: round trip and chunk-independent framing -----------------------

ident = st.from_regex(r"[a-z_][a-z0-9_]{0,11}", fullmatch=True)
workers = st.integers(1, 2**31 - 1)
objects = st.builds(SqlObject, ident, st.none() | ident)
addrs = st.builds(
    lambda a, b, c, d, p: RemoteAddr.parse(f"{a}.{b}.{c}.{d}:{p}"),
    *[st.integers(0, 255)] * 4,
    st.integers(1, 65535),
)
uuids = st.uuids(version=4).map(str)
raw_text = st.text(st.characters(blacklist_categories=("Cs",)), max_size=80)

events = st.one_of(
    st.builds(ProvEvent.sql, st.sampled_from([EventKind.SQL_READ, EventKind.SQL_USED,
                                               EventKind.SQL_WASGENERATEDBY]), workers, objects),
    st.builds(ProvEvent.unit_start, workers, uuids, addrs),
    st.builds(ProvEvent.unit_end, workers, uuids),
    st.builds(ProvEvent.parse_failure, workers, raw_text),
    st.builds(ProvEvent.response_impact, workers, st.integers(0, 2**40), st.integers(0, 2**31)),
)


@settings(max_examples=1200)
@given(events)
def test_round_trip(e):
    frame = encode_event(e)
    back, used = decode_event(frame)
    assert back == e and used == len(frame)


@settings(max_examples=100)
@given(st.lists(events, max_size=20))
def test_byte_at_a_time_framing(evs):
    blob = b"".join(encode_event(e) for e in evs)
    dec = FrameDecoder()
    out = []
    for i in range(len(blob)):
        dec.feed(blob[i : i + 1])
        out.extend(dec.events())
    assert out == evs and dec.pending == 0
    assert decode_stream(blob) == evs


def test_new_uuid_is_canonical():
    u = new_uuid()
    assert len(u) == 36 and u == u.lower() and u.count("-") == 4
