import base64

import pytest
from hypothesis import given, strategies as st

from satp_gateway import encoding
from satp_gateway.encoding import DecodeError, decode, encode

ints = st.integers(min_value=encoding.INT_MIN, max_value=encoding.INT_MAX)
scalars = st.none() | st.booleans() | ints | st.text(max_size=20) | st.binary(max_size=20)
values = st.recursive(
    scalars,
    lambda inner: st.lists(inner, max_size=5) | st.dictionaries(st.text(max_size=8), inner, max_size=5),
    max_leaves=30,
)

VECTORS = [
    (None, "00"),
    (False, "01"),
    (True, "02"),
    (1, "030000000000000001"),
    (-2, "03fffffffffffffffe"),
    ("", "0400000000"),
    ("satp", "040000000473617470"),
    (b"\x00\xff", "050000000200ff"),
    ([1, "a"], "0600000002030000000000000001040000000161"),
    ({"b": 1, "a": None}, "070000000204000000016100040000000162030000000000000001"),
]


@pytest.mark.parametrize("value,hexed", VECTORS)
def test_vectors(value, hexed):
    assert encode(value).hex() == hexed
    assert decode(bytes.fromhex(hexed)) == value


def test_frame_and_line_vectors():
    assert encoding.frame(encode("hi")).hex() == "0000000704000000026869"
    assert encoding.dump_lines([{"type": "header"}]) == b"BwAAAAEEAAAABHR5cGUEAAAABmhlYWRlcg==\n"


@given(values)
def test_roundtrip(value):
    raw = encode(value)
    assert decode(raw) == value
    assert encode(decode(raw)) == raw


def _typed(v):
    # Python equality conflates True with 1; the encoding does not
    if isinstance(v, list):
        return ("list", tuple(_typed(x) for x in v))
    if isinstance(v, dict):
        return ("map", tuple(sorted((k, _typed(x)) for k, x in v.items())))
    return (type(v).__name__, v)


@given(values, values)
def test_injective(a, b):
    if _typed(a) != _typed(b):
        assert encode(a) != encode(b)


@given(st.dictionaries(st.text(max_size=6), ints, max_size=6))
def test_map_key_order_irrelevant(d):
    assert encode(dict(reversed(list(d.items())))) == encode(d)


@given(values, st.binary(min_size=1, max_size=4))
def test_trailing_bytes_rejected(value, extra):
    with pytest.raises(DecodeError):
        decode(encode(value) + extra)


@given(values)
def test_truncation_rejected(value):
    raw = encode(value)
    for cut in range(len(raw)):
        with pytest.raises(DecodeError):
            decode(raw[:cut])


@pytest.mark.parametrize("raw", [
    "08",                                                       # unknown tag
    "0700000002040000000162000400000001610 0".replace(" ", ""),   # keys out of order
    "070000000204000000016100040000000161 00".replace(" ", ""),   # duplicate key
    "0400000001ff",                                             # bad UTF-8
    "0700000001030000000000000001 00".replace(" ", ""),          # non-string key
])
def test_non_canonical_rejected(raw):
    with pytest.raises(DecodeError):
        decode(bytes.fromhex(raw))


def test_unencodable():
    for bad in (1.5, 2**63, -(2**63) - 1, {1: 2}, object()):
        with pytest.raises((TypeError, ValueError)):
            encode(bad)


def test_deep_nesting_rejected():
    raw = bytes.fromhex("0600000001") * 100 + b"\x00"
    with pytest.raises(DecodeError):
        decode(raw)


def test_frame_mismatch():
    with pytest.raises(DecodeError):
        encoding.unframe(bytes.fromhex("00000005") + b"abc")
    with pytest.raises(DecodeError):
        encoding.unframe(b"\x00\x00")


def test_lines_roundtrip_and_strictness():
    records = [{"a": 1}, [b"x", None], "s"]
    data = encoding.dump_lines(records)
    assert encoding.load_lines(data) == records
    with pytest.raises(DecodeError):
        encoding.load_lines(data[:-1])  # missing final newline
    unpadded = base64.b64encode(encode(None)).rstrip(b"=") + b"\n"
    assert unpadded == b"AA\n"
    with pytest.raises(DecodeError):
        encoding.load_lines(unpadded)
