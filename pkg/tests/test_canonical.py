from __future__ import annotations

from hypothesis import given
from hypothesis import strategies as st

from govchat.canonical import canonical_bytes, canonical_dumps, from_hex, from_json_bytes, to_hex

json_values = st.recursive(
    st.none() | st.booleans() | st.integers(-(2**40), 2**40) | st.text(max_size=20),
    lambda children: st.lists(children, max_size=4)
    | st.dictionaries(st.text(max_size=10), children, max_size=4),
    max_leaves=20,
)


def test_sorted_keys_and_compactness():
    assert canonical_dumps({"b": 1, "a": [1, 2]}) == '{"a":[1,2],"b":1}'


def test_key_order_irrelevant():
    assert canonical_bytes({"x": 1, "y": 2}) == canonical_bytes({"y": 2, "x": 1})


def test_unicode_is_not_escaped():
    assert canonical_dumps({"name": "café"}) == '{"name":"café"}'


@given(json_values)
def test_roundtrip_is_stable(value):
    once = canonical_bytes(value)
    again = canonical_bytes(from_json_bytes(once))
    assert once == again


def test_hex_helpers():
    assert to_hex(b"\x00\xff") == "00ff"
    assert from_hex("00ff") == b"\x00\xff"
