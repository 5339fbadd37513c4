"""Canonical JSON serialization.

Every structure that is signed, hashed, or compared across clients is
serialized through these helpers: UTF-8, lexicographically sorted keys, no
insignificant whitespace, and binary fields pre-encoded as lowercase hex.
Two logically equal objects must always produce identical bytes.
"""

from __future__ import annotations

import json
from typing import Any


def canonical_dumps(obj: Any) -> str:
    """Canonical JSON string: sorted keys, compact separators, no NaN."""
    return json.dumps(
        obj,
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=False,
        allow_nan=False,
    )


def canonical_bytes(obj: Any) -> bytes:
    return canonical_dumps(obj).encode("utf-8")


def from_json_bytes(data: bytes) -> Any:
    return json.loads(data.decode("utf-8"))


def to_hex(data: bytes) -> str:
    return data.hex()


def from_hex(text: str) -> bytes:
    return bytes.fromhex(text)
