"""Authentication service: the trusted directory binding usernames to keys.

Append-only plus revocation flags; an entry's keys never change after
registration. Revocation marks the entry so clients treat the signer's
*new* messages as unauthenticated, while material already stored keeps
verifying against the archived key.
"""

from __future__ import annotations

import json
import threading
from typing import Callable, Optional

from . import crypto
from .canonical import canonical_bytes, from_hex
from .errors import NameTakenError, NotFoundError, UnauthorizedError, UsernameError


class AuthService:
    def __init__(self, admin_pk: Optional[bytes] = None):
        self.admin_pk = admin_pk
        self._entries: dict = {}
        self._next_serial = 0
        self._lock = threading.RLock()

    def register(self, username: str, sig_pk_hex: str, gov_pk_hex: str) -> dict:
        if not username or len(username.encode("utf-8")) > 64:
            raise UsernameError("username must be 1..64 UTF-8 bytes")
        with self._lock:
            if username in self._entries:
                raise NameTakenError(username)
            self._next_serial += 1
            self._entries[username] = {
                "username": username,
                "sig_pk_hex": sig_pk_hex,
                "gov_pk_hex": gov_pk_hex,
                "registered_at": self._next_serial,
                "revoked": False,
            }
        return {"registered": username}

    def lookup(self, username: str) -> dict:
        with self._lock:
            entry = self._entries.get(username)
            if entry is None:
                raise NotFoundError(username)
            return dict(entry)

    def revoke(self, body: dict, sig_hex: str) -> dict:
        if self.admin_pk is None:
            raise UnauthorizedError("no admin key configured")
        if not crypto.verify(self.admin_pk, canonical_bytes(body), from_hex(sig_hex)):
            raise UnauthorizedError("bad admin signature")
        username = body["username"]
        with self._lock:
            entry = self._entries.get(username)
            if entry is None:
                raise NotFoundError(username)
            entry["revoked"] = True
        return {"revoked": username}

    def snapshot(self) -> dict:
        with self._lock:
            return {"entries": {u: dict(e) for u, e in self._entries.items()}}

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.snapshot(), fh, indent=1, sort_keys=True)


def directory_from_lookup(lookup: Callable[[str], dict]) -> Callable[[str], Optional[bytes]]:
    """Adapt a lookup callable into the governance-layer directory function.

    Returns the archived governance key even for revoked users (stored
    content must keep verifying); liveness of the signer is checked
    separately by callers that care.
    """

    def directory(username: str) -> Optional[bytes]:
        try:
            entry = lookup(username)
        except NotFoundError:
            return None
        return from_hex(entry["gov_pk_hex"])

    return directory
