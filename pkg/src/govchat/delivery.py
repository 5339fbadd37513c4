"""Delivery service: relays envelopes without ever seeing plaintext.

Ordered envelopes are appended to an immutable per-group log with dense
sequence numbers; at most one envelope is ever accepted per (group, parent
epoch), which the DS enforces by reading the parent epoch from the
*unencrypted* AAD header (ciphertexts stay opaque). Unordered and welcome
envelopes go into per-user FIFO queues drained by the owner's sync.

The DS also warehouses single-use KeyPackages and enforces platform bans
issued by the moderation service (requests signed with the registered
admin key). The clock is injectable so ban expiry is testable.

``AdversarialDeliveryService`` extends the production service with a
fault-injection surface (partitions, drops, reordering, raw injection)
used by attack tests; faults shape delivery only and never mutate entries
already accepted into the log.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from typing import Callable, Optional

from . import crypto
from .canonical import canonical_bytes, from_hex
from .errors import (
    BadKeyPackageError,
    BannedError,
    ExhaustedError,
    UnauthorizedError,
    UnknownGroupError,
)
from .messaging import KeyPackage

logger = logging.getLogger(__name__)


class SimClock:
    """Manually advanced clock for deterministic ban-expiry tests."""

    def __init__(self, start: float = 0.0):
        self.now = start

    def __call__(self) -> float:
        return self.now

    def advance(self, seconds: float) -> None:
        self.now += seconds


class _GroupLog:
    def __init__(self, group_id: str):
        self.group_id = group_id
        self.entries: list = []  # wire envelopes, seq assigned on append
        self.parents: set = set()
        self.members: set = set()


def _parent_epoch_of(env_wire: dict) -> int:
    aad = json.loads(from_hex(env_wire["aad_hex"]).decode("utf-8"))
    return int(aad["parent_epoch"])


class DeliveryService:
    def __init__(self, admin_pk: Optional[bytes] = None, clock: Callable[[], float] = time.time):
        self.admin_pk = admin_pk
        self.clock = clock
        self._groups: dict = {}
        self._queues: dict = {}
        self._key_packages: dict = {}
        self._bans: dict = {}  # username -> expiry timestamp, or None for forever
        self._lock = threading.RLock()

    # -- bans -----------------------------------------------------------------

    def _check_ban(self, username: str) -> None:
        with self._lock:
            until = self._bans.get(username, "absent")
        if until == "absent":
            return
        if until is None or self.clock() < until:
            raise BannedError(username)

    def apply_ban(self, body: dict, sig_hex: str) -> dict:
        """Record a platform ban; the request must be admin-signed."""
        self._verify_admin(body, sig_hex)
        username = body["username"]
        until = body.get("until")
        with self._lock:
            current = self._bans.get(username, "absent")
            if until is None or current is None:
                self._bans[username] = None
            elif current == "absent":
                self._bans[username] = float(until)
            else:
                self._bans[username] = max(float(current), float(until))
        logger.info("ban recorded for %s until %s", username, self._bans[username])
        return {"banned": username, "until": self._bans[username]}

    def _verify_admin(self, body: dict, sig_hex: str) -> None:
        if self.admin_pk is None:
            raise UnauthorizedError("no admin key configured")
        if not crypto.verify(self.admin_pk, canonical_bytes(body), from_hex(sig_hex)):
            raise UnauthorizedError("bad admin signature")

    # -- ordered channel --------------------------------------------------------

    def handle_send_ordered(self, sender: str, group_id: str, env_wire: dict, last_acked: int = -1) -> dict:
        self._check_ban(sender)
        try:
            parent = _parent_epoch_of(env_wire)
        except (KeyError, ValueError, TypeError) as exc:
            raise UnknownGroupError(f"unreadable ordered header: {exc}") from exc
        with self._lock:
            log = self._groups.get(group_id)
            if log is None:
                # Bootstrap: the first ordered sender registers the group.
                log = _GroupLog(group_id)
                log.members.add(sender)
                self._groups[group_id] = log
            if sender not in log.members:
                raise UnknownGroupError(f"{sender} is not registered for {group_id}")
            backlog = [e for e in log.entries if e["seq"] > last_acked]
            if parent in log.parents:
                return {"status": "rejected_conflict", "backlog": backlog}
            entry = dict(env_wire)
            entry["seq"] = len(log.entries)
            log.entries.append(entry)
            log.parents.add(parent)
            # The commit may add members; they are registered when their
            # welcome is relayed.
            return {"status": "accepted", "seq": entry["seq"], "backlog": backlog}

    # -- unordered channel --------------------------------------------------------

    def handle_send_unordered(self, sender: str, recipients, env_wire: dict) -> dict:
        self._check_ban(sender)
        names = self._resolve_recipients(sender, recipients)
        with self._lock:
            for name in names:
                self._queues.setdefault(name, []).append(dict(env_wire))
        return {"delivered": len(names)}

    def _resolve_recipients(self, sender: str, recipients) -> list:
        if isinstance(recipients, dict) and "group" in recipients:
            with self._lock:
                log = self._groups.get(recipients["group"])
                members = sorted(log.members) if log else []
            return [m for m in members if m != sender]
        return [r for r in recipients if r != sender]

    def relay_welcome(self, sender: str, recipient: str, env_wire: dict) -> dict:
        self._check_ban(sender)
        with self._lock:
            self._queues.setdefault(recipient, []).append(dict(env_wire))
            group_id = env_wire.get("group_id")
            if group_id in self._groups:
                self._groups[group_id].members.add(recipient)
        return {"delivered": 1}

    # -- sync ----------------------------------------------------------------------

    def handle_sync(self, user: str, last_acked: dict) -> dict:
        ordered = {}
        with self._lock:
            for group_id, acked in last_acked.items():
                log = self._groups.get(group_id)
                if log is None:
                    continue
                entries = [e for e in log.entries if e["seq"] > int(acked)]
                if entries:
                    ordered[group_id] = entries
            unordered = self._queues.pop(user, [])
        return {"ordered": ordered, "unordered": unordered}

    # -- key packages -----------------------------------------------------------------

    def publish_key_packages(self, user: str, packages: list) -> dict:
        validated = []
        for wire in packages:
            try:
                kp = KeyPackage.from_wire(wire)
            except (KeyError, ValueError, TypeError) as exc:
                raise BadKeyPackageError(str(exc)) from exc
            if kp.username != user or not kp.verify():
                raise BadKeyPackageError(f"package for {kp.username} fails self-verification")
            validated.append(wire)
        with self._lock:
            self._key_packages.setdefault(user, []).extend(validated)
        return {"stored": len(validated)}

    def fetch_key_package(self, username: str) -> dict:
        with self._lock:
            stock = self._key_packages.get(username, [])
            if not stock:
                raise ExhaustedError(f"no key packages left for {username}")
            return stock.pop(0)

    # -- persistence ---------------------------------------------------------------------

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "groups": {
                    gid: {
                        "entries": [dict(e) for e in log.entries],
                        "parents": sorted(log.parents),
                        "members": sorted(log.members),
                    }
                    for gid, log in self._groups.items()
                },
                "queues": {u: [dict(e) for e in q] for u, q in self._queues.items()},
                "key_packages": {u: list(ps) for u, ps in self._key_packages.items()},
                "bans": dict(self._bans),
            }

    def restore(self, snap: dict) -> None:
        with self._lock:
            self._groups = {}
            for gid, obj in snap.get("groups", {}).items():
                log = _GroupLog(gid)
                log.entries = [dict(e) for e in obj["entries"]]
                log.parents = set(obj["parents"])
                log.members = set(obj["members"])
                self._groups[gid] = log
            self._queues = {u: list(q) for u, q in snap.get("queues", {}).items()}
            self._key_packages = {u: list(p) for u, p in snap.get("key_packages", {}).items()}
            self._bans = dict(snap.get("bans", {}))

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.snapshot(), fh, indent=1, sort_keys=True)

    def load(self, path: str) -> None:
        with open(path, "r", encoding="utf-8") as fh:
            self.restore(json.load(fh))


class AdversarialDeliveryService(DeliveryService):
    """Production DS plus a scripted fault-injection surface (test builds).

    Faults only shape what gets delivered: the canonical accepted log is
    never rewritten. Partitions maintain per-side branch logs layered over
    the shared prefix, which is exactly the forked view a malicious
    sequencer could serve.
    """

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.partitions: list = []
        self._branches: list = []
        self._cross = False
        self._drop_unordered_from: set = set()
        self._injected: dict = {}
        self._reorder_seed: Optional[int] = None
        self.fault_log: list = []

    # -- fault controls ------------------------------------------------------

    def partition(self, sides: list) -> None:
        """Split users into sides; each side continues on its own branch."""
        with self._lock:
            self.partitions = [set(side) for side in sides]
            self._branches = []
            for _ in self.partitions:
                self._branches.append({"entries": {}, "parents": {}})
        self.fault_log.append(("partition", [sorted(s) for s in sides]))

    def heal_and_cross_deliver(self) -> None:
        """End the partition but keep serving every branch to everyone:
        the first cross-branch commit a client sees triggers fork detection."""
        self.fault_log.append(("cross_deliver",))
        self._cross = True

    def drop_unordered_from(self, *senders: str) -> None:
        self._drop_unordered_from.update(senders)
        self.fault_log.append(("drop_unordered_from", sorted(senders)))

    def clear_unordered_drops(self) -> None:
        self._drop_unordered_from.clear()

    def inject(self, user: str, env_wire: dict) -> None:
        """Force-feed an arbitrary ordered envelope to one user's next sync."""
        self._injected.setdefault(user, []).append(dict(env_wire))
        self.fault_log.append(("inject", user))

    def reorder_unordered(self, seed: int) -> None:
        self._reorder_seed = seed
        self.fault_log.append(("reorder_unordered", seed))

    def load_fault_script(self, script: dict) -> None:
        if "partition" in script:
            self.partition(script["partition"])
        if "drop_unordered_from" in script:
            self.drop_unordered_from(*script["drop_unordered_from"])
        if "reorder_unordered" in script:
            self.reorder_unordered(int(script["reorder_unordered"]))

    # -- behavior overrides -----------------------------------------------------

    def _side_of(self, user: str) -> Optional[int]:
        for i, side in enumerate(self.partitions):
            if user in side:
                return i
        return None

    def handle_send_ordered(self, sender, group_id, env_wire, last_acked=-1):
        side = self._side_of(sender)
        if side is None or self._cross:
            return super().handle_send_ordered(sender, group_id, env_wire, last_acked)
        self._check_ban(sender)
        parent = _parent_epoch_of(env_wire)
        with self._lock:
            log = self._groups.get(group_id)
            if log is None or sender not in log.members:
                raise UnknownGroupError(group_id)
            branch = self._branches[side]
            entries = branch["entries"].setdefault(group_id, [])
            parents = branch["parents"].setdefault(group_id, set(log.parents))
            backlog = [e for e in log.entries + entries if e["seq"] > last_acked]
            if parent in parents:
                return {"status": "rejected_conflict", "backlog": backlog}
            entry = dict(env_wire)
            entry["seq"] = len(log.entries) + len(entries)
            entries.append(entry)
            parents.add(parent)
            return {"status": "accepted", "seq": entry["seq"], "backlog": backlog}

    def handle_send_unordered(self, sender, recipients, env_wire):
        if sender in self._drop_unordered_from:
            self.fault_log.append(("dropped_unordered", sender))
            names = self._resolve_recipients(sender, recipients)
            return {"delivered": len(names)}  # silently swallowed
        return super().handle_send_unordered(sender, recipients, env_wire)

    def handle_sync(self, user, last_acked):
        result = super().handle_sync(user, last_acked)
        with self._lock:
            side = self._side_of(user)
            for group_id, acked in last_acked.items():
                own, foreign = [], []
                for i, branch in enumerate(self._branches):
                    entries = branch["entries"].get(group_id, [])
                    if side is None or i == side:
                        own.extend(e for e in entries if e["seq"] > int(acked))
                    elif self._cross:
                        foreign.extend(entries)
                if own:
                    result["ordered"].setdefault(group_id, [])
                    result["ordered"][group_id].extend(own)
                    result["ordered"][group_id].sort(key=lambda e: e["seq"])
                if foreign:
                    # A malicious sequencer keeps the deception coherent: the
                    # other side's entries are renumbered to extend this
                    # user's view, so clients actually process them (and trip
                    # over the diverged history).
                    result["ordered"].setdefault(group_id, [])
                    top = max(
                        [e["seq"] for e in result["ordered"][group_id]] + [int(acked)]
                    )
                    for offset, entry in enumerate(foreign):
                        renumbered = dict(entry)
                        renumbered["seq"] = top + 1 + offset
                        result["ordered"][group_id].append(renumbered)
            injected = self._injected.pop(user, [])
        if injected:
            for env in injected:
                result["ordered"].setdefault(env["group_id"], []).append(env)
        if self._reorder_seed is not None and result["unordered"]:
            import random

            random.Random(self._reorder_seed).shuffle(result["unordered"])
        return result
