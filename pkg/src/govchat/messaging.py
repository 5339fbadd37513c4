"""Encrypted group messaging with epochs, ordered commits and unordered messages.

Each group advances through epochs: exactly one merged commit per epoch. A
commit carries one or more proposals (Add / Remove / Update membership
changes, or OAM — an opaque ordered application payload). Fresh entropy for
the next epoch secret is sealed individually to every remaining member's
KEM key, so removed members cannot follow the group forward.

Epoch secrets chain through the transcript hash::

    transcript' = SHA256(transcript || commit_bytes)
    epoch_secret' = KDF(epoch_secret, "epoch", commit_secret || transcript')

which makes the AEAD key of every ordered envelope depend on the full
commit history: a receiver whose history diverged cannot decrypt, and that
failure (or a parent-epoch mismatch) is surfaced as a detected fork, after
which the group freezes.

Incoming-message problems are reported as events (``ForkDetected``,
``AuthFailure``, ``DecryptFailed``) so a sync loop can keep draining;
misuse of the local API raises typed exceptions instead.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import crypto
from .canonical import canonical_bytes, from_hex, from_json_bytes, to_hex
from .errors import (
    AlreadyMemberError,
    BadKeyPackageError,
    DecryptError,
    DuplicateGroupError,
    GroupFrozenError,
    NotAMemberError,
    PendingCommitInFlightError,
    RetriesExhaustedError,
    UnknownGroupError,
    UsernameError,
)

logger = logging.getLogger(__name__)

KEY_PACKAGES_PER_CLIENT = 10
MAX_OAM_BYTES = 1 << 20
MAX_COMMIT_ATTEMPTS = 8
MAX_BUFFERED_FUTURE_UAMS = 256

CHANNEL_ORDERED = "ordered"
CHANNEL_UNORDERED = "unordered"
CHANNEL_WELCOME = "welcome"

PROPOSAL_KINDS = ("Add", "Remove", "Update", "OAM")

# Reports a commit the group's upper layer refuses to merge; returns a
# reason string, or None to accept.  Receives (commit_wire, committer,
# roster_usernames).
CommitValidator = Callable[[dict, str, list], Optional[str]]


# ---------------------------------------------------------------------------
# Wire structures
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Member:
    username: str
    sig_pk: bytes
    kem_pk: bytes

    def to_wire(self) -> dict:
        return {
            "username": self.username,
            "sig_pk_hex": to_hex(self.sig_pk),
            "kem_pk_hex": to_hex(self.kem_pk),
        }

    @staticmethod
    def from_wire(obj: dict) -> "Member":
        return Member(obj["username"], from_hex(obj["sig_pk_hex"]), from_hex(obj["kem_pk_hex"]))


@dataclass(frozen=True)
class KeyPackage:
    username: str
    sig_pk: bytes
    kem_pk: bytes
    sig: bytes

    def signed_bytes(self) -> bytes:
        return canonical_bytes(
            {
                "username": self.username,
                "sig_pk_hex": to_hex(self.sig_pk),
                "kem_pk_hex": to_hex(self.kem_pk),
            }
        )

    def verify(self) -> bool:
        return crypto.verify(self.sig_pk, self.signed_bytes(), self.sig)

    def to_wire(self) -> dict:
        return {
            "username": self.username,
            "sig_pk_hex": to_hex(self.sig_pk),
            "kem_pk_hex": to_hex(self.kem_pk),
            "sig_hex": to_hex(self.sig),
        }

    @staticmethod
    def from_wire(obj: dict) -> "KeyPackage":
        return KeyPackage(
            obj["username"],
            from_hex(obj["sig_pk_hex"]),
            from_hex(obj["kem_pk_hex"]),
            from_hex(obj["sig_hex"]),
        )


@dataclass
class Envelope:
    """Wire unit between clients and the delivery service."""

    channel: str
    group_id: str
    sender: str
    seq: Optional[int]
    aad: bytes
    ct: bytes

    def to_wire(self) -> dict:
        return {
            "channel": self.channel,
            "group_id": self.group_id,
            "sender": self.sender,
            "seq": self.seq,
            "aad_hex": to_hex(self.aad),
            "ct_hex": to_hex(self.ct),
        }

    @staticmethod
    def from_wire(obj: dict) -> "Envelope":
        return Envelope(
            channel=obj["channel"],
            group_id=obj["group_id"],
            sender=obj["sender"],
            seq=obj.get("seq"),
            aad=from_hex(obj["aad_hex"]),
            ct=from_hex(obj["ct_hex"]),
        )


@dataclass
class PendingCommit:
    """A locally issued, not yet accepted commit (at most one per group)."""

    parent_epoch: int
    proposals: list
    body_bytes: bytes
    envelope: Envelope
    welcomes: list
    attempts: int = 1


@dataclass
class GroupCryptoState:
    group_id: str
    epoch: int
    members: list
    epoch_secret: bytes
    transcript_hash: bytes
    pending_commit: Optional[PendingCommit] = None
    prev_epoch_secret: Optional[bytes] = None
    uam_ctr: int = 0
    frozen: bool = False
    removed: bool = False
    future_uams: list = field(default_factory=list)

    def member(self, username: str) -> Optional[Member]:
        for m in self.members:
            if m.username == username:
                return m
        return None

    def usernames(self) -> list:
        return [m.username for m in self.members]


# ---------------------------------------------------------------------------
# Events emitted by process_incoming
# ---------------------------------------------------------------------------


@dataclass
class DecodedUAM:
    group_id: str
    sender: str
    payload: bytes
    epoch: int


@dataclass
class DecodedOAM:
    group_id: str
    committer: str
    payload: bytes
    epoch: int  # epoch after the merge
    seq: Optional[int]


@dataclass
class MembershipChange:
    group_id: str
    added: list
    removed: list
    committer: str
    epoch: int
    seq: Optional[int]


@dataclass
class ForkDetected:
    group_id: str
    reason: str
    seq: Optional[int] = None


@dataclass
class AuthFailure:
    group_id: str
    reason: str


@dataclass
class DecryptFailed:
    group_id: str
    reason: str


@dataclass
class RemovedFromGroup:
    group_id: str
    by: str


@dataclass
class GroupJoined:
    group_id: str
    epoch: int


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _commit_signed_bytes(group_id: str, body: dict) -> bytes:
    return canonical_bytes(
        {
            "group_id": group_id,
            "parent_epoch": body["parent_epoch"],
            "proposals": body["proposals"],
            "committer": body["committer"],
            "commit_secret_fanout": body["commit_secret_fanout"],
        }
    )


def _ordered_aad(group_id: str, sender: str, parent_epoch: int) -> bytes:
    return canonical_bytes(
        {
            "channel": CHANNEL_ORDERED,
            "group_id": group_id,
            "sender": sender,
            "parent_epoch": parent_epoch,
        }
    )


def _unordered_aad(group_id: str, sender: str, epoch: int, ctr: int) -> bytes:
    return canonical_bytes(
        {
            "channel": CHANNEL_UNORDERED,
            "group_id": group_id,
            "sender": sender,
            "epoch": epoch,
            "ctr": ctr,
        }
    )


def _ordered_key(epoch_secret: bytes, sender: str, parent_epoch: int) -> bytes:
    return crypto.kdf(epoch_secret, "oam-wrap", f"{sender}|{parent_epoch}".encode())


def _uam_key(epoch_secret: bytes, sender: str, ctr: int) -> bytes:
    return crypto.kdf(epoch_secret, "uam", f"{sender}|{ctr}".encode())


def _apply_proposals(members: list, proposals: list) -> tuple:
    """Return (new_members, added, removed) after applying membership proposals."""
    new_members = list(members)
    added, removed = [], []
    for prop in proposals:
        kind, body = prop["kind"], prop["body"]
        if kind == "Add":
            kp = KeyPackage.from_wire(body["key_package"])
            new_members.append(Member(kp.username, kp.sig_pk, kp.kem_pk))
            added.append(kp.username)
        elif kind == "Remove":
            name = body["username"]
            new_members = [m for m in new_members if m.username != name]
            removed.append(name)
        elif kind == "Update":
            name, new_pk = body["member"], from_hex(body["kem_pk_hex"])
            new_members = [
                Member(m.username, m.sig_pk, new_pk) if m.username == name else m
                for m in new_members
            ]
    return new_members, added, removed


class BackoffPolicy:
    """Exponential backoff schedule for commit-conflict retries.

    base 100 ms, factor 2, jitter +/-20%, capped at MAX_COMMIT_ATTEMPTS
    attempts overall.
    """

    def __init__(self, base_ms: float = 100.0, factor: float = 2.0, jitter: float = 0.2):
        self.base_ms = base_ms
        self.factor = factor
        self.jitter = jitter

    def delay_ms(self, retry_index: int, unit_random: float = 0.5) -> float:
        """Delay before retry number ``retry_index`` (1-based); jitter drawn
        from ``unit_random`` in [0, 1) so tests can pin it."""
        raw = self.base_ms * (self.factor ** (retry_index - 1))
        return raw * (1.0 - self.jitter + 2.0 * self.jitter * unit_random)


# ---------------------------------------------------------------------------
# Client-side messaging state machine
# ---------------------------------------------------------------------------


class MessagingClient:
    """Per-user messaging state: identity keys and all group channels.

    Single-writer: callers serialize all mutations for a given group.
    """

    def __init__(self, username: str, rand: crypto.RandFn = os.urandom):
        if not username or len(username.encode("utf-8")) > 64:
            raise UsernameError("username must be 1..64 UTF-8 bytes")
        self.username = username
        self.rand = rand
        self.sig_keypair = crypto.generate_sig_keypair(rand)
        # All KEM secrets we can open blobs with, keyed by public key hex.
        self.kem_secrets: dict = {}
        self.groups: dict = {}
        self.key_packages: list = []
        for _ in range(KEY_PACKAGES_PER_CLIENT):
            kem = crypto.generate_kem_keypair(rand)
            self.kem_secrets[to_hex(kem.public)] = kem.secret
            kp = KeyPackage(username, self.sig_keypair.public, kem.public, b"")
            sig = crypto.sign(self.sig_keypair.secret, kp.signed_bytes())
            self.key_packages.append(KeyPackage(username, self.sig_keypair.public, kem.public, sig))

    # -- group lookup ------------------------------------------------------

    def group(self, group_id: str) -> GroupCryptoState:
        st = self.groups.get(group_id)
        if st is None:
            raise UnknownGroupError(group_id)
        return st

    def get_epoch(self, group_id: str) -> int:
        return self.group(group_id).epoch

    def _require_active_member(self, st: GroupCryptoState) -> None:
        if st.frozen:
            raise GroupFrozenError(st.group_id)
        if st.removed or st.member(self.username) is None:
            raise NotAMemberError(self.username)

    # -- group lifecycle ----------------------------------------------------

    def create_group(self, group_id: str) -> GroupCryptoState:
        if group_id in self.groups:
            raise DuplicateGroupError(group_id)
        kem = crypto.generate_kem_keypair(self.rand)
        self.kem_secrets[to_hex(kem.public)] = kem.secret
        st = GroupCryptoState(
            group_id=group_id,
            epoch=0,
            members=[Member(self.username, self.sig_keypair.public, kem.public)],
            epoch_secret=self.rand(32),
            transcript_hash=crypto.sha256(b"init" + group_id.encode("utf-8")),
        )
        self.groups[group_id] = st
        return st

    def join_group(self, welcome: Envelope) -> GroupCryptoState:
        payload = None
        for secret in self.kem_secrets.values():
            try:
                payload = crypto.open_sealed(secret, welcome.ct)
                break
            except DecryptError:
                continue
        if payload is None:
            raise DecryptError("welcome not sealed to any of our KEM keys")
        try:
            obj = from_json_bytes(payload)
            group_id = obj["group_id"]
            st = GroupCryptoState(
                group_id=group_id,
                epoch=int(obj["epoch"]),
                members=[Member.from_wire(m) for m in obj["roster"]],
                epoch_secret=from_hex(obj["epoch_secret_hex"]),
                transcript_hash=from_hex(obj["transcript_hash_hex"]),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise DecryptError(f"malformed welcome payload: {exc}") from exc
        if group_id in self.groups:
            raise DuplicateGroupError(group_id)
        if st.member(self.username) is None:
            raise DecryptError("welcome roster does not include us")
        self.groups[group_id] = st
        return st

    # -- unordered sends -----------------------------------------------------

    def send_uam(self, group_id: str, payload: bytes) -> Envelope:
        st = self.group(group_id)
        self._require_active_member(st)
        ctr = st.uam_ctr
        st.uam_ctr += 1
        aad = _unordered_aad(group_id, self.username, st.epoch, ctr)
        key = _uam_key(st.epoch_secret, self.username, ctr)
        nonce = self.rand(crypto.NONCE_LEN)
        ct = nonce + crypto.aead_encrypt(key, nonce, aad, payload)
        return Envelope(CHANNEL_UNORDERED, group_id, self.username, None, aad, ct)

    # -- ordered sends (proposals + commit) ----------------------------------

    def send_oam(self, group_id: str, payload: bytes) -> Envelope:
        if len(payload) > MAX_OAM_BYTES:
            raise ValueError("OAM payload exceeds 1 MiB")
        return self.send_commit(group_id, [{"kind": "OAM", "body": to_hex(payload)}])

    def add_user(self, group_id: str, key_package: KeyPackage, extra_proposals: list = ()):
        """Build an Add commit plus the Welcome for the joiner.

        Returns (commit_envelope, [welcome_envelopes]).
        """
        st = self.group(group_id)
        self._require_active_member(st)
        if not key_package.verify():
            raise BadKeyPackageError(key_package.username)
        if st.member(key_package.username) is not None:
            raise AlreadyMemberError(key_package.username)
        proposals = [{"kind": "Add", "body": {"key_package": key_package.to_wire()}}]
        proposals.extend(extra_proposals)
        env = self.send_commit(group_id, proposals)
        return env, list(st.pending_commit.welcomes)

    def remove_user(self, group_id: str, username: str, extra_proposals: list = ()) -> Envelope:
        st = self.group(group_id)
        self._require_active_member(st)
        if st.member(username) is None:
            raise NotAMemberError(username)
        proposals = [{"kind": "Remove", "body": {"username": username}}]
        proposals.extend(extra_proposals)
        return self.send_commit(group_id, proposals)

    def update_user(self, group_id: str) -> Envelope:
        st = self.group(group_id)
        self._require_active_member(st)
        kem = crypto.generate_kem_keypair(self.rand)
        self.kem_secrets[to_hex(kem.public)] = kem.secret
        return self.send_commit(
            group_id,
            [{"kind": "Update", "body": {"member": self.username, "kem_pk_hex": to_hex(kem.public)}}],
        )

    def send_commit(self, group_id: str, proposals: list) -> Envelope:
        st = self.group(group_id)
        self._require_active_member(st)
        if st.pending_commit is not None:
            raise PendingCommitInFlightError(group_id)
        st.pending_commit = self._build_pending(st, proposals)
        return st.pending_commit.envelope

    def _build_pending(self, st: GroupCryptoState, proposals: list) -> PendingCommit:
        for prop in proposals:
            if prop["kind"] not in PROPOSAL_KINDS:
                raise ValueError(f"unknown proposal kind {prop['kind']}")
            if prop["kind"] == "OAM" and len(prop["body"]) > 2 * MAX_OAM_BYTES:
                raise ValueError("OAM payload exceeds 1 MiB")
        commit_secret = self.rand(32)
        new_members, added, _removed = _apply_proposals(st.members, proposals)
        fanout = []
        for m in new_members:
            if m.username in added:
                continue  # joiners learn the epoch secret from their Welcome
            fanout.append(
                {"member": m.username, "sealed_hex": to_hex(crypto.seal(m.kem_pk, commit_secret, self.rand))}
            )
        body = {
            "parent_epoch": st.epoch,
            "proposals": proposals,
            "committer": self.username,
            "commit_secret_fanout": fanout,
        }
        sig = crypto.sign(self.sig_keypair.secret, _commit_signed_bytes(st.group_id, body))
        body["sig_hex"] = to_hex(sig)
        body_bytes = canonical_bytes(body)

        aad = _ordered_aad(st.group_id, self.username, st.epoch)
        key = _ordered_key(st.epoch_secret, self.username, st.epoch)
        nonce = self.rand(crypto.NONCE_LEN)
        ct = nonce + crypto.aead_encrypt(key, nonce, aad, body_bytes)
        envelope = Envelope(CHANNEL_ORDERED, st.group_id, self.username, None, aad, ct)

        # Predict the post-merge state to build Welcomes for any joiners.
        transcript = crypto.sha256(st.transcript_hash + body_bytes)
        epoch_secret = crypto.kdf(st.epoch_secret, "epoch", commit_secret + transcript)
        welcomes = []
        for prop in proposals:
            if prop["kind"] != "Add":
                continue
            kp = KeyPackage.from_wire(prop["body"]["key_package"])
            welcome_payload = canonical_bytes(
                {
                    "group_id": st.group_id,
                    "epoch": st.epoch + 1,
                    "roster": [m.to_wire() for m in new_members],
                    "epoch_secret_hex": to_hex(epoch_secret),
                    "transcript_hash_hex": to_hex(transcript),
                }
            )
            welcome_ct = crypto.seal(kp.kem_pk, welcome_payload, self.rand)
            welcome_aad = canonical_bytes(
                {"channel": CHANNEL_WELCOME, "group_id": st.group_id, "sender": self.username}
            )
            welcomes.append(
                Envelope(CHANNEL_WELCOME, st.group_id, self.username, None, welcome_aad, welcome_ct)
            )
        return PendingCommit(
            parent_epoch=st.epoch,
            proposals=proposals,
            body_bytes=body_bytes,
            envelope=envelope,
            welcomes=welcomes,
        )

    def drop_pending(self, group_id: str) -> None:
        self.group(group_id).pending_commit = None

    def rebase_pending(self, group_id: str, newer_commits: list, validator: CommitValidator = None):
        """Merge commits that won the race, then re-issue our proposals on top.

        Returns (events_from_merges, new_commit_envelope). Raises
        RetriesExhaustedError once MAX_COMMIT_ATTEMPTS is exceeded.
        """
        st = self.group(group_id)
        if st.pending_commit is None:
            raise PendingCommitInFlightError("no pending commit to rebase")
        pending = st.pending_commit
        if pending.attempts >= MAX_COMMIT_ATTEMPTS:
            st.pending_commit = None
            raise RetriesExhaustedError(group_id)
        st.pending_commit = None
        events = []
        for env in newer_commits:
            events.extend(self.process_incoming(env, validator))
        if st.frozen:
            raise GroupFrozenError(group_id)
        if st.removed or st.member(self.username) is None:
            raise NotAMemberError(self.username)
        proposals = self._rebase_filter(st, pending.proposals)
        st.pending_commit = self._build_pending(st, proposals)
        st.pending_commit.attempts = pending.attempts + 1
        return events, st.pending_commit.envelope

    @staticmethod
    def _rebase_filter(st: GroupCryptoState, proposals: list) -> list:
        """Drop membership proposals made moot by the commits we just merged."""
        kept = []
        for prop in proposals:
            if prop["kind"] == "Add":
                kp = prop["body"]["key_package"]
                if st.member(kp["username"]) is not None:
                    continue
            if prop["kind"] == "Remove" and st.member(prop["body"]["username"]) is None:
                continue
            kept.append(prop)
        return kept

    # -- receive -------------------------------------------------------------

    def process_incoming(self, envelope: Envelope, validator: CommitValidator = None) -> list:
        """Decrypt and apply one envelope; returns a list of events."""
        if envelope.channel == CHANNEL_WELCOME:
            st = self.join_group(envelope)
            return [GroupJoined(st.group_id, st.epoch)]
        st = self.group(envelope.group_id)
        if envelope.channel == CHANNEL_ORDERED:
            return self._process_ordered(st, envelope, validator)
        if envelope.channel == CHANNEL_UNORDERED:
            return self._process_unordered(st, envelope)
        return [AuthFailure(envelope.group_id, f"unknown channel {envelope.channel}")]

    def _process_ordered(self, st: GroupCryptoState, envelope: Envelope, validator) -> list:
        if st.frozen:
            return []
        if st.removed:
            return [DecryptFailed(st.group_id, "no longer a member")]
        try:
            aad = from_json_bytes(envelope.aad)
            parent_epoch = int(aad["parent_epoch"])
            aad_sender = aad["sender"]
        except (ValueError, KeyError, TypeError):
            return [AuthFailure(st.group_id, "malformed ordered aad")]
        if aad_sender != envelope.sender or aad.get("group_id") != st.group_id:
            return [AuthFailure(st.group_id, "aad does not match envelope header")]
        sender = st.member(envelope.sender)
        if sender is None:
            return [AuthFailure(st.group_id, f"commit from non-member {envelope.sender}")]
        if parent_epoch != st.epoch:
            st.frozen = True
            return [
                ForkDetected(
                    st.group_id,
                    f"commit parent epoch {parent_epoch} != local epoch {st.epoch}",
                    envelope.seq,
                )
            ]
        key = _ordered_key(st.epoch_secret, envelope.sender, parent_epoch)
        try:
            body_bytes = crypto.aead_decrypt(key, envelope.ct[:12], envelope.aad, envelope.ct[12:])
        except DecryptError:
            # Same epoch number but a different history chain: fork evidence.
            st.frozen = True
            return [ForkDetected(st.group_id, "transcript divergence (commit undecryptable)", envelope.seq)]
        try:
            body = from_json_bytes(body_bytes)
            proposals = body["proposals"]
            committer = body["committer"]
            sig = from_hex(body["sig_hex"])
        except (ValueError, KeyError, TypeError):
            return [AuthFailure(st.group_id, "malformed commit body")]
        if committer != envelope.sender:
            return [AuthFailure(st.group_id, "committer does not match envelope sender")]
        if int(body["parent_epoch"]) != parent_epoch or not proposals:
            return [AuthFailure(st.group_id, "commit body inconsistent with aad")]
        if not crypto.verify(sender.sig_pk, _commit_signed_bytes(st.group_id, body), sig):
            return [AuthFailure(st.group_id, "bad committer signature")]
        for prop in proposals:
            if prop.get("kind") not in PROPOSAL_KINDS:
                return [AuthFailure(st.group_id, "unknown proposal kind")]
            if prop["kind"] == "Add":
                kp = KeyPackage.from_wire(prop["body"]["key_package"])
                if not kp.verify():
                    return [AuthFailure(st.group_id, "invalid key package in Add")]
                if st.member(kp.username) is not None:
                    return [AuthFailure(st.group_id, f"Add of existing member {kp.username}")]
            elif prop["kind"] == "Remove":
                if st.member(prop["body"]["username"]) is None:
                    return [AuthFailure(st.group_id, "Remove of non-member")]
            elif prop["kind"] == "Update":
                if prop["body"]["member"] != committer:
                    return [AuthFailure(st.group_id, "Update for another member")]
        if validator is not None:
            reason = validator(body, committer, st.usernames())
            if reason:
                return [AuthFailure(st.group_id, reason)]

        new_members, added, removed = _apply_proposals(st.members, proposals)
        if self.username in removed:
            st.removed = True
            st.pending_commit = None
            return [RemovedFromGroup(st.group_id, committer)]

        commit_secret = None
        for entry in body["commit_secret_fanout"]:
            if entry["member"] != self.username:
                continue
            for secret in self.kem_secrets.values():
                try:
                    commit_secret = crypto.open_sealed(secret, from_hex(entry["sealed_hex"]))
                    break
                except DecryptError:
                    continue
            break
        if commit_secret is None:
            return [AuthFailure(st.group_id, "no usable commit secret for us in fanout")]

        # Merge.
        old_self = st.member(self.username)
        transcript = crypto.sha256(st.transcript_hash + body_bytes)
        st.prev_epoch_secret = st.epoch_secret
        st.epoch_secret = crypto.kdf(st.epoch_secret, "epoch", commit_secret + transcript)
        st.transcript_hash = transcript
        st.members = new_members
        st.epoch += 1
        st.uam_ctr = 0
        if st.pending_commit is not None and st.pending_commit.parent_epoch == parent_epoch:
            # Either our own commit just merged or we lost the race; both ways
            # the pending entry at this parent is obsolete (rebase re-creates).
            if committer == self.username:
                st.pending_commit = None
        new_self = st.member(self.username)
        if old_self is not None and new_self is not None and old_self.kem_pk != new_self.kem_pk:
            self.kem_secrets.pop(to_hex(old_self.kem_pk), None)

        events = []
        if added or removed:
            events.append(
                MembershipChange(st.group_id, added, removed, committer, st.epoch, envelope.seq)
            )
        for prop in proposals:
            if prop["kind"] == "OAM":
                events.append(
                    DecodedOAM(st.group_id, committer, from_hex(prop["body"]), st.epoch, envelope.seq)
                )
        events.extend(self._drain_future_uams(st))
        return events

    def _process_unordered(self, st: GroupCryptoState, envelope: Envelope) -> list:
        if st.frozen:
            return []
        if st.removed:
            return [DecryptFailed(st.group_id, "no longer a member")]
        try:
            aad = from_json_bytes(envelope.aad)
            epoch, ctr = int(aad["epoch"]), int(aad["ctr"])
            aad_sender = aad["sender"]
        except (ValueError, KeyError, TypeError):
            return [DecryptFailed(st.group_id, "malformed unordered aad")]
        if aad_sender != envelope.sender or aad.get("group_id") != st.group_id:
            return [AuthFailure(st.group_id, "aad does not match envelope header")]
        if epoch > st.epoch:
            # Sender is ahead of us; retry once the commit arrives.
            if len(st.future_uams) < MAX_BUFFERED_FUTURE_UAMS:
                st.future_uams.append(envelope)
                return []
            return [DecryptFailed(st.group_id, "future-epoch buffer full")]
        if epoch == st.epoch:
            secret = st.epoch_secret
        elif epoch == st.epoch - 1 and st.prev_epoch_secret is not None:
            secret = st.prev_epoch_secret
        else:
            return [DecryptFailed(st.group_id, f"message epoch {epoch} outside window")]
        sender = st.member(envelope.sender)
        if sender is None:
            return [AuthFailure(st.group_id, f"message from non-member {envelope.sender}")]
        key = _uam_key(secret, envelope.sender, ctr)
        try:
            payload = crypto.aead_decrypt(key, envelope.ct[:12], envelope.aad, envelope.ct[12:])
        except DecryptError:
            return [DecryptFailed(st.group_id, "unordered message failed authentication")]
        return [DecodedUAM(st.group_id, envelope.sender, payload, epoch)]

    def _drain_future_uams(self, st: GroupCryptoState) -> list:
        if not st.future_uams:
            return []
        buffered, st.future_uams = st.future_uams, []
        events = []
        for env in buffered:
            events.extend(self._process_unordered(st, env))
        return events

    # -- persistence ----------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "username": self.username,
            "sig_secret_hex": to_hex(self.sig_keypair.secret),
            "kem_secrets": {pk: to_hex(sk) for pk, sk in self.kem_secrets.items()},
            "key_packages": [kp.to_wire() for kp in self.key_packages],
            "groups": {gid: _group_to_dict(st) for gid, st in self.groups.items()},
        }

    @staticmethod
    def from_dict(obj: dict, rand: crypto.RandFn = os.urandom) -> "MessagingClient":
        client = MessagingClient.__new__(MessagingClient)
        client.username = obj["username"]
        client.rand = rand
        secret = from_hex(obj["sig_secret_hex"])
        client.sig_keypair = crypto.SigKeyPair(crypto.sig_public_key(secret), secret)
        client.kem_secrets = {pk: from_hex(sk) for pk, sk in obj["kem_secrets"].items()}
        client.key_packages = [KeyPackage.from_wire(kp) for kp in obj["key_packages"]]
        client.groups = {gid: _group_from_dict(g) for gid, g in obj["groups"].items()}
        return client


def _group_to_dict(st: GroupCryptoState) -> dict:
    return {
        "group_id": st.group_id,
        "epoch": st.epoch,
        "members": [m.to_wire() for m in st.members],
        "epoch_secret_hex": to_hex(st.epoch_secret),
        "transcript_hash_hex": to_hex(st.transcript_hash),
        "prev_epoch_secret_hex": to_hex(st.prev_epoch_secret) if st.prev_epoch_secret else None,
        "uam_ctr": st.uam_ctr,
        "frozen": st.frozen,
        "removed": st.removed,
        "future_uams": [e.to_wire() for e in st.future_uams],
    }


def _group_from_dict(obj: dict) -> GroupCryptoState:
    return GroupCryptoState(
        group_id=obj["group_id"],
        epoch=obj["epoch"],
        members=[Member.from_wire(m) for m in obj["members"]],
        epoch_secret=from_hex(obj["epoch_secret_hex"]),
        transcript_hash=from_hex(obj["transcript_hash_hex"]),
        prev_epoch_secret=from_hex(obj["prev_epoch_secret_hex"])
        if obj.get("prev_epoch_secret_hex")
        else None,
        uam_ctr=obj.get("uam_ctr", 0),
        frozen=obj.get("frozen", False),
        removed=obj.get("removed", False),
        future_uams=[Envelope.from_wire(e) for e in obj.get("future_uams", [])],
    )


def init_client(username: str, rand: crypto.RandFn = os.urandom):
    """Fresh client identity plus KeyPackages for directory upload."""
    client = MessagingClient(username, rand)
    return client, list(client.key_packages)
