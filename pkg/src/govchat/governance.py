"""Client-side governance state machine.

Replicated governance state (roles, permissions, group metadata, pending
proposals) evolves only through signed, ordered action messages, so every
client that replays the same ordered log from the same initial state ends
up with byte-identical canonical state. Content state (messages, reactions)
may diverge between clients without harming governance.

Every action is signed with the sender's governance key; that signature is
checked before RBAC or any policy runs, and is what makes messages
reportable later (the stored signature travels inside abuse reports).

Evaluation order is fixed: RBAC first; if the sender's roles do not permit
the action, the configured policies are consulted in order and the first
whose ``filter`` accepts governs the action (verdict passed / failed /
proposed).
"""

from __future__ import annotations

import math
import os
import unicodedata
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import crypto
from .canonical import canonical_bytes, from_hex, to_hex
from .errors import (
    DuplicateProposalError,
    EpochMismatchError,
    UnknownActionTypeError,
    UnknownMessageIdError,
    UnknownTargetError,
)

# Fixed action vocabulary.
ACTION_TYPES = (
    "SendText",
    "React",
    "RemoveMsg",
    "Report",
    "Escalate",
    "SetState",
    "ChangeName",
    "ChangeTopic",
    "DefRole",
    "SetUserRole",
    "KickUser",
    "InviteUser",
    "SetTextFilter",
    "PollStart",
    "PollVote",
    "PollEnd",
    "GovStateAnnouncement",
    "Accept",
)

# Actions that can only touch content state, never governance state.
CONTENT_ACTIONS = frozenset({"SendText", "React", "Report"})

# Transport routing: these ride unordered messages (votes and the join
# handshake deliberately avoid the ordered channel); everything else must be
# ordered because it can mutate replicated governance state.
UNORDERED_ROUTED = frozenset(
    {"SendText", "React", "Report", "Escalate", "PollVote", "GovStateAnnouncement", "Accept"}
)

DEFAULT_MEMBER_PERMISSIONS = ("Escalate", "PollStart", "PollVote", "React", "Report", "SendText")

# Resolves a username to its registered governance public key (or None);
# implementations must go through the authentication service directory.
DirectoryFn = Callable[[str], Optional[bytes]]


# ---------------------------------------------------------------------------
# Core data
# ---------------------------------------------------------------------------


@dataclass
class ActionMessage:
    """Signed, typed governance/content action."""

    sender: str
    action_id: str
    group_id: str
    community_id: str
    action_type: str
    payload: dict
    gov_sig: bytes

    def signed_bytes(self) -> bytes:
        return canonical_bytes(
            {
                "header": {
                    "sender": self.sender,
                    "action_id": self.action_id,
                    "group_id": self.group_id,
                    "community_id": self.community_id,
                },
                "action_type": self.action_type,
                "payload": self.payload,
            }
        )

    def to_wire(self) -> dict:
        return {
            "header": {
                "sender": self.sender,
                "action_id": self.action_id,
                "group_id": self.group_id,
                "community_id": self.community_id,
            },
            "action_type": self.action_type,
            "payload": self.payload,
            "gov_sig_hex": to_hex(self.gov_sig),
        }

    @staticmethod
    def from_wire(obj: dict) -> "ActionMessage":
        header = obj["header"]
        return ActionMessage(
            sender=header["sender"],
            action_id=header["action_id"],
            group_id=header["group_id"],
            community_id=header["community_id"],
            action_type=obj["action_type"],
            payload=obj["payload"],
            gov_sig=from_hex(obj["gov_sig_hex"]),
        )


@dataclass
class PendingProposal:
    proposal_id: str
    proposer: str
    action: dict  # wire form of the governed ActionMessage
    policy: str
    votes: dict  # username -> "yes" | "no", from merged batches only
    roster_snapshot: list
    created_at_epoch: int

    def to_wire(self) -> dict:
        return {
            "proposal_id": self.proposal_id,
            "proposer": self.proposer,
            "action": self.action,
            "policy": self.policy,
            "votes": dict(sorted(self.votes.items())),
            "roster_snapshot": list(self.roster_snapshot),
            "created_at_epoch": self.created_at_epoch,
        }

    @staticmethod
    def from_wire(obj: dict) -> "PendingProposal":
        return PendingProposal(
            proposal_id=obj["proposal_id"],
            proposer=obj["proposer"],
            action=obj["action"],
            policy=obj["policy"],
            votes=dict(obj["votes"]),
            roster_snapshot=list(obj["roster_snapshot"]),
            created_at_epoch=obj["created_at_epoch"],
        )


@dataclass
class GovernanceState:
    kv: dict
    roles: dict  # role name -> sorted list of permitted action types
    user_roles: dict  # username -> sorted list of role names
    pending: dict  # proposal_id -> PendingProposal
    version_epoch: int = 0

    def to_wire(self) -> dict:
        return {
            "kv": self.kv,
            "roles": {r: sorted(perms) for r, perms in self.roles.items()},
            "user_roles": {u: sorted(rs) for u, rs in self.user_roles.items()},
            "pending": {pid: p.to_wire() for pid, p in sorted(self.pending.items())},
            "version_epoch": self.version_epoch,
        }

    @staticmethod
    def from_wire(obj: dict) -> "GovernanceState":
        return GovernanceState(
            kv=dict(obj["kv"]),
            roles={r: sorted(p) for r, p in obj["roles"].items()},
            user_roles={u: sorted(r) for u, r in obj["user_roles"].items()},
            pending={pid: PendingProposal.from_wire(p) for pid, p in obj["pending"].items()},
            version_epoch=obj["version_epoch"],
        )


@dataclass
class StoredMessage:
    action: dict  # wire ActionMessage (carries the reporting signature)
    flagged: bool = False
    removed: bool = False

    def to_wire(self) -> dict:
        return {"action": self.action, "flagged": self.flagged, "removed": self.removed}

    @staticmethod
    def from_wire(obj: dict) -> "StoredMessage":
        return StoredMessage(obj["action"], obj["flagged"], obj["removed"])


@dataclass
class ContentState:
    messages: list = field(default_factory=list)
    reactions: list = field(default_factory=list)
    notices: list = field(default_factory=list)

    def seen(self, action_id: str) -> bool:
        return any(m.action["header"]["action_id"] == action_id for m in self.messages)

    def message_by_id(self, action_id: str) -> Optional[StoredMessage]:
        for m in self.messages:
            if m.action["header"]["action_id"] == action_id:
                return m
        return None

    def to_wire(self) -> dict:
        return {
            "messages": [m.to_wire() for m in self.messages],
            "reactions": list(self.reactions),
            "notices": list(self.notices),
        }

    @staticmethod
    def from_wire(obj: dict) -> "ContentState":
        return ContentState(
            messages=[StoredMessage.from_wire(m) for m in obj["messages"]],
            reactions=list(obj["reactions"]),
            notices=list(obj["notices"]),
        )


@dataclass
class Report:
    """A username, one or more signed action messages, and a reason."""

    reporter: str
    reported: str
    msgs: list  # wire-form ActionMessages with their signatures
    reason: str

    def to_wire(self) -> dict:
        return {
            "reporter": self.reporter,
            "reported": self.reported,
            "msgs": list(self.msgs),
            "reason": self.reason,
        }

    @staticmethod
    def from_wire(obj: dict) -> "Report":
        return Report(obj["reporter"], obj["reported"], list(obj["msgs"]), obj["reason"])


@dataclass
class Verdict:
    status: str  # "passed" | "failed" | "proposed"
    route: str  # "rbac" | "policy:<name>" | "none"
    reason: str = ""
    action_id: str = ""
    action_type: str = ""
    sender: str = ""
    effects: list = field(default_factory=list)  # e.g. [("kick", username)]


@dataclass
class EvalContext:
    """Facts the engine needs from outside governance state."""

    roster: list
    epoch: int
    directory: DirectoryFn = lambda username: None


# ---------------------------------------------------------------------------
# State construction and basic checks
# ---------------------------------------------------------------------------


def init_governance_state(creator: str, group_id: str, community_id: str) -> GovernanceState:
    return GovernanceState(
        kv={
            "name": group_id,
            "topic": "",
            "community_id": community_id,
            "guidelines": "",
            "word_filter": [],
        },
        roles={
            "admin": sorted(ACTION_TYPES),
            "member": sorted(DEFAULT_MEMBER_PERMISSIONS),
        },
        user_roles={creator: ["admin", "member"]},
        pending={},
        version_epoch=0,
    )


def rbac_check(user: str, action_type: str, gov: GovernanceState) -> bool:
    """True iff the action type is in the union of the user's role permissions."""
    allowed = set()
    for role in gov.user_roles.get(user, ()):
        allowed.update(gov.roles.get(role, ()))
    return action_type in allowed


def verify_action(action: ActionMessage, gov_pk: bytes) -> bool:
    return crypto.verify(gov_pk, action.signed_bytes(), action.gov_sig)


def state_hash(gov: GovernanceState) -> bytes:
    return crypto.sha256(canonical_bytes(gov.to_wire()))


class ActionFactory:
    """Builds signed ActionMessages for one sender."""

    def __init__(
        self,
        sender: str,
        gov_secret: bytes,
        community_id: str,
        rand: crypto.RandFn = os.urandom,
    ):
        self.sender = sender
        self.gov_secret = gov_secret
        self.community_id = community_id
        self.rand = rand
        self._counter = 0

    def build(self, group_id: str, action_type: str, payload: dict) -> ActionMessage:
        if action_type not in ACTION_TYPES:
            raise UnknownActionTypeError(action_type)
        self._counter += 1
        raw = self.sender.encode() + str(self._counter).encode() + self.rand(8)
        action = ActionMessage(
            sender=self.sender,
            action_id=crypto.sha256(raw).hex()[:32],
            group_id=group_id,
            community_id=self.community_id,
            action_type=action_type,
            payload=payload,
            gov_sig=b"",
        )
        action.gov_sig = crypto.sign(self.gov_secret, action.signed_bytes())
        return action


# ---------------------------------------------------------------------------
# Word filter
# ---------------------------------------------------------------------------


def text_matches_filter(text: str, words: list) -> bool:
    """Case-insensitive substring match on NFC-normalized text."""
    normalized = unicodedata.normalize("NFC", text).casefold()
    return any(
        unicodedata.normalize("NFC", w).casefold() in normalized for w in words if w
    )


# ---------------------------------------------------------------------------
# Policy engine
# ---------------------------------------------------------------------------


class GovernanceEngine:
    """Applies actions to (governance, content) state under RBAC + policies.

    Deterministic by construction: no clocks, no randomness; pending
    proposals are re-checked only on merged commits and explicit ticks.
    """

    def __init__(self, policies: list):
        self.policies = list(policies)

    # -- main entry points --------------------------------------------------

    def evaluate(
        self,
        action: ActionMessage,
        gov: GovernanceState,
        con: ContentState,
        ctx: EvalContext,
    ) -> Verdict:
        """RBAC gate first; otherwise the first policy whose filter accepts."""
        verdict = Verdict(
            status="failed",
            route="none",
            action_id=action.action_id,
            action_type=action.action_type,
            sender=action.sender,
        )
        if action.action_type not in ACTION_TYPES:
            verdict.reason = "unknown action type"
            return verdict
        if rbac_check(action.sender, action.action_type, gov):
            verdict.route = "rbac"
            try:
                verdict.effects = self.apply_action(action, gov, con, ctx)
                verdict.status = "passed"
            except (UnknownTargetError, DuplicateProposalError, UnknownActionTypeError) as exc:
                verdict.status = "failed"
                verdict.reason = f"{exc.code}: {exc}"
            return verdict
        for policy in self.policies:
            if not policy.filter(action, gov):
                continue
            verdict.route = f"policy:{policy.name}"
            try:
                pending = policy.init(action, gov, ctx)
            except DuplicateProposalError as exc:
                verdict.reason = f"{exc.code}: {exc}"
                return verdict
            status = policy.check(pending, gov)
            if status == "proposed":
                verdict.status = "proposed"
                verdict.reason = pending.proposal_id
            elif status == "passed":
                verdict.effects = policy.on_pass(pending, gov, con, ctx, self)
                verdict.status = "passed"
            else:
                policy.on_fail(pending, gov, con, ctx)
                verdict.status = "failed"
                verdict.reason = "policy check failed"
            return verdict
        verdict.reason = "not permitted and no policy governs this action"
        return verdict

    def tick(self, gov: GovernanceState, con: ContentState, ctx: EvalContext) -> list:
        """Re-check pending proposals; returns verdicts for any that resolved."""
        resolved = []
        for pid in sorted(gov.pending):
            pending = gov.pending.get(pid)
            if pending is None:
                continue
            policy = self._policy_named(pending.policy)
            if policy is None:
                continue
            status = policy.check(pending, gov)
            if status == "proposed":
                continue
            verdict = Verdict(
                status=status,
                route=f"policy:{pending.policy}",
                action_id=pid,
                action_type=pending.action.get("action_type", ""),
                sender=pending.proposer,
            )
            if status == "passed":
                verdict.effects = policy.on_pass(pending, gov, con, ctx, self)
            else:
                policy.on_fail(pending, gov, con, ctx)
            resolved.append(verdict)
        return resolved

    def _policy_named(self, name: str):
        for policy in self.policies:
            if policy.name == name:
                return policy
        return None

    # -- effects ---------------------------------------------------------------

    def apply_action(
        self,
        action: ActionMessage,
        gov: GovernanceState,
        con: ContentState,
        ctx: EvalContext,
    ) -> list:
        """Apply a passed action; returns side effects the caller must enact
        outside governance state (e.g. ("kick", user) -> messaging removal)."""
        t = action.action_type
        payload = action.payload
        effects = []
        if t == "ChangeName":
            gov.kv["name"] = str(payload["name"])
        elif t == "ChangeTopic":
            gov.kv["topic"] = str(payload["topic"])
        elif t == "SetState":
            gov.kv[str(payload["key"])] = payload["value"]
        elif t == "DefRole":
            perms = list(payload["permissions"])
            unknown = [p for p in perms if p not in ACTION_TYPES]
            if unknown:
                raise UnknownTargetError(f"unknown permissions {unknown}")
            gov.roles[str(payload["role"])] = sorted(set(perms))
        elif t == "SetUserRole":
            username = payload["username"]
            roles = list(payload["roles"])
            if username not in ctx.roster and username not in gov.user_roles:
                raise UnknownTargetError(f"unknown user {username}")
            missing = [r for r in roles if r not in gov.roles]
            if missing:
                raise UnknownTargetError(f"unknown roles {missing}")
            gov.user_roles[username] = sorted(set(roles))
        elif t == "KickUser":
            username = payload["username"]
            if username not in gov.user_roles and username not in ctx.roster:
                raise UnknownTargetError(f"unknown user {username}")
            gov.user_roles.pop(username, None)
            effects.append(("kick", username))
        elif t == "InviteUser":
            username = payload["username"]
            gov.user_roles.setdefault(username, ["member"])
            effects.append(("invite", username))
        elif t == "SetTextFilter":
            gov.kv["word_filter"] = [str(w) for w in payload["words"]]
        elif t == "SendText":
            if not con.seen(action.action_id):
                flagged = text_matches_filter(str(payload.get("text", "")), gov.kv.get("word_filter", []))
                con.messages.append(StoredMessage(action.to_wire(), flagged=flagged))
            return effects
        elif t in ("Report", "Escalate"):
            if not con.seen(action.action_id):
                con.messages.append(StoredMessage(action.to_wire()))
            return effects
        elif t == "React":
            entry = {
                "sender": action.sender,
                "target_id": str(payload.get("target_id", "")),
                "reaction": str(payload.get("reaction", "")),
                "action_id": action.action_id,
            }
            if entry not in con.reactions:
                con.reactions.append(entry)
            return effects
        elif t == "RemoveMsg":
            target = con.message_by_id(str(payload["target_id"]))
            if target is None:
                raise UnknownTargetError(f"unknown message {payload['target_id']}")
            target.removed = True
        elif t in ("PollStart", "PollVote", "PollEnd"):
            effects.extend(self._delegate_poll(action, gov, con, ctx))
        elif t in ("GovStateAnnouncement", "Accept"):
            # Join-handshake messages; handled by the client protocol layer.
            return effects
        else:
            raise UnknownActionTypeError(t)
        gov.version_epoch = ctx.epoch
        return effects

    def _delegate_poll(self, action, gov, con, ctx) -> list:
        vote = self._policy_named("vote")
        if vote is None:
            raise UnknownTargetError("no vote policy installed")
        if action.action_type == "PollStart":
            pending = vote.init_from_poll_start(action, gov, ctx)
            gov.version_epoch = ctx.epoch
            _ = pending
            return []
        if action.action_type == "PollVote":
            return vote.handle_batch(action, gov, con, ctx, self)
        return vote.handle_poll_end(action, gov, con, ctx, self)


# ---------------------------------------------------------------------------
# Announcements, accepts, reports
# ---------------------------------------------------------------------------


def announce_payload(gov: GovernanceState, epoch: int) -> dict:
    return {"gov": gov.to_wire(), "at_epoch": epoch}


def install_announced_state(payload: dict, join_epoch: int) -> GovernanceState:
    if int(payload["at_epoch"]) != join_epoch:
        raise EpochMismatchError(
            f"announcement at epoch {payload['at_epoch']}, joined at {join_epoch}"
        )
    return GovernanceState.from_wire(payload["gov"])


def accept_payload(gov: GovernanceState) -> dict:
    return {"gov_hash": state_hash(gov).hex()}


def check_accept(accept_action: ActionMessage, expected_hash: bytes) -> bool:
    return accept_action.payload.get("gov_hash") == expected_hash.hex()


def build_report(con: ContentState, reporter: str, message_ids: list, reason: str) -> Report:
    msgs = []
    reported = None
    for mid in message_ids:
        stored = con.message_by_id(mid)
        if stored is None:
            raise UnknownMessageIdError(mid)
        sender = stored.action["header"]["sender"]
        if reported is None:
            reported = sender
        elif reported != sender:
            raise UnknownMessageIdError(f"messages span multiple senders ({reported}, {sender})")
        msgs.append(stored.action)
    if not msgs:
        raise UnknownMessageIdError("no messages selected")
    return Report(reporter=reporter, reported=reported, msgs=msgs, reason=reason)


def verify_report(report: Report, directory: DirectoryFn) -> bool:
    """Every embedded message must verify under the reported user's registered
    governance key and must actually name the reported user as sender."""
    if not report.msgs:
        return False
    gov_pk = directory(report.reported)
    if gov_pk is None:
        return False
    for wire in report.msgs:
        try:
            action = ActionMessage.from_wire(wire)
        except (KeyError, ValueError, TypeError):
            return False
        if action.sender != report.reported:
            return False
        if not verify_action(action, gov_pk):
            return False
    return True


def majority_threshold(n: int, quorum: float = 0.5) -> int:
    """Smallest yes-count that settles a vote: strictly more than ``quorum``
    of the roster, clamped to [1, n]."""
    return max(1, min(n, math.floor(n * quorum) + 1))
