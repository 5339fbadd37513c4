"""The user-facing client: multi-group state, sync pipeline, persistence.

One ``Client`` owns the messaging state, a governance engine, and the glue
between them:

- outgoing governance actions are pre-flighted against a copy of local
  state (so doomed actions are never sent), then committed through the
  ordered channel with conflict rebase + exponential backoff; the actual
  state mutation happens when the commit comes back merged, through the
  exact same code path every other member runs;
- incoming ordered commits must justify their membership proposals with a
  passing InviteUser / KickUser action in the same commit;
- ballots are observed locally and batched into one ordered message once a
  deciding set is seen; a voter whose ballot is missing from a merged
  batch re-broadcasts it and may batch it themselves;
- joiners buffer traffic until the inviter's state announcement arrives,
  then broadcast an Accept carrying the governance state hash, which every
  member checks against the hash they recorded when the Add merged.

Persistence is one JSON file per group plus an index, written atomically
after every processed envelope, so a killed client replays the ordered log
from its last acknowledged sequence number and converges to the same
state. Unordered envelopes are staged in an on-disk inbox before
processing, because the delivery service drains its queues exactly once.
"""

from __future__ import annotations

import json
import logging
import os
import time
import urllib.parse
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import crypto, governance as gov_mod, messaging as msg_mod
from .canonical import canonical_bytes, from_json_bytes, to_hex
from .errors import (
    EpochMismatchError,
    GovchatError,
    NotFoundError,
    UnknownActionTypeError,
    UnknownGroupError,
)
from .governance import (
    ActionFactory,
    ActionMessage,
    ContentState,
    EvalContext,
    GovernanceEngine,
    GovernanceState,
    Verdict,
    accept_payload,
    announce_payload,
    build_report,
    check_accept,
    init_governance_state,
    install_announced_state,
    state_hash,
    verify_action,
)
from .moderation import MODERATION_USERNAME
from .policies import BallotBox, VotePolicy, default_policies, tally, validate_ballot

logger = logging.getLogger(__name__)

ANNOUNCEMENT_TIMEOUT_ENVELOPES = 30


@dataclass
class Alert:
    kind: str
    group_id: str
    data: dict

    def to_wire(self) -> dict:
        return {"kind": self.kind, "group_id": self.group_id, "data": self.data}


@dataclass
class GroupRuntime:
    """Everything the client tracks for one group besides crypto state."""

    group_id: str
    gov: Optional[GovernanceState]
    con: ContentState
    last_acked: int = -1
    ballot_box: BallotBox = field(default_factory=BallotBox)
    quarantined: set = field(default_factory=set)
    expected_accepts: dict = field(default_factory=dict)  # joiner -> {hash_hex, inviter}
    awaiting: Optional[dict] = None  # {"join_epoch", "buffered", "count", "alerted"}
    pending_welcomes: list = field(default_factory=list)  # [{"joiner", "welcome"}]
    alerts: list = field(default_factory=list)
    audit: list = field(default_factory=list)  # replayable verdict trail
    accepted: bool = True  # False while we have not sent our Accept yet


class Client:
    """Single-writer per group; the owner serializes all calls."""

    def __init__(
        self,
        username: str,
        transport,
        *,
        data_dir: Optional[str] = None,
        rand: crypto.RandFn = os.urandom,
        community_id: Optional[str] = None,
        vote_policy: Optional[VotePolicy] = None,
        sleeper: Callable[[float], None] = time.sleep,
        escalation_handler: Optional[Callable[[str, dict], None]] = None,
    ):
        self.transport = transport
        self.data_dir = data_dir
        self.rand = rand
        self.sleeper = sleeper
        self.escalation_handler = escalation_handler
        self.community_id = community_id or "default"
        self.runtimes: dict = {}
        self.commit_retries = 0
        self.events: deque = deque(maxlen=2000)
        self._event_seq = 0
        self._subscribers: list = []
        self._dir_cache: dict = {}
        self._backoff = msg_mod.BackoffPolicy()
        policies = default_policies()
        if vote_policy is not None:
            policies[0] = vote_policy
        self.engine = GovernanceEngine(policies)
        self.vote_policy = policies[0]

        if data_dir and os.path.exists(os.path.join(data_dir, "index.json")):
            self._load(data_dir)
        else:
            self.msg, _ = msg_mod.init_client(username, rand)
            self.gov_keypair = crypto.generate_sig_keypair(rand)
            self.inbox: list = []
            if data_dir:
                os.makedirs(os.path.join(data_dir, "groups"), exist_ok=True)
                self._persist_index()
        self.username = self.msg.username
        self.factory = ActionFactory(
            self.username, self.gov_keypair.secret, self.community_id, rand
        )

    # ------------------------------------------------------------------
    # registration and directory
    # ------------------------------------------------------------------

    def register(self) -> dict:
        resp = self.transport.as_register(
            self.username, to_hex(self.msg.sig_keypair.public), to_hex(self.gov_keypair.public)
        )
        self.transport.ds_publish_kp(
            self.username, [kp.to_wire() for kp in self.msg.key_packages]
        )
        return resp

    def _lookup(self, username: str) -> Optional[dict]:
        if username in self._dir_cache:
            return self._dir_cache[username]
        try:
            entry = self.transport.as_lookup(username)
        except NotFoundError:
            entry = None
        self._dir_cache[username] = entry
        return entry

    def _directory(self, username: str) -> Optional[bytes]:
        entry = self._lookup(username)
        if entry is None:
            return None
        return bytes.fromhex(entry["gov_pk_hex"])

    # ------------------------------------------------------------------
    # group lifecycle
    # ------------------------------------------------------------------

    def create_group(self, group_id: str) -> dict:
        self.msg.create_group(group_id)
        rt = GroupRuntime(
            group_id=group_id,
            gov=init_governance_state(self.username, group_id, self.community_id),
            con=ContentState(),
        )
        self.runtimes[group_id] = rt
        self._persist(group_id)
        self._emit("group_created", group_id, {"epoch": 0})
        return {"group_id": group_id, "epoch": 0}

    def runtime(self, group_id: str) -> GroupRuntime:
        rt = self.runtimes.get(group_id)
        if rt is None:
            raise UnknownGroupError(group_id)
        return rt

    def groups(self) -> list:
        out = []
        for gid, rt in sorted(self.runtimes.items()):
            try:
                epoch = self.msg.get_epoch(gid)
            except UnknownGroupError:
                epoch = None
            out.append(
                {
                    "group_id": gid,
                    "name": rt.gov.kv.get("name") if rt.gov else None,
                    "epoch": epoch,
                    "awaiting_state": rt.awaiting is not None,
                }
            )
        return out

    # ------------------------------------------------------------------
    # commands (CLI and control API both land here)
    # ------------------------------------------------------------------

    def perform(self, group_id: str, action_type: str, payload: dict) -> dict:
        """Single dispatch point for every governance/content command."""
        handlers = {
            "SendText": lambda: self.send_text(group_id, payload["text"]),
            "React": lambda: self.react(group_id, payload["target_id"], payload["reaction"]),
            "RemoveMsg": lambda: self._ordered_action(group_id, "RemoveMsg", payload),
            "ChangeName": lambda: self.rename(group_id, payload["name"]),
            "ChangeTopic": lambda: self._ordered_action(group_id, "ChangeTopic", payload),
            "SetState": lambda: self._ordered_action(group_id, "SetState", payload),
            "DefRole": lambda: self._ordered_action(group_id, "DefRole", payload),
            "SetUserRole": lambda: self._ordered_action(group_id, "SetUserRole", payload),
            "SetTextFilter": lambda: self._ordered_action(group_id, "SetTextFilter", payload),
            "KickUser": lambda: self.kick(group_id, payload["username"]),
            "InviteUser": lambda: self.invite(group_id, payload["username"]),
            "PollStart": lambda: self.poll_start(
                group_id, payload["action_type"], payload["payload"]
            ),
            "PollVote": lambda: self.vote(group_id, payload["proposal_id"], payload["choice"]),
            "PollEnd": lambda: self._ordered_action(group_id, "PollEnd", payload),
            "Report": lambda: self.report(
                group_id,
                payload["message_ids"],
                payload.get("reason", ""),
                to_group=payload.get("to_group"),
            ),
            "Escalate": lambda: self.escalate(
                group_id, payload["message_ids"], payload.get("reason", "")
            ),
        }
        handler = handlers.get(action_type)
        if handler is None:
            raise UnknownActionTypeError(action_type)
        return handler()

    def send_text(self, group_id: str, text: str) -> dict:
        return self._content_action(group_id, "SendText", {"text": text})

    def react(self, group_id: str, target_id: str, reaction: str) -> dict:
        return self._content_action(group_id, "React", {"target_id": target_id, "reaction": reaction})

    def rename(self, group_id: str, name: str) -> dict:
        return self._ordered_action(group_id, "ChangeName", {"name": name})

    def invite(self, group_id: str, username: str) -> dict:
        rt = self.runtime(group_id)
        action = self.factory.build(group_id, "InviteUser", {"username": username})
        verdict = self._preflight(rt, action)
        if verdict.status != "passed":
            return self._verdict_wire(verdict)
        kp = msg_mod.KeyPackage.from_wire(self.transport.ds_fetch_kp(username))
        oam = {"kind": "OAM", "body": to_hex(canonical_bytes(action.to_wire()))}
        envelope, welcomes = self.msg.add_user(group_id, kp, extra_proposals=[oam])
        rt.pending_welcomes = [{"joiner": username, "welcome": w.to_wire()} for w in welcomes]
        self._submit_commit(group_id, envelope)
        return self._verdict_wire(verdict)

    def kick(self, group_id: str, username: str) -> dict:
        rt = self.runtime(group_id)
        action = self.factory.build(group_id, "KickUser", {"username": username})
        verdict = self._preflight(rt, action)
        oam = {"kind": "OAM", "body": to_hex(canonical_bytes(action.to_wire()))}
        if verdict.status == "passed":
            envelope = self.msg.remove_user(group_id, username, extra_proposals=[oam])
            self._submit_commit(group_id, envelope)
        elif verdict.status == "proposed":
            envelope = self.msg.send_commit(group_id, [oam])
            self._submit_commit(group_id, envelope)
        return self._verdict_wire(verdict)

    def poll_start(self, group_id: str, action_type: str, payload: dict) -> dict:
        target = self.factory.build(group_id, action_type, payload)
        start = self.factory.build(group_id, "PollStart", {"action": target.to_wire()})
        verdict = self._send_prepared_ordered(group_id, start)
        out = self._verdict_wire(verdict)
        out["proposal_id"] = start.action_id
        return out

    def vote(self, group_id: str, proposal_id: str, choice: str) -> dict:
        rt = self.runtime(group_id)
        ballot = self.factory.build(
            group_id, "PollVote", {"proposal_id": proposal_id, "choice": choice}
        )
        verdict = self._preflight(rt, ballot)
        if verdict.status == "failed":
            return self._verdict_wire(verdict)
        rt.ballot_box.observe(ballot)
        env = self.msg.send_uam(group_id, canonical_bytes(ballot.to_wire()))
        self.transport.ds_send_unordered(self.username, {"group": group_id}, env.to_wire())
        self._persist(group_id)
        self._maybe_batch(group_id, proposal_id)
        return {"verdict": "passed", "route": "vote-cast", "proposal_id": proposal_id}

    def report(self, group_id: str, message_ids: list, reason: str, to_group: str = None) -> dict:
        rt = self.runtime(group_id)
        report = build_report(rt.con, self.username, message_ids, reason)
        target_gid = to_group or group_id
        action = self.factory.build(target_gid, "Report", {"report": report.to_wire()})
        return self._content_action(target_gid, "Report", action.payload, prebuilt=action)

    def escalate(self, group_id: str, message_ids: list, reason: str) -> dict:
        """Send a report to the platform moderator in a dedicated 2-member group.

        Selecting a received Report forwards it as-is (the moderator
        escalation path); selecting ordinary messages builds a fresh report
        from them.
        """
        rt = self.runtime(group_id)
        first = rt.con.message_by_id(message_ids[0]) if message_ids else None
        if first is not None and first.action.get("action_type") == "Report":
            report = gov_mod.Report.from_wire(first.action["payload"]["report"])
        else:
            report = build_report(rt.con, self.username, message_ids, reason)
        ms_gid = f"ms:{self.username}"
        if ms_gid not in self.runtimes:
            self.create_group(ms_gid)
            invited = self.invite(ms_gid, MODERATION_USERNAME)
            if invited["verdict"] != "passed":
                return invited
        action = self.factory.build(ms_gid, "Escalate", {"report": report.to_wire()})
        return self._content_action(ms_gid, "Escalate", action.payload, prebuilt=action)

    def announce(self, group_id: str) -> dict:
        """Re-broadcast the governance state announcement (idempotent)."""
        rt = self.runtime(group_id)
        action = self.factory.build(
            group_id,
            "GovStateAnnouncement",
            self._announcement_payload(rt, self.msg.get_epoch(group_id)),
        )
        env = self.msg.send_uam(group_id, canonical_bytes(action.to_wire()))
        self.transport.ds_send_unordered(self.username, {"group": group_id}, env.to_wire())
        return {"verdict": "passed", "route": "announce"}

    def _announcement_payload(self, rt: GroupRuntime, epoch: int) -> dict:
        return announce_payload(rt.gov, epoch)

    def update_keys(self, group_id: str) -> dict:
        envelope = self.msg.update_user(group_id)
        self._submit_commit(group_id, envelope)
        return {"verdict": "passed", "route": "rekey"}

    # ------------------------------------------------------------------
    # action plumbing
    # ------------------------------------------------------------------

    def _verdict_wire(self, verdict: Verdict) -> dict:
        return {
            "verdict": verdict.status,
            "route": verdict.route,
            "reason": verdict.reason,
            "action_id": verdict.action_id,
        }

    def _preflight(self, rt: GroupRuntime, action: ActionMessage) -> Verdict:
        """Evaluate against throwaway copies: what WILL the group decide?"""
        gov_copy = GovernanceState.from_wire(rt.gov.to_wire())
        con_copy = ContentState.from_wire(rt.con.to_wire())
        ctx = self._ctx(rt.group_id)
        return self.engine.evaluate(action, gov_copy, con_copy, ctx)

    def _ctx(self, group_id: str) -> EvalContext:
        st = self.msg.group(group_id)
        return EvalContext(roster=st.usernames(), epoch=st.epoch, directory=self._directory)

    def _content_action(self, group_id, action_type, payload, prebuilt=None) -> dict:
        rt = self.runtime(group_id)
        action = prebuilt or self.factory.build(group_id, action_type, payload)
        ctx = self._ctx(group_id)
        verdict = self.engine.evaluate(action, rt.gov, rt.con, ctx)
        if verdict.status == "passed":
            env = self.msg.send_uam(group_id, canonical_bytes(action.to_wire()))
            self.transport.ds_send_unordered(self.username, {"group": group_id}, env.to_wire())
            self._record_audit(rt, verdict)
            self._emit("message", group_id, {"action": action.to_wire(), "verdict": verdict.status})
        self._persist(group_id)
        return self._verdict_wire(verdict)

    def _ordered_action(self, group_id: str, action_type: str, payload: dict) -> dict:
        action = self.factory.build(group_id, action_type, payload)
        verdict = self._send_prepared_ordered(group_id, action)
        return self._verdict_wire(verdict)

    def _send_prepared_ordered(self, group_id: str, action: ActionMessage) -> Verdict:
        rt = self.runtime(group_id)
        verdict = self._preflight(rt, action)
        if verdict.status == "failed":
            return verdict
        oam = {"kind": "OAM", "body": to_hex(canonical_bytes(action.to_wire()))}
        envelope = self.msg.send_commit(group_id, [oam])
        self._submit_commit(group_id, envelope)
        return verdict

    def _submit_commit(self, group_id: str, envelope: msg_mod.Envelope) -> None:
        """Send an ordered commit, rebasing on conflicts with backoff."""
        rt = self.runtime(group_id)
        retry = 0
        while True:
            resp = self.transport.ds_send_ordered(
                self.username, group_id, envelope.to_wire(), rt.last_acked
            )
            for entry in resp.get("backlog", []):
                self._pipeline_ordered(group_id, entry)
            if resp["status"] == "accepted":
                accepted = msg_mod.Envelope.from_wire(envelope.to_wire())
                accepted.seq = resp["seq"]
                self._pipeline_ordered(group_id, accepted.to_wire())
                return
            retry += 1
            self.commit_retries += 1
            jitter = int.from_bytes(self.rand(2), "big") / 65536.0
            self.sleeper(self._backoff.delay_ms(retry, jitter) / 1000.0)
            _events, envelope = self.msg.rebase_pending(group_id, [])
            pending = self.msg.group(group_id).pending_commit
            if rt.pending_welcomes and pending is not None:
                joiners = [w["joiner"] for w in rt.pending_welcomes]
                rt.pending_welcomes = [
                    {"joiner": j, "welcome": w.to_wire()}
                    for j, w in zip(joiners, pending.welcomes)
                ]

    # ------------------------------------------------------------------
    # sync pipeline
    # ------------------------------------------------------------------

    def sync(self) -> list:
        """One synchronous pull+process pass; returns emitted events."""
        self._dir_cache = {}
        start_seq = self._event_seq
        acked = {gid: rt.last_acked for gid, rt in self.runtimes.items() if rt.awaiting is None}
        resp = self.transport.ds_sync(self.username, acked)
        # Stage unordered envelopes before touching them: the DS has already
        # forgotten these, so they must survive a crash.
        if resp.get("unordered"):
            self.inbox.extend(resp["unordered"])
            self._persist_index()
        for group_id in sorted(resp.get("ordered", {})):
            if group_id in self.runtimes and self.runtimes[group_id].awaiting is not None:
                self._count_awaiting(self.runtimes[group_id], len(resp["ordered"][group_id]))
                continue
            for entry in resp["ordered"][group_id]:
                self._pipeline_ordered(group_id, entry)
        while self.inbox:
            entry = self.inbox[0]
            try:
                self._pipeline_unordered(entry)
            finally:
                self.inbox.pop(0)
                self._persist_index()
        return [e for e in self.events if e["id"] > start_seq]

    def tick(self, group_id: Optional[str] = None) -> list:
        """Deterministic re-check trigger (pending polls, join timeouts).

        Also the moment any voter (not just the proposer) batch-commits a
        poll their locally observed ballots already decide.
        """
        verdicts = []
        for gid, rt in list(self.runtimes.items()):
            if group_id is not None and gid != group_id:
                continue
            if rt.awaiting is not None:
                self._alert_missing_announcement(rt)
                continue
            ctx = self._ctx(gid)
            for verdict in self.engine.tick(rt.gov, rt.con, ctx):
                verdicts.append(verdict)
                self._record_audit(rt, verdict)
            for pending in list(rt.gov.pending.values()):
                self._batch_now(rt, pending)
            self._persist(gid)
        return verdicts

    # -- ordered ---------------------------------------------------------------

    def _pipeline_ordered(self, group_id: str, entry: dict) -> None:
        rt = self.runtimes.get(group_id)
        if rt is None:
            return
        seq = entry.get("seq")
        if seq is not None and seq <= rt.last_acked:
            return  # already merged (idempotent replay)
        envelope = msg_mod.Envelope.from_wire(entry)
        events = self.msg.process_incoming(envelope, validator=self._commit_validator(group_id))
        membership = None
        for event in events:
            if isinstance(event, msg_mod.MembershipChange):
                membership = event
                self._emit(
                    "membership",
                    group_id,
                    {"added": event.added, "removed": event.removed, "epoch": event.epoch},
                )
            elif isinstance(event, msg_mod.DecodedOAM):
                self._handle_ordered_action(rt, event)
            elif isinstance(event, msg_mod.DecodedUAM):
                self._handle_uam_action(rt, event)
            elif isinstance(event, msg_mod.ForkDetected):
                self._alert(rt, "ForkDetected", {"reason": event.reason, "seq": event.seq})
            elif isinstance(event, msg_mod.RemovedFromGroup):
                self._alert(rt, "RemovedFromGroup", {"by": event.by})
            elif isinstance(event, (msg_mod.AuthFailure, msg_mod.DecryptFailed)):
                self._emit("rejected", group_id, {"reason": event.reason})
        if membership is not None:
            self._after_membership_change(rt, membership)
        if any(isinstance(e, (msg_mod.MembershipChange, msg_mod.DecodedOAM)) for e in events):
            ctx = self._ctx(group_id)
            for verdict in self.engine.tick(rt.gov, rt.con, ctx):
                self._record_audit(rt, verdict)
            self._emit("epoch_advanced", group_id, {"epoch": ctx.epoch})
        if seq is not None:
            rt.last_acked = seq
        self._persist(group_id)

    def _after_membership_change(self, rt: GroupRuntime, event: msg_mod.MembershipChange) -> None:
        post_hash = state_hash(rt.gov).hex()
        for joiner in event.added:
            if joiner == self.username:
                continue
            rt.expected_accepts[joiner] = {"hash_hex": post_hash, "inviter": event.committer}
        if event.committer == self.username and event.added:
            for item in rt.pending_welcomes:
                self.transport.ds_welcome(self.username, item["joiner"], item["welcome"])
            rt.pending_welcomes = []
            action = self.factory.build(
                rt.group_id,
                "GovStateAnnouncement",
                self._announcement_payload(rt, self.msg.get_epoch(rt.group_id)),
            )
            env = self.msg.send_uam(rt.group_id, canonical_bytes(action.to_wire()))
            self.transport.ds_send_unordered(
                self.username, {"group": rt.group_id}, env.to_wire()
            )

    def _handle_ordered_action(self, rt: GroupRuntime, event: msg_mod.DecodedOAM) -> None:
        action = self._parse_verified_action(rt, event.payload, expected_sender=event.committer)
        if action is None:
            return
        if action.action_type == "PollVote":
            self._check_vote_suppression(rt, action)
        ctx = self._ctx(rt.group_id)
        before = state_hash(rt.gov)
        verdict = self.engine.evaluate(action, rt.gov, rt.con, ctx)
        self._record_audit(rt, verdict)
        after = state_hash(rt.gov)
        self._emit(
            "action",
            rt.group_id,
            {
                "action": action.to_wire(),
                "verdict": verdict.status,
                "route": verdict.route,
                "epoch": event.epoch,
            },
        )
        if after != before:
            self._emit("gov_changed", rt.group_id, {"hash_hex": after.hex()})
        if verdict.status == "proposed":
            self._emit("poll_opened", rt.group_id, {"proposal_id": verdict.reason})
            self._maybe_batch(rt.group_id, verdict.reason)
        if action.action_type in ("PollVote", "PollEnd"):
            pid = action.payload.get("proposal_id")
            if pid and rt.gov.pending.get(pid) is None:
                self._emit("poll_resolved", rt.group_id, {"proposal_id": pid})

    def _parse_verified_action(
        self, rt: GroupRuntime, payload: bytes, expected_sender: Optional[str]
    ) -> Optional[ActionMessage]:
        try:
            action = ActionMessage.from_wire(from_json_bytes(payload))
        except (ValueError, KeyError, TypeError):
            self._emit("rejected", rt.group_id, {"reason": "unparseable action"})
            return None
        if expected_sender is not None and action.sender != expected_sender:
            self._emit("rejected", rt.group_id, {"reason": "action sender != envelope sender"})
            return None
        entry = self._lookup(action.sender)
        if entry is None:
            self._emit("rejected", rt.group_id, {"reason": f"unknown signer {action.sender}"})
            return None
        if entry.get("revoked"):
            self._emit("rejected", rt.group_id, {"reason": f"revoked signer {action.sender}"})
            return None
        if not verify_action(action, bytes.fromhex(entry["gov_pk_hex"])):
            self._emit("rejected", rt.group_id, {"reason": "bad governance signature"})
            return None
        if action.sender in rt.quarantined:
            self._emit("rejected", rt.group_id, {"reason": f"quarantined {action.sender}"})
            return None
        return action

    def _commit_validator(self, group_id: str):
        """Membership proposals must be justified by a passing action in the
        same commit (InviteUser for Add, KickUser for Remove)."""

        def validate(body: dict, committer: str, roster: list) -> Optional[str]:
            rt = self.runtimes.get(group_id)
            if rt is None or rt.gov is None:
                return None
            adds, removes, actions = [], [], []
            for prop in body["proposals"]:
                if prop["kind"] == "Add":
                    adds.append(prop["body"]["key_package"]["username"])
                elif prop["kind"] == "Remove":
                    removes.append(prop["body"]["username"])
                elif prop["kind"] == "OAM":
                    try:
                        actions.append(ActionMessage.from_wire(from_json_bytes(bytes.fromhex(prop["body"]))))
                    except (ValueError, KeyError, TypeError):
                        continue
            for username in adds:
                if not self._membership_justified(rt, committer, actions, "InviteUser", username):
                    return f"unjustified Add of {username}"
            for username in removes:
                if not self._membership_justified(rt, committer, actions, "KickUser", username):
                    return f"unjustified Remove of {username}"
            return None

        return validate

    def _membership_justified(
        self, rt: GroupRuntime, committer: str, actions: list, action_type: str, username: str
    ) -> bool:
        for action in actions:
            if action.action_type == action_type and action.payload.get("username") == username:
                if action.sender != committer:
                    continue
                gov_pk = self._directory(action.sender)
                if gov_pk is None or not verify_action(action, gov_pk):
                    continue
                if gov_mod.rbac_check(action.sender, action_type, rt.gov):
                    return True
            if action.action_type == "PollVote" and action.sender == committer:
                # A batch that passes a vote on this membership action.
                pid = action.payload.get("proposal_id")
                pending = rt.gov.pending.get(pid)
                if pending is None:
                    continue
                target = pending.action
                if (
                    target.get("action_type") != action_type
                    or target.get("payload", {}).get("username") != username
                ):
                    continue
                votes = dict(pending.votes)
                for wire in action.payload.get("ballots", []):
                    valid = validate_ballot(wire, pid, pending.roster_snapshot, self._directory)
                    if valid is not None and valid[0] not in votes:
                        votes[valid[0]] = valid[1]
                if tally(votes, pending.roster_snapshot, self.vote_policy.config.quorum) == "passed":
                    return True
        return False

    # -- unordered -------------------------------------------------------------

    def _pipeline_unordered(self, entry: dict) -> None:
        envelope = msg_mod.Envelope.from_wire(entry)
        if envelope.channel == msg_mod.CHANNEL_WELCOME:
            self._handle_welcome(envelope)
            return
        rt = self.runtimes.get(envelope.group_id)
        if rt is None:
            return
        if rt.awaiting is not None:
            events = self.msg.process_incoming(envelope)
            announced = False
            for event in events:
                if isinstance(event, msg_mod.DecodedUAM):
                    announced = self._try_install_announcement(rt, event) or announced
                    if not announced:
                        rt.awaiting["buffered"].append(
                            {"sender": event.sender, "payload_hex": event.payload.hex(), "epoch": event.epoch}
                        )
            if not announced:
                self._count_awaiting(rt, 1)
            self._persist(rt.group_id)
            return
        events = self.msg.process_incoming(envelope)
        for event in events:
            if isinstance(event, msg_mod.DecodedUAM):
                self._handle_uam_action(rt, event)
            elif isinstance(event, (msg_mod.AuthFailure, msg_mod.DecryptFailed)):
                self._emit("rejected", rt.group_id, {"reason": event.reason})
        self._persist(rt.group_id)

    def _handle_welcome(self, envelope: msg_mod.Envelope) -> None:
        if envelope.group_id in self.runtimes:
            return  # duplicate welcome
        try:
            st = self.msg.join_group(envelope)
        except GovchatError as exc:
            self._emit("rejected", envelope.group_id, {"reason": f"welcome: {exc.code}"})
            return
        rt = GroupRuntime(
            group_id=st.group_id,
            gov=None,
            con=ContentState(),
            last_acked=st.epoch - 1,
            awaiting={"join_epoch": st.epoch, "buffered": [], "count": 0, "alerted": False},
            accepted=False,
        )
        self.runtimes[st.group_id] = rt
        self._persist_index()
        self._persist(st.group_id)
        self._emit("group_joined", st.group_id, {"epoch": st.epoch, "awaiting_state": True})

    def _try_install_announcement(self, rt: GroupRuntime, event: msg_mod.DecodedUAM) -> bool:
        action = self._parse_verified_action(rt, event.payload, expected_sender=event.sender)
        if action is None or action.action_type != "GovStateAnnouncement":
            return False
        join_epoch = rt.awaiting["join_epoch"]
        try:
            gov = install_announced_state(action.payload, join_epoch)
        except (EpochMismatchError, KeyError, ValueError, TypeError):
            return False
        rt.gov = gov
        buffered = rt.awaiting["buffered"]
        rt.awaiting = None
        rt.accepted = True
        accept = self.factory.build(rt.group_id, "Accept", accept_payload(rt.gov))
        env = self.msg.send_uam(rt.group_id, canonical_bytes(accept.to_wire()))
        self.transport.ds_send_unordered(self.username, {"group": rt.group_id}, env.to_wire())
        self._emit("accept_sent", rt.group_id, {"gov_hash": accept.payload["gov_hash"]})
        for item in buffered:
            self._handle_uam_action(
                rt,
                msg_mod.DecodedUAM(
                    rt.group_id, item["sender"], bytes.fromhex(item["payload_hex"]), item["epoch"]
                ),
            )
        self._persist(rt.group_id)
        return True

    def _count_awaiting(self, rt: GroupRuntime, n: int) -> None:
        rt.awaiting["count"] += n
        self._alert_missing_announcement(rt)

    def _alert_missing_announcement(self, rt: GroupRuntime) -> None:
        if rt.awaiting and rt.awaiting["count"] >= ANNOUNCEMENT_TIMEOUT_ENVELOPES and not rt.awaiting["alerted"]:
            rt.awaiting["alerted"] = True
            self._alert(rt, "MissingAnnouncement", {"join_epoch": rt.awaiting["join_epoch"]})

    def _handle_uam_action(self, rt: GroupRuntime, event: msg_mod.DecodedUAM) -> None:
        action = self._parse_verified_action(rt, event.payload, expected_sender=event.sender)
        if action is None:
            return
        kind = action.action_type
        if kind == "GovStateAnnouncement":
            return  # members already hold the state; only joiners consume these
        if kind == "Accept":
            self._handle_accept(rt, action)
            return
        if kind == "PollVote":
            rt.ballot_box.observe(action)
            self._emit(
                "ballot",
                rt.group_id,
                {"proposal_id": action.payload.get("proposal_id"), "voter": action.sender},
            )
            self._maybe_batch(rt.group_id, action.payload.get("proposal_id"))
            return
        ctx = self._ctx(rt.group_id)
        verdict = self.engine.evaluate(action, rt.gov, rt.con, ctx)
        self._record_audit(rt, verdict)
        self._emit(
            "message",
            rt.group_id,
            {"action": action.to_wire(), "verdict": verdict.status},
        )
        if kind == "Report" and verdict.status == "passed":
            self._emit("report_received", rt.group_id, {"action_id": action.action_id})
        if kind == "Escalate" and verdict.status == "passed" and self.escalation_handler:
            self.escalation_handler(action.sender, action.payload)

    def _handle_accept(self, rt: GroupRuntime, action: ActionMessage) -> None:
        expected = rt.expected_accepts.pop(action.sender, None)
        if expected is None:
            return  # duplicate or unsolicited Accept: idempotent
        if check_accept(action, bytes.fromhex(expected["hash_hex"])):
            self._emit("member_accepted", rt.group_id, {"username": action.sender})
            return
        rt.quarantined.add(action.sender)
        self._alert(
            rt,
            "InvalidInitialState",
            {"joiner": action.sender, "inviter": expected["inviter"]},
        )

    # -- voting glue ---------------------------------------------------------------

    def _maybe_batch(self, group_id: str, proposal_id: Optional[str]) -> None:
        if not proposal_id:
            return
        rt = self.runtime(group_id)
        if rt.gov is None:
            return
        pending = rt.gov.pending.get(proposal_id)
        if pending is None:
            return
        if pending.proposer != self.username:
            return
        self._batch_now(rt, pending)

    def _batch_now(self, rt: GroupRuntime, pending) -> bool:
        valid = rt.ballot_box.valid_votes(pending, self._directory)
        merged = {**pending.votes, **valid}
        if tally(merged, pending.roster_snapshot, self.vote_policy.config.quorum) == "proposed":
            return False
        if self.msg.group(rt.group_id).pending_commit is not None:
            return False  # a commit of ours is already in flight; retry on next sync
        payload = rt.ballot_box.batch_payload(pending)
        action = self.factory.build(rt.group_id, "PollVote", payload)
        proposals = [{"kind": "OAM", "body": to_hex(canonical_bytes(action.to_wire()))}]
        # If the decided vote kicks a member, membership must change in the
        # same commit to keep roster and roles in lockstep.
        target = pending.action
        if (
            tally(merged, pending.roster_snapshot, self.vote_policy.config.quorum) == "passed"
            and target.get("action_type") == "KickUser"
        ):
            kicked = target.get("payload", {}).get("username")
            if kicked and self.msg.group(rt.group_id).member(kicked) is not None:
                proposals.insert(0, {"kind": "Remove", "body": {"username": kicked}})
        envelope = self.msg.send_commit(rt.group_id, proposals)
        self._submit_commit(rt.group_id, envelope)
        self._emit("batch_committed", rt.group_id, {"proposal_id": pending.proposal_id})
        return True

    def _check_vote_suppression(self, rt: GroupRuntime, batch: ActionMessage) -> None:
        """If our cast ballot is missing from a merged batch, resend it and
        batch it ourselves while the poll is still open."""
        pid = batch.payload.get("proposal_id")
        if not pid or batch.sender == self.username:
            return
        mine = rt.ballot_box.get_ballot(pid, self.username)
        if mine is None:
            return
        included = any(
            w.get("header", {}).get("sender") == self.username
            for w in batch.payload.get("ballots", [])
        )
        if included:
            return
        self._alert(rt, "VoteSuppressionSuspected", {"proposal_id": pid, "batcher": batch.sender})
        env = self.msg.send_uam(rt.group_id, canonical_bytes(ActionMessage.from_wire(mine).to_wire()))
        self.transport.ds_send_unordered(self.username, {"group": rt.group_id}, env.to_wire())
        pending = rt.gov.pending.get(pid)
        if pending is not None:
            self._batch_now(rt, pending)

    # ------------------------------------------------------------------
    # status, alerts, events
    # ------------------------------------------------------------------

    def status(self, group_id: str) -> dict:
        rt = self.runtime(group_id)
        st = self.msg.group(group_id)
        return {
            "group_id": group_id,
            "epoch": st.epoch,
            "roster": st.usernames(),
            "frozen": st.frozen,
            "awaiting_state": rt.awaiting is not None,
            "name": rt.gov.kv.get("name") if rt.gov else None,
            "topic": rt.gov.kv.get("topic") if rt.gov else None,
            "kv": dict(rt.gov.kv) if rt.gov else {},
            "roles": {r: list(p) for r, p in rt.gov.roles.items()} if rt.gov else {},
            "user_roles": {u: list(r) for u, r in rt.gov.user_roles.items()} if rt.gov else {},
            "pending_polls": [p.to_wire() for p in rt.gov.pending.values()] if rt.gov else [],
            "alerts": [a.to_wire() for a in rt.alerts],
            "gov_hash_hex": state_hash(rt.gov).hex() if rt.gov else None,
            "last_acked": rt.last_acked,
        }

    def messages(self, group_id: str) -> list:
        rt = self.runtime(group_id)
        out = []
        for m in rt.con.messages:
            wire = m.to_wire()
            wire["hidden"] = m.flagged or m.removed
            out.append(wire)
        return out

    def alerts(self) -> list:
        out = []
        for rt in self.runtimes.values():
            out.extend(a.to_wire() for a in rt.alerts)
        return out

    def governance_hash(self, group_id: str) -> str:
        rt = self.runtime(group_id)
        return state_hash(rt.gov).hex() if rt.gov else ""

    def subscribe(self, callback: Callable[[dict], None]) -> None:
        self._subscribers.append(callback)

    def unsubscribe(self, callback: Callable[[dict], None]) -> None:
        if callback in self._subscribers:
            self._subscribers.remove(callback)

    def events_since(self, event_id: int) -> list:
        return [e for e in self.events if e["id"] > event_id]

    def _emit(self, kind: str, group_id: str, data: dict) -> None:
        self._event_seq += 1
        event = {"id": self._event_seq, "kind": kind, "group_id": group_id, "data": data}
        self.events.append(event)
        for callback in list(self._subscribers):
            try:
                callback(event)
            except Exception:  # subscriber trouble must not break the pipeline
                logger.exception("event subscriber failed")

    def _alert(self, rt: GroupRuntime, kind: str, data: dict) -> None:
        rt.alerts.append(Alert(kind, rt.group_id, data))
        self._emit("alert", rt.group_id, {"kind": kind, **data})

    def _record_audit(self, rt: GroupRuntime, verdict: Verdict) -> None:
        rt.audit.append(
            {
                "action_id": verdict.action_id,
                "action_type": verdict.action_type,
                "sender": verdict.sender,
                "status": verdict.status,
                "route": verdict.route,
                "gov_hash_hex": state_hash(rt.gov).hex() if rt.gov else "",
            }
        )

    # ------------------------------------------------------------------
    # persistence
    # ------------------------------------------------------------------

    def _group_path(self, group_id: str) -> str:
        return os.path.join(self.data_dir, "groups", urllib.parse.quote(group_id, safe="") + ".json")

    def _persist_index(self) -> None:
        if not self.data_dir:
            return
        os.makedirs(os.path.join(self.data_dir, "groups"), exist_ok=True)
        index = {
            "username": self.msg.username,
            "community_id": self.community_id,
            "gov_secret_hex": to_hex(self.gov_keypair.secret),
            "messaging": self.msg.to_dict(),
            "inbox": list(self.inbox),
        }
        _atomic_write(os.path.join(self.data_dir, "index.json"), index)

    def _persist(self, group_id: str) -> None:
        if not self.data_dir:
            return
        rt = self.runtimes.get(group_id)
        if rt is None:
            return
        blob = {
            "group_id": group_id,
            "crypto": msg_mod._group_to_dict(self.msg.group(group_id)),
            "gov": rt.gov.to_wire() if rt.gov else None,
            "con": rt.con.to_wire(),
            "last_acked": rt.last_acked,
            "ballot_box": rt.ballot_box.to_wire(),
            "quarantined": sorted(rt.quarantined),
            "expected_accepts": rt.expected_accepts,
            "awaiting": rt.awaiting,
            "pending_welcomes": rt.pending_welcomes,
            "alerts": [a.to_wire() for a in rt.alerts],
            "audit": rt.audit,
            "accepted": rt.accepted,
        }
        _atomic_write(self._group_path(group_id), blob)
        self._persist_index()

    def _load(self, data_dir: str) -> None:
        with open(os.path.join(data_dir, "index.json"), "r", encoding="utf-8") as fh:
            index = json.load(fh)
        self.msg = msg_mod.MessagingClient.from_dict(index["messaging"], self.rand)
        secret = bytes.fromhex(index["gov_secret_hex"])
        self.gov_keypair = crypto.SigKeyPair(crypto.sig_public_key(secret), secret)
        self.community_id = index["community_id"]
        self.inbox = list(index.get("inbox", []))
        groups_dir = os.path.join(data_dir, "groups")
        for filename in sorted(os.listdir(groups_dir)) if os.path.isdir(groups_dir) else []:
            with open(os.path.join(groups_dir, filename), "r", encoding="utf-8") as fh:
                blob = json.load(fh)
            gid = blob["group_id"]
            self.msg.groups[gid] = msg_mod._group_from_dict(blob["crypto"])
            rt = GroupRuntime(
                group_id=gid,
                gov=GovernanceState.from_wire(blob["gov"]) if blob["gov"] else None,
                con=ContentState.from_wire(blob["con"]),
                last_acked=blob["last_acked"],
                ballot_box=BallotBox.from_wire(blob["ballot_box"]),
                quarantined=set(blob["quarantined"]),
                expected_accepts=dict(blob["expected_accepts"]),
                awaiting=blob["awaiting"],
                pending_welcomes=list(blob["pending_welcomes"]),
                alerts=[Alert(a["kind"], a["group_id"], a["data"]) for a in blob["alerts"]],
                audit=list(blob["audit"]),
                accepted=blob.get("accepted", True),
            )
            self.runtimes[gid] = rt


def _atomic_write(path: str, obj: dict) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
    os.replace(tmp, path)


class LocalTransport:
    """Direct in-process calls against service objects.

    Counts canonical request/response bytes per user so harnesses measure
    the same wire traffic a socket transport would carry.
    """

    def __init__(self, ds, auth):
        self.ds = ds
        self.auth = auth
        self.traffic_bytes: dict = {}

    def _count(self, user: str, *objs) -> None:
        total = sum(len(canonical_bytes(o)) for o in objs)
        self.traffic_bytes[user] = self.traffic_bytes.get(user, 0) + total

    def as_register(self, username, sig_pk_hex, gov_pk_hex):
        resp = self.auth.register(username, sig_pk_hex, gov_pk_hex)
        self._count(username, {"username": username, "sig_pk_hex": sig_pk_hex, "gov_pk_hex": gov_pk_hex}, resp)
        return resp

    def as_lookup(self, username):
        return self.auth.lookup(username)

    def as_revoke(self, body, sig_hex):
        return self.auth.revoke(body, sig_hex)

    def ds_send_ordered(self, sender, group_id, env_wire, last_acked):
        resp = self.ds.handle_send_ordered(sender, group_id, env_wire, last_acked)
        self._count(sender, {"op": "send_ordered", "body": env_wire}, resp)
        return resp

    def ds_send_unordered(self, sender, recipients, env_wire):
        resp = self.ds.handle_send_unordered(sender, recipients, env_wire)
        self._count(sender, {"op": "send_unordered", "recipients": recipients, "body": env_wire}, resp)
        return resp

    def ds_sync(self, user, last_acked):
        resp = self.ds.handle_sync(user, last_acked)
        self._count(user, {"op": "sync", "last_acked": last_acked}, resp)
        return resp

    def ds_publish_kp(self, user, packages):
        resp = self.ds.publish_key_packages(user, packages)
        self._count(user, {"op": "publish_kp", "packages": packages}, resp)
        return resp

    def ds_fetch_kp(self, username):
        return self.ds.fetch_key_package(username)

    def ds_welcome(self, sender, recipient, env_wire):
        resp = self.ds.relay_welcome(sender, recipient, env_wire)
        self._count(sender, {"op": "welcome", "recipient": recipient, "body": env_wire}, resp)
        return resp

    def ds_ban(self, body, sig_hex):
        return self.ds.apply_ban(body, sig_hex)
