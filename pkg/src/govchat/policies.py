"""Built-in policies: majority voting with unordered-ballot batching, and the
word-filter installer.

The vote policy is the reference implementation of the policy template
(filter / init / check / pass / fail). Ballots travel as unordered messages
and are tallied locally; once a client observes a deciding set it batches
every observed ballot into a single ordered message. Each client re-verifies
every ballot signature in a merged batch and recomputes the tally
independently, so a forged or dropped ballot can change nothing: the
replicated outcome depends only on the valid ballots in the ordered
transcript, in any arrival order.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import DuplicateProposalError, UnknownTargetError
from .governance import (
    ActionMessage,
    ContentState,
    EvalContext,
    GovernanceEngine,
    GovernanceState,
    PendingProposal,
    majority_threshold,
    text_matches_filter,
    verify_action,
)

POLICY_ORDER = ("vote", "word_filter")


@dataclass(frozen=True)
class VotePolicyConfig:
    quorum: float = 0.5  # pass needs strictly more than this fraction of the roster
    governed_types: tuple = ("ChangeName",)

    def __post_init__(self):
        if not 0 < self.quorum <= 1:
            raise ValueError("quorum must be in (0, 1]")


def validate_ballot(wire: dict, proposal_id: str, snapshot: list, directory) -> tuple:
    """Returns (voter, choice) for a valid ballot, else None.

    Valid means: a PollVote for this proposal, yes/no choice, voter inside
    the roster snapshot, signature verifying under the voter's registered
    governance key.
    """
    try:
        ballot = ActionMessage.from_wire(wire)
    except (KeyError, ValueError, TypeError):
        return None
    if ballot.action_type != "PollVote":
        return None
    if ballot.payload.get("proposal_id") != proposal_id:
        return None
    choice = ballot.payload.get("choice")
    if choice not in ("yes", "no"):
        return None
    if ballot.sender not in snapshot:
        return None
    gov_pk = directory(ballot.sender)
    if gov_pk is None or not verify_action(ballot, gov_pk):
        return None
    return ballot.sender, choice


def tally(votes: dict, snapshot: list, quorum: float) -> str:
    """Outcome of a vote map: passed / failed / proposed.

    Counts at most one vote per snapshot member; abstentions simply never
    appear. Fails as soon as yes can no longer reach the threshold.
    """
    n = len(snapshot)
    threshold = majority_threshold(n, quorum)
    yes = sum(1 for voter, c in votes.items() if c == "yes" and voter in snapshot)
    no = sum(1 for voter, c in votes.items() if c == "no" and voter in snapshot)
    if yes >= threshold:
        return "passed"
    if no > n - threshold:
        return "failed"
    return "proposed"


class VotePolicy:
    """Majority voting over governance actions."""

    name = "vote"

    def __init__(self, config: VotePolicyConfig = None):
        self.config = config or VotePolicyConfig()

    def threshold(self, snapshot: list) -> int:
        return majority_threshold(len(snapshot), self.config.quorum)

    # -- policy template ------------------------------------------------------

    def filter(self, action: ActionMessage, gov: GovernanceState) -> bool:
        return action.action_type in self.config.governed_types or action.action_type in (
            "PollStart",
            "PollVote",
            "PollEnd",
        )

    def init(self, action: ActionMessage, gov: GovernanceState, ctx: EvalContext) -> PendingProposal:
        """Open a poll over a governed action that did not pass RBAC."""
        return self._open(action.action_id, action.sender, action.to_wire(), gov, ctx)

    def init_from_poll_start(
        self, action: ActionMessage, gov: GovernanceState, ctx: EvalContext
    ) -> PendingProposal:
        """Open a poll from an explicit PollStart carrying the target action."""
        target_wire = action.payload.get("action")
        if not isinstance(target_wire, dict):
            raise UnknownTargetError("PollStart carries no target action")
        try:
            target = ActionMessage.from_wire(target_wire)
        except (KeyError, ValueError, TypeError) as exc:
            raise UnknownTargetError(f"malformed target action: {exc}") from exc
        gov_pk = ctx.directory(target.sender)
        if gov_pk is None or not verify_action(target, gov_pk):
            raise UnknownTargetError("target action signature does not verify")
        return self._open(action.action_id, action.sender, target_wire, gov, ctx)

    def _open(self, proposal_id, proposer, target_wire, gov, ctx) -> PendingProposal:
        if proposal_id in gov.pending:
            raise DuplicateProposalError(proposal_id)
        pending = PendingProposal(
            proposal_id=proposal_id,
            proposer=proposer,
            action=target_wire,
            policy=self.name,
            votes={},
            roster_snapshot=list(ctx.roster),
            created_at_epoch=ctx.epoch,
        )
        gov.pending[proposal_id] = pending
        return pending

    def check(self, pending: PendingProposal, gov: GovernanceState) -> str:
        return tally(pending.votes, pending.roster_snapshot, self.config.quorum)

    def on_pass(self, pending, gov, con, ctx, engine: GovernanceEngine) -> list:
        gov.pending.pop(pending.proposal_id, None)
        gov.version_epoch = ctx.epoch
        try:
            target = ActionMessage.from_wire(pending.action)
            effects = engine.apply_action(target, gov, con, ctx)
        except (UnknownTargetError, KeyError, ValueError, TypeError) as exc:
            con.notices.append(f"vote {pending.proposal_id} passed but target failed: {exc}")
            return []
        con.notices.append(f"vote {pending.proposal_id} passed")
        return effects

    def on_fail(self, pending, gov, con, ctx) -> None:
        gov.pending.pop(pending.proposal_id, None)
        gov.version_epoch = ctx.epoch
        con.notices.append(f"vote {pending.proposal_id} failed")

    # -- ordered batch handling -------------------------------------------------

    def handle_batch(self, action, gov, con, ctx, engine) -> list:
        """Process an ordered PollVote batch: re-verify, re-tally, resolve."""
        pid = action.payload.get("proposal_id")
        pending = gov.pending.get(pid)
        if pending is None:
            return []  # poll already closed; merged batch is a no-op
        for wire in action.payload.get("ballots", []):
            valid = validate_ballot(wire, pid, pending.roster_snapshot, ctx.directory)
            if valid is None:
                continue
            voter, choice = valid
            if voter not in pending.votes:
                pending.votes[voter] = choice
        gov.version_epoch = ctx.epoch
        status = self.check(pending, gov)
        if status == "passed":
            return self.on_pass(pending, gov, con, ctx, engine)
        if status == "failed":
            self.on_fail(pending, gov, con, ctx)
        return []

    def handle_poll_end(self, action, gov, con, ctx, engine) -> list:
        """Force a poll to a final outcome from the merged votes."""
        pid = action.payload.get("proposal_id")
        pending = gov.pending.get(pid)
        if pending is None:
            raise UnknownTargetError(f"unknown proposal {pid}")
        if self.check(pending, gov) == "passed":
            return self.on_pass(pending, gov, con, ctx, engine)
        self.on_fail(pending, gov, con, ctx)
        return []


class BallotBox:
    """Client-local record of observed (unordered) ballots.

    Never part of replicated state: the replicated tally only changes when a
    batch lands in the ordered transcript.
    """

    def __init__(self):
        self.observed = {}  # proposal_id -> {voter: ballot wire}

    def observe(self, ballot: ActionMessage) -> None:
        pid = ballot.payload.get("proposal_id")
        if not pid or ballot.payload.get("choice") not in ("yes", "no"):
            return
        box = self.observed.setdefault(pid, {})
        box.setdefault(ballot.sender, ballot.to_wire())

    def valid_votes(self, pending: PendingProposal, directory) -> dict:
        votes = {}
        for voter, wire in self.observed.get(pending.proposal_id, {}).items():
            valid = validate_ballot(wire, pending.proposal_id, pending.roster_snapshot, directory)
            if valid is not None:
                votes[valid[0]] = valid[1]
        return votes

    def decision_ready(self, pending: PendingProposal, directory, quorum: float) -> bool:
        return tally(self.valid_votes(pending, directory), pending.roster_snapshot, quorum) != "proposed"

    def batch_payload(self, pending: PendingProposal) -> dict:
        ballots = [
            wire
            for voter, wire in sorted(self.observed.get(pending.proposal_id, {}).items())
        ]
        return {"proposal_id": pending.proposal_id, "ballots": ballots}

    def has_ballot(self, proposal_id: str, voter: str) -> bool:
        return voter in self.observed.get(proposal_id, {})

    def get_ballot(self, proposal_id: str, voter: str):
        return self.observed.get(proposal_id, {}).get(voter)

    def to_wire(self) -> dict:
        return {pid: dict(v) for pid, v in self.observed.items()}

    @staticmethod
    def from_wire(obj: dict) -> "BallotBox":
        box = BallotBox()
        box.observed = {pid: dict(v) for pid, v in obj.items()}
        return box


class WordFilterPolicy:
    """Installs and enforces the moderator-specified word filter.

    Enforcement rides the SendText apply path (flagged messages are stored
    but hidden); the policy is registered so the configured policy order
    stays ["vote", "word_filter"], but it never claims actions in the
    engine loop.
    """

    name = "word_filter"

    def filter(self, action: ActionMessage, gov: GovernanceState) -> bool:
        return False

    def init(self, action, gov, ctx):  # pragma: no cover - never governs
        raise UnknownTargetError("word_filter does not govern actions")

    def check(self, pending, gov) -> str:  # pragma: no cover - never governs
        return "failed"

    def on_pass(self, pending, gov, con, ctx, engine) -> list:  # pragma: no cover
        return []

    def on_fail(self, pending, gov, con, ctx) -> None:  # pragma: no cover
        return None

    @staticmethod
    def install(gov: GovernanceState, words: list) -> None:
        gov.kv["word_filter"] = [str(w) for w in words]

    @staticmethod
    def enforce(gov: GovernanceState, text: str) -> bool:
        return text_matches_filter(text, gov.kv.get("word_filter", []))


def default_policies(vote_config: VotePolicyConfig = None) -> list:
    return [VotePolicy(vote_config), WordFilterPolicy()]
