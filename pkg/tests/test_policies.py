"""Vote-policy tests: thresholds, batching, order independence, word filter."""

from __future__ import annotations

import itertools
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from govchat import crypto
from govchat.errors import DuplicateProposalError
from govchat.governance import (
    ActionFactory,
    ActionMessage,
    ContentState,
    EvalContext,
    GovernanceEngine,
    GovernanceState,
    init_governance_state,
    majority_threshold,
    state_hash,
)
from govchat.policies import (
    BallotBox,
    VotePolicy,
    VotePolicyConfig,
    WordFilterPolicy,
    default_policies,
    tally,
    validate_ballot,
)


def majority_oracle(n: int) -> int:
    """Independent majority threshold: smallest k with k > n/2."""
    k = 0
    while not k > n / 2:
        k += 1
    return k


class Voters:
    def __init__(self, names):
        self.names = list(names)
        self.keys = {n: crypto.generate_sig_keypair(crypto.DeterministicRand(f"v:{n}")) for n in self.names}
        self.factories = {
            n: ActionFactory(n, kp.secret, "c1", crypto.DeterministicRand(f"vf:{n}"))
            for n, kp in self.keys.items()
        }

    def directory(self, username):
        kp = self.keys.get(username)
        return kp.public if kp else None

    def ballot(self, voter, pid, choice):
        return self.factories[voter].build("g1", "PollVote", {"proposal_id": pid, "choice": choice})


def poll_setup(names=("u1", "u2", "u3", "u4", "u5")):
    voters = Voters(names)
    gov = init_governance_state(names[0], "g1", "c1")
    for n in names[1:]:
        gov.user_roles[n] = ["member"]
    con = ContentState()
    engine = GovernanceEngine(default_policies())
    ctx = EvalContext(list(names), epoch=1, directory=voters.directory)
    # u2 proposes a rename via the vote policy (fails RBAC, policy governs)
    target = voters.factories[names[1]].build("g1", "ChangeName", {"name": "Voted Name"})
    verdict = engine.evaluate(target, gov, con, ctx)
    assert verdict.status == "proposed"
    return voters, gov, con, engine, ctx, target.action_id


def test_filter_scope():
    policy = VotePolicy()
    voters = Voters(["u1"])
    gov = init_governance_state("u1", "g1", "c1")
    assert policy.filter(voters.factories["u1"].build("g1", "ChangeName", {"name": "x"}), gov)
    assert policy.filter(voters.ballot("u1", "p", "yes"), gov)
    assert not policy.filter(voters.factories["u1"].build("g1", "SendText", {"text": "x"}), gov)


@pytest.mark.parametrize("n", range(1, 11))
def test_threshold_matches_majority_oracle(n):
    assert majority_threshold(n) == majority_oracle(n) == math.ceil((n + 1) / 2)


def test_threshold_examples():
    assert majority_threshold(5) == 3
    assert majority_threshold(2) == 2
    assert majority_threshold(4) == 3  # even n: n/2 + 1


def test_duplicate_proposal_rejected():
    voters, gov, con, engine, ctx, pid = poll_setup()
    policy = VotePolicy()
    action = ActionMessage.from_wire(gov.pending[pid].action)
    with pytest.raises(DuplicateProposalError):
        policy.init(action, gov, ctx)


def test_ballot_box_dedup_and_snapshot_rules():
    voters, gov, con, engine, ctx, pid = poll_setup()
    outsider = Voters(["eve"])
    box = BallotBox()
    box.observe(voters.ballot("u1", pid, "yes"))
    box.observe(voters.ballot("u1", pid, "no"))  # second ballot ignored
    box.observe(outsider.ballot("eve", pid, "yes"))  # not in snapshot
    votes = box.valid_votes(gov.pending[pid], voters.directory)
    assert votes == {"u1": "yes"}


def test_batch_passes_with_three_of_five():
    voters, gov, con, engine, ctx, pid = poll_setup()
    box = BallotBox()
    for voter, choice in (("u1", "yes"), ("u2", "yes"), ("u3", "yes"), ("u4", "no")):
        box.observe(voters.ballot(voter, pid, choice))
    assert box.decision_ready(gov.pending[pid], voters.directory, 0.5)
    batch = voters.factories["u2"].build("g1", "PollVote", box.batch_payload(gov.pending[pid]))
    verdict = engine.evaluate(batch, gov, con, ctx)
    assert verdict.status == "passed"
    assert gov.kv["name"] == "Voted Name"
    assert pid not in gov.pending


def test_forged_ballot_dropped_and_outcome_recomputed():
    voters, gov, con, engine, ctx, pid = poll_setup()
    good = [voters.ballot("u1", pid, "yes"), voters.ballot("u2", pid, "yes")]
    forged = voters.ballot("u3", pid, "yes")
    forged_wire = forged.to_wire()
    forged_wire["payload"] = {"proposal_id": pid, "choice": "yes", "note": "altered"}
    batch = voters.factories["u2"].build(
        "g1", "PollVote", {"proposal_id": pid, "ballots": [b.to_wire() for b in good] + [forged_wire]}
    )
    verdict = engine.evaluate(batch, gov, con, ctx)
    # only 2 valid yes of 5: poll stays open, name unchanged
    assert pid in gov.pending
    assert gov.pending[pid].votes == {"u1": "yes", "u2": "yes"}
    assert gov.kv["name"] == "g1"


def test_all_no_fails_and_emits_notice():
    voters, gov, con, engine, ctx, pid = poll_setup()
    ballots = [voters.ballot(u, pid, "no") for u in ("u1", "u2", "u3")]
    batch = voters.factories["u1"].build(
        "g1", "PollVote", {"proposal_id": pid, "ballots": [b.to_wire() for b in ballots]}
    )
    verdict = engine.evaluate(batch, gov, con, ctx)
    assert pid not in gov.pending
    assert any("failed" in n for n in con.notices)
    assert gov.kv["name"] == "g1"


def test_partial_ballots_stay_proposed():
    voters, gov, con, engine, ctx, pid = poll_setup()
    batch = voters.factories["u1"].build(
        "g1", "PollVote", {"proposal_id": pid, "ballots": [voters.ballot("u1", pid, "yes").to_wire()]}
    )
    engine.evaluate(batch, gov, con, ctx)
    assert pid in gov.pending
    assert engine.tick(gov, con, ctx) == []


def test_poll_end_forces_resolution():
    voters, gov, con, engine, ctx, pid = poll_setup()
    batch = voters.factories["u1"].build(
        "g1", "PollVote", {"proposal_id": pid, "ballots": [voters.ballot("u1", pid, "yes").to_wire()]}
    )
    engine.evaluate(batch, gov, con, ctx)
    end = voters.factories["u1"].build("g1", "PollEnd", {"proposal_id": pid})
    verdict = engine.evaluate(end, gov, con, ctx)
    assert verdict.status == "passed"  # the PollEnd action itself applied
    assert pid not in gov.pending
    assert gov.kv["name"] == "g1"  # 1 yes of 5 => vote failed on close


def test_poll_start_opens_pending_for_target():
    voters, gov, con, engine, ctx, _ = poll_setup()
    target = voters.factories["u3"].build("g1", "ChangeTopic", {"topic": "new"})
    start = voters.factories["u3"].build("g1", "PollStart", {"action": target.to_wire()})
    verdict = engine.evaluate(start, gov, con, ctx)
    assert verdict.status == "passed"  # PollStart is member-permitted
    assert start.action_id in gov.pending
    assert gov.pending[start.action_id].action == target.to_wire()


def test_batch_for_closed_poll_is_noop():
    voters, gov, con, engine, ctx, pid = poll_setup()
    ballots = [voters.ballot(u, pid, "yes") for u in ("u1", "u2", "u3")]
    payload = {"proposal_id": pid, "ballots": [b.to_wire() for b in ballots]}
    engine.evaluate(voters.factories["u1"].build("g1", "PollVote", payload), gov, con, ctx)
    assert gov.kv["name"] == "Voted Name"
    h = state_hash(gov)
    engine.evaluate(voters.factories["u2"].build("g1", "PollVote", payload), gov, con, ctx)
    assert state_hash(gov) == h


def brute_force_outcome(assignment: dict, snapshot: list) -> str:
    """Enumeration oracle: count yes/no over the full assignment."""
    n = len(snapshot)
    t = majority_oracle(n)
    yes = sum(1 for v in assignment.values() if v == "yes")
    no = sum(1 for v in assignment.values() if v == "no")
    if yes >= t:
        return "passed"
    if no > n - t:
        return "failed"
    return "proposed"


@settings(max_examples=120, deadline=None)
@given(data=st.data())
def test_tally_matches_brute_force_oracle(data):
    n = data.draw(st.integers(1, 6))
    snapshot = [f"u{i}" for i in range(n)]
    assignment = {
        u: c
        for u in snapshot
        if (c := data.draw(st.sampled_from(["yes", "no", "abstain"]), label=u)) != "abstain"
    }
    assert tally(assignment, snapshot, 0.5) == brute_force_outcome(assignment, snapshot)


def test_tally_order_independent_over_all_permutations():
    snapshot = ["u1", "u2", "u3", "u4"]
    cast = [("u1", "yes"), ("u2", "no"), ("u3", "yes"), ("u4", "yes")]
    outcomes = set()
    for perm in itertools.permutations(cast):
        votes = {}
        for voter, choice in perm:
            votes.setdefault(voter, choice)
        outcomes.add(tally(votes, snapshot, 0.5))
    assert outcomes == {"passed"}


def test_no_double_counting():
    snapshot = ["u1", "u2", "u3"]
    votes = {"u1": "yes"}
    assert tally(votes, snapshot, 0.5) == "proposed"
    # the votes map structurally enforces one vote per member
    assert len(votes) <= len(snapshot)


def test_validate_ballot_rejects_wrong_poll_and_bad_choice():
    voters, gov, con, engine, ctx, pid = poll_setup()
    snapshot = gov.pending[pid].roster_snapshot
    other = voters.ballot("u1", "other-poll", "yes")
    assert validate_ballot(other.to_wire(), pid, snapshot, voters.directory) is None
    weird = voters.factories["u1"].build("g1", "PollVote", {"proposal_id": pid, "choice": "maybe"})
    assert validate_ballot(weird.to_wire(), pid, snapshot, voters.directory) is None
    good = voters.ballot("u1", pid, "yes")
    assert validate_ballot(good.to_wire(), pid, snapshot, voters.directory) == ("u1", "yes")


def test_vote_policy_config_validation():
    with pytest.raises(ValueError):
        VotePolicyConfig(quorum=0)
    with pytest.raises(ValueError):
        VotePolicyConfig(quorum=1.5)
    assert VotePolicy(VotePolicyConfig(quorum=0.75)).threshold(["a", "b", "c", "d"]) == 4


def test_word_filter_install_and_enforce():
    gov = init_governance_state("alice", "g1", "c1")
    WordFilterPolicy.install(gov, ["darn"])
    assert WordFilterPolicy.enforce(gov, "DARN it")
    assert not WordFilterPolicy.enforce(gov, "dar n")
    WordFilterPolicy.install(gov, [])
    assert not WordFilterPolicy.enforce(gov, "darn it")
