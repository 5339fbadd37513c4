"""Messaging-layer tests: epochs, commits, welcomes, forks, removal secrecy."""

from __future__ import annotations

import pytest

from govchat import messaging as msg
from govchat.crypto import DeterministicRand
from govchat.errors import (
    AlreadyMemberError,
    BadKeyPackageError,
    DecryptError,
    DuplicateGroupError,
    NotAMemberError,
    PendingCommitInFlightError,
    RetriesExhaustedError,
    UnknownGroupError,
    UsernameError,
)


class Sequencer:
    """Minimal stand-in for the DS ordered log: one commit per parent epoch."""

    def __init__(self):
        self.logs = {}
        self.parents = {}

    def accept(self, env: msg.Envelope) -> msg.Envelope:
        import json

        parent = json.loads(env.aad.decode())["parent_epoch"]
        used = self.parents.setdefault(env.group_id, set())
        if parent in used:
            raise AssertionError(f"conflicting commit for parent {parent}")
        used.add(parent)
        log = self.logs.setdefault(env.group_id, [])
        env.seq = len(log)
        log.append(env)
        return env


def make_client(name: str) -> msg.MessagingClient:
    client, _ = msg.init_client(name, DeterministicRand(f"seed:{name}"))
    return client


def two_member_group(gid="g1"):
    """alice creates gid and adds bob; both fully merged."""
    seq = Sequencer()
    alice, bob = make_client("alice"), make_client("bob")
    alice.create_group(gid)
    commit, welcomes = alice.add_user(gid, bob.key_packages[0])
    seq.accept(commit)
    alice.process_incoming(commit)
    bob.process_incoming(welcomes[0])
    return seq, alice, bob


def test_init_client_produces_self_verifying_key_packages():
    client, packages = msg.init_client("alice", DeterministicRand("a"))
    assert client.groups == {}
    assert len(packages) == 10
    assert all(kp.verify() for kp in packages)
    assert len({kp.kem_pk for kp in packages}) == 10


def test_init_client_deterministic_under_seed():
    c1, _ = msg.init_client("alice", DeterministicRand("same"))
    c2, _ = msg.init_client("alice", DeterministicRand("same"))
    assert c1.sig_keypair.public == c2.sig_keypair.public


def test_init_client_rejects_bad_usernames():
    with pytest.raises(UsernameError):
        msg.init_client("")
    with pytest.raises(UsernameError):
        msg.init_client("x" * 65)


def test_create_group_initial_state():
    alice = make_client("alice")
    st = alice.create_group("g1")
    assert st.epoch == 0
    assert st.usernames() == ["alice"]
    with pytest.raises(DuplicateGroupError):
        alice.create_group("g1")
    st2 = alice.create_group("g2")
    assert st.transcript_hash != st2.transcript_hash


def test_get_epoch():
    alice = make_client("alice")
    alice.create_group("g1")
    assert alice.get_epoch("g1") == 0
    with pytest.raises(UnknownGroupError):
        alice.get_epoch("nope")


def test_uam_roundtrip():
    _, alice, bob = two_member_group()
    env = alice.send_uam("g1", b"hi")
    events = bob.process_incoming(env)
    assert events == [msg.DecodedUAM("g1", "alice", b"hi", 1)]


def test_uam_from_previous_epoch_still_decrypts():
    seq, alice, bob = two_member_group()
    late = alice.send_uam("g1", b"sent before the commit")
    commit = alice.send_oam("g1", b"rename")
    seq.accept(commit)
    alice.process_incoming(commit)
    bob.process_incoming(commit)
    events = bob.process_incoming(late)
    assert events == [msg.DecodedUAM("g1", "alice", b"sent before the commit", 1)]


def test_uam_from_future_epoch_buffered_until_merge():
    seq, alice, bob = two_member_group()
    commit = alice.send_oam("g1", b"x")
    seq.accept(commit)
    alice.process_incoming(commit)
    ahead = alice.send_uam("g1", b"already at epoch 2")
    assert bob.process_incoming(ahead) == []
    events = bob.process_incoming(commit)
    kinds = [type(e) for e in events]
    assert kinds == [msg.DecodedOAM, msg.DecodedUAM]
    assert events[1].payload == b"already at epoch 2"


def test_send_oam_requires_resolution_before_next():
    _, alice, _ = two_member_group()
    alice.send_oam("g1", b"one")
    with pytest.raises(PendingCommitInFlightError):
        alice.send_oam("g1", b"two")


def test_oam_merge_advances_epoch_and_transcript():
    seq, alice, bob = two_member_group()
    before = alice.group("g1").transcript_hash
    commit = alice.send_oam("g1", b"rename:X")
    seq.accept(commit)
    alice.process_incoming(commit)
    events = bob.process_incoming(commit)
    assert [type(e) for e in events] == [msg.DecodedOAM]
    assert events[0].payload == b"rename:X"
    assert alice.get_epoch("g1") == bob.get_epoch("g1") == 2
    assert alice.group("g1").transcript_hash != before


def test_convergence_byte_identical_state():
    seq, alice, bob = two_member_group()
    for payload in (b"a", b"b", b"c"):
        commit = alice.send_oam("g1", payload)
        seq.accept(commit)
        alice.process_incoming(commit)
        bob.process_incoming(commit)
    a, b = alice.group("g1"), bob.group("g1")
    assert (a.epoch, a.transcript_hash) == (b.epoch, b.transcript_hash)
    assert [m.to_wire() for m in a.members] == [m.to_wire() for m in b.members]
    assert a.epoch_secret == b.epoch_secret


def test_add_user_and_welcome_against_post_merge_state():
    seq, alice, bob = two_member_group()
    carol = make_client("carol")
    commit, welcomes = alice.add_user("g1", carol.key_packages[0])
    seq.accept(commit)
    alice.process_incoming(commit)
    bob.process_incoming(commit)
    events = carol.process_incoming(welcomes[0])
    assert events == [msg.GroupJoined("g1", 2)]
    assert carol.group("g1").transcript_hash == alice.group("g1").transcript_hash
    assert carol.group("g1").epoch_secret == alice.group("g1").epoch_secret
    assert alice.group("g1").usernames() == ["alice", "bob", "carol"]


def test_add_existing_member_rejected():
    _, alice, bob = two_member_group()
    with pytest.raises(AlreadyMemberError):
        alice.add_user("g1", bob.key_packages[1])


def test_add_tampered_key_package_rejected():
    alice = make_client("alice")
    bob = make_client("bob")
    alice.create_group("g1")
    kp = bob.key_packages[0]
    forged = msg.KeyPackage(kp.username, kp.sig_pk, kp.kem_pk, b"\x00" * 64)
    with pytest.raises(BadKeyPackageError):
        alice.add_user("g1", forged)


def test_remove_user_and_removal_secrecy():
    seq, alice, bob = two_member_group()
    carol = make_client("carol")
    commit, welcomes = alice.add_user("g1", carol.key_packages[0])
    seq.accept(commit)
    for c in (alice, bob):
        c.process_incoming(commit)
    carol.process_incoming(welcomes[0])

    removal = alice.remove_user("g1", "bob")
    seq.accept(removal)
    alice.process_incoming(removal)
    carol.process_incoming(removal)
    events = bob.process_incoming(removal)
    assert events == [msg.RemovedFromGroup("g1", "alice")]
    assert alice.group("g1").usernames() == ["alice", "carol"]

    # bob cannot read anything from the post-removal epoch
    env = alice.send_uam("g1", b"secret plans")
    bob_events = bob.process_incoming(env)
    assert [type(e) for e in bob_events] == [msg.DecryptFailed]
    assert carol.process_incoming(env) == [msg.DecodedUAM("g1", "alice", b"secret plans", 3)]
    with pytest.raises(NotAMemberError):
        bob.send_uam("g1", b"let me back in")


def test_remove_non_member_rejected():
    _, alice, _ = two_member_group()
    with pytest.raises(NotAMemberError):
        alice.remove_user("g1", "zelda")


def test_stale_commit_from_removed_member_detected():
    seq, alice, bob = two_member_group()
    stale = bob.send_oam("g1", b"i am still here")  # parent epoch 1
    removal = alice.remove_user("g1", "bob")
    seq.accept(removal)
    alice.process_incoming(removal)
    # Delivered out-of-band after the removal merged: rejected outright.
    # The membership check fires before the parent check, so a removed
    # member cannot freeze the group with stale commits.
    events = alice.process_incoming(stale)
    assert [type(e) for e in events] == [msg.AuthFailure]
    assert not alice.group("g1").frozen
    assert alice.get_epoch("g1") == 2


def test_update_user_rotates_kem_key():
    seq, alice, bob = two_member_group()
    old_pk = alice.group("g1").member("alice").kem_pk
    old_secret = alice.kem_secrets[old_pk.hex()]
    commit = alice.update_user("g1")
    seq.accept(commit)
    alice.process_incoming(commit)
    bob.process_incoming(commit)
    assert alice.get_epoch("g1") == 2
    assert alice.group("g1").usernames() == ["alice", "bob"]
    new_pk = alice.group("g1").member("alice").kem_pk
    assert new_pk != old_pk
    assert bob.group("g1").member("alice").kem_pk == new_pk
    # material sealed to the retired key is no longer openable
    from govchat import crypto

    blob = crypto.seal(old_pk, b"for the old key")
    assert old_pk.hex() not in alice.kem_secrets
    with pytest.raises(DecryptError):
        crypto.open_sealed(alice.kem_secrets[new_pk.hex()], blob)
    assert crypto.open_sealed(old_secret, blob) == b"for the old key"


def test_fork_detected_on_conflicting_parent():
    seq, alice, bob = two_member_group()
    # Two commits built on the same parent; a forked DS delivers one to each.
    a_commit = alice.send_oam("g1", b"from A")
    b_commit = bob.send_oam("g1", b"from B")
    alice.process_incoming(a_commit)  # alice merges her own
    events = alice.process_incoming(b_commit)  # cross-delivery
    assert [type(e) for e in events] == [msg.ForkDetected]
    assert alice.group("g1").frozen
    import govchat.errors as errors

    with pytest.raises(errors.GroupFrozenError):
        alice.send_uam("g1", b"after freeze")


def test_fork_detected_on_transcript_divergence():
    seq, alice, bob = two_member_group()
    a_commit = alice.send_oam("g1", b"A wins on side A")
    b_commit = bob.send_oam("g1", b"B wins on side B")
    alice.process_incoming(a_commit)
    bob.process_incoming(b_commit)
    # Both now claim epoch 2 with different histories. A follow-up commit from
    # bob's side has a matching parent epoch but an undecryptable body.
    b_next = bob.send_oam("g1", b"building on B history")
    events = alice.process_incoming(b_next)
    assert [type(e) for e in events] == [msg.ForkDetected]
    assert "divergence" in events[0].reason


def test_commit_from_non_member_rejected_without_freeze():
    seq, alice, bob = two_member_group()
    mallory = make_client("mallory")
    mallory.create_group("g1")  # her own unrelated group with the same id
    forged = mallory.send_oam("g1", b"imposter commit")
    events = alice.process_incoming(forged)
    assert [type(e) for e in events] == [msg.AuthFailure]
    assert not alice.group("g1").frozen
    assert alice.get_epoch("g1") == 1


def test_commit_with_wrong_signature_rejected():
    seq, alice, bob = two_member_group()
    commit = bob.send_oam("g1", b"fine payload")
    # Flip a ciphertext bit: decryption fails, which reads as divergence.
    tampered = msg.Envelope(
        commit.channel, commit.group_id, commit.sender, commit.seq, commit.aad,
        commit.ct[:-1] + bytes([commit.ct[-1] ^ 1]),
    )
    events = alice.process_incoming(tampered)
    assert [type(e) for e in events] == [msg.ForkDetected]


def test_join_group_rejects_tampering_and_wrong_recipient():
    alice = make_client("alice")
    bob = make_client("bob")
    eve = make_client("eve")
    alice.create_group("g1")
    _, welcomes = alice.add_user("g1", bob.key_packages[0])
    welcome = welcomes[0]
    bad = msg.Envelope(
        welcome.channel, welcome.group_id, welcome.sender, None, welcome.aad,
        welcome.ct[:-1] + bytes([welcome.ct[-1] ^ 1]),
    )
    with pytest.raises(DecryptError):
        bob.join_group(bad)
    with pytest.raises(DecryptError):
        eve.join_group(welcome)
    bob.join_group(welcome)
    assert bob.get_epoch("g1") == 1


def test_rebase_pending_reissues_on_new_epoch():
    seq, alice, bob = two_member_group()
    a_commit = alice.send_oam("g1", b"rename:A")
    b_commit = bob.send_oam("g1", b"rename:B")
    seq.accept(a_commit)  # alice wins the race
    alice.process_incoming(a_commit)
    events, new_commit = bob.rebase_pending("g1", [a_commit])
    assert any(isinstance(e, msg.DecodedOAM) for e in events)
    seq.accept(new_commit)
    bob.process_incoming(new_commit)
    final = alice.process_incoming(new_commit)
    assert final[0].payload == b"rename:B"  # OAM payload bytes preserved
    assert alice.get_epoch("g1") == 3


def test_rebase_exhausts_after_max_attempts():
    seq, alice, bob = two_member_group()
    bob.send_oam("g1", b"never lands")
    for _ in range(msg.MAX_COMMIT_ATTEMPTS - 1):
        winner = alice.send_oam("g1", b"winner")
        seq.accept(winner)
        alice.process_incoming(winner)
        _, _env = bob.rebase_pending("g1", [winner])
    winner = alice.send_oam("g1", b"winner")
    seq.accept(winner)
    alice.process_incoming(winner)
    with pytest.raises(RetriesExhaustedError):
        bob.rebase_pending("g1", [winner])


def test_backoff_schedule():
    policy = msg.BackoffPolicy()
    assert policy.delay_ms(1, unit_random=0.5) == pytest.approx(100.0)
    assert policy.delay_ms(2, unit_random=0.5) == pytest.approx(200.0)
    assert policy.delay_ms(1, unit_random=0.0) == pytest.approx(80.0)
    assert policy.delay_ms(1, unit_random=1.0) == pytest.approx(120.0, abs=0.01)


def test_prefix_property_after_scenario():
    seq, alice, bob = two_member_group()
    for payload in (b"1", b"2", b"3", b"4"):
        commit = alice.send_oam("g1", payload)
        seq.accept(commit)
        alice.process_incoming(commit)
    # bob merges only a prefix
    for env in seq.logs["g1"][1:3]:
        bob.process_incoming(env)
    assert bob.get_epoch("g1") == 3
    assert alice.get_epoch("g1") == 5


def test_messaging_state_roundtrip():
    seq, alice, bob = two_member_group()
    commit = alice.send_oam("g1", b"persist me")
    seq.accept(commit)
    alice.process_incoming(commit)
    restored = msg.MessagingClient.from_dict(alice.to_dict())
    st, st2 = alice.group("g1"), restored.group("g1")
    assert st.epoch == st2.epoch
    assert st.transcript_hash == st2.transcript_hash
    assert st.epoch_secret == st2.epoch_secret
    assert [m.to_wire() for m in st.members] == [m.to_wire() for m in st2.members]
    env = bob.send_uam("g1", b"to the restored client")  # bob still at epoch 1
    assert restored.process_incoming(env) == [msg.DecodedUAM("g1", "bob", b"to the restored client", 1)]
