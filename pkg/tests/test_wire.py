"""Socket-level tests: the full client stack over real WebSocket servers."""

from __future__ import annotations

import pytest

from govchat import crypto
from govchat.client import Client
from govchat.errors import BannedError, NotFoundError, UnauthorizedError
from govchat.wire import AsServer, DsServer, WsTransport


@pytest.fixture()
def servers():
    admin = crypto.generate_sig_keypair(crypto.DeterministicRand("ws-admin"))
    ds = DsServer(port=0, admin_pk=admin.public, faults=True).start_background()
    asrv = AsServer(port=0, admin_pk=admin.public).start_background()
    transports = []

    def make_client(name, **kwargs):
        transport = WsTransport(
            f"ws://127.0.0.1:{ds.port}", f"ws://127.0.0.1:{asrv.port}", name
        )
        transports.append(transport)
        client = Client(
            name,
            transport,
            rand=crypto.DeterministicRand(f"ws:{name}"),
            sleeper=lambda s: None,
            **kwargs,
        )
        client.register()
        return client

    yield ds, asrv, admin, make_client
    for t in transports:
        t.close()
    ds.shutdown()
    asrv.shutdown()


def test_full_flow_over_websockets(servers):
    ds, asrv, admin, make_client = servers
    alice = make_client("alice")
    bob = make_client("bob")
    alice.create_group("g1")
    assert alice.invite("g1", "bob")["verdict"] == "passed"
    bob.sync()
    alice.sync()
    alice.rename("g1", "Over The Wire")
    bob.sync()
    assert bob.status("g1")["name"] == "Over The Wire"
    assert bob.governance_hash("g1") == alice.governance_hash("g1")
    bob.send_text("g1", "hello over websockets")
    alice.sync()
    assert any(
        m["action"]["payload"].get("text") == "hello over websockets"
        for m in alice.messages("g1")
    )


def test_connection_identity_is_enforced(servers):
    ds, asrv, admin, make_client = servers
    alice = make_client("alice")
    mallory = make_client("mallory")
    alice.create_group("g1")
    env = alice.msg.send_uam("g1", b"hi").to_wire()
    env["sender"] = "alice"
    with pytest.raises(UnauthorizedError):
        mallory.transport.ds_send_unordered("alice", ["bob"], env)


def test_as_lookup_and_unknown(servers):
    ds, asrv, admin, make_client = servers
    make_client("alice")
    entry = WsTransport(
        f"ws://127.0.0.1:{ds.port}", f"ws://127.0.0.1:{asrv.port}", "probe"
    ).as_lookup("alice")
    assert entry["username"] == "alice" and not entry["revoked"]
    probe = WsTransport(f"ws://127.0.0.1:{ds.port}", f"ws://127.0.0.1:{asrv.port}", "probe")
    with pytest.raises(NotFoundError):
        probe.as_lookup("ghost")


def test_ban_over_wire_with_simulated_clock(servers):
    ds, asrv, admin, make_client = servers
    from govchat.canonical import canonical_bytes, to_hex

    alice = make_client("alice")
    bob = make_client("bob")
    alice.create_group("g1")
    alice.invite("g1", "bob")
    bob.sync()
    body = {"username": "bob", "until": 3600.0, "nonce": "w1"}
    sig = to_hex(crypto.sign(admin.secret, canonical_bytes(body)))
    bob.transport.ds_ban(body, sig)
    with pytest.raises(BannedError):
        bob.send_text("g1", "banned?")
    bob.transport.ds_test_advance_clock(3601)
    assert bob.send_text("g1", "back again")["verdict"] == "passed"


def test_traffic_counters_increase(servers):
    ds, asrv, admin, make_client = servers
    alice = make_client("alice")
    bob = make_client("bob")
    alice.create_group("g1")
    alice.invite("g1", "bob")
    bob.sync()
    before = alice.transport.ds_traffic_bytes()
    alice.send_text("g1", "count me")
    assert alice.transport.ds_traffic_bytes() > before
