"""Control-API tests: auth, routes, verdict surfacing, event push, parity."""

from __future__ import annotations

import threading

import pytest
from fastapi.testclient import TestClient as HttpClient

from govchat import crypto
from govchat.client import Client, LocalTransport
from govchat.authsvc import AuthService
from govchat.control_api import create_app
from govchat.delivery import DeliveryService, SimClock
from govchat.moderation import ModerationService

TOKEN = "test-token"
AUTH = {"Authorization": f"Bearer {TOKEN}"}


@pytest.fixture()
def world(tmp_path):
    admin = crypto.generate_sig_keypair(crypto.DeterministicRand("api-admin"))
    clock = SimClock()
    ds = DeliveryService(admin_pk=admin.public, clock=clock)
    auth = AuthService(admin_pk=admin.public)
    transport = LocalTransport(ds, auth)

    def make(name, **kwargs):
        c = Client(
            name,
            transport,
            rand=crypto.DeterministicRand(f"api:{name}"),
            sleeper=lambda s: None,
            **kwargs,
        )
        c.register()
        return c

    return ds, auth, transport, admin, clock, make


def test_auth_required(world):
    *_, make = world
    alice = make("alice")
    app = create_app(alice, TOKEN)
    http = HttpClient(app)
    assert http.get("/groups").status_code == 401
    assert http.get("/groups", headers={"Authorization": "Bearer wrong"}).status_code == 401
    assert http.get("/groups", headers=AUTH).json() == []


def test_group_routes_and_action_verdicts(world):
    *_, make = world
    alice, bob = make("alice"), make("bob")
    app_a = create_app(alice, TOKEN)
    http = HttpClient(app_a)
    assert http.post("/groups", headers=AUTH, json={"group_id": "g1"}).status_code == 201
    alice.invite("g1", "bob")
    bob.sync()
    resp = http.post(
        "/groups/g1/actions",
        headers=AUTH,
        json={"action_type": "ChangeName", "payload": {"name": "Via API"}},
    )
    assert resp.status_code == 202 and resp.json()["verdict"] == "passed"
    state = http.get("/groups/g1/state", headers=AUTH).json()
    assert state["name"] == "Via API"
    assert http.get("/groups/missing/state", headers=AUTH).status_code == 404

    # member without permission -> 422 with the engine verdict
    app_b = create_app(bob, TOKEN)
    http_b = HttpClient(app_b)
    http_b.post("/sync", headers=AUTH)
    resp = http_b.post(
        "/groups/g1/actions",
        headers=AUTH,
        json={"action_type": "KickUser", "payload": {"username": "alice"}},
    )
    assert resp.status_code == 422
    assert resp.json()["detail"]["verdict"] == "failed"


def test_member_vote_action_reports_proposed(world):
    *_, make = world
    alice, bob = make("alice"), make("bob")
    alice.create_group("g1")
    alice.invite("g1", "bob")
    bob.sync()
    app_b = create_app(bob, TOKEN)
    http_b = HttpClient(app_b)
    resp = http_b.post(
        "/groups/g1/actions",
        headers=AUTH,
        json={"action_type": "ChangeName", "payload": {"name": "Proposal"}},
    )
    assert resp.status_code == 202
    assert resp.json()["verdict"] == "proposed"


def test_messages_and_alerts_routes(world):
    *_, make = world
    alice, bob = make("alice"), make("bob")
    alice.create_group("g1")
    alice.invite("g1", "bob")
    bob.sync()
    bob.send_text("g1", "hi api")
    alice.sync()
    http = HttpClient(create_app(alice, TOKEN))
    msgs = http.get("/groups/g1/messages", headers=AUTH).json()
    assert any(m["action"]["payload"].get("text") == "hi api" for m in msgs)
    assert http.get("/alerts", headers=AUTH).json() == []


def test_ws_events_stream_rename_from_peer(world):
    *_, make = world
    alice, bob = make("alice"), make("bob")
    alice.create_group("g1")
    alice.invite("g1", "bob")
    bob.sync()
    app_b = create_app(bob, TOKEN)
    http_b = HttpClient(app_b)
    with http_b.websocket_connect(f"/events?token={TOKEN}&since=0") as ws:
        alice.rename("g1", "Pushed Live")
        http_b.post("/sync", headers=AUTH)
        seen = []
        for _ in range(50):
            event = ws.receive_json()
            seen.append(event["kind"])
            if event["kind"] == "gov_changed":
                break
        assert "gov_changed" in seen
    assert bob.status("g1")["name"] == "Pushed Live"


def test_ws_rejects_bad_token(world):
    *_, make = world
    alice = make("alice")
    http = HttpClient(create_app(alice, TOKEN))
    with pytest.raises(Exception):
        with http.websocket_connect("/events?token=wrong") as ws:
            ws.receive_json()


def test_ms_routes(world):
    ds, auth, transport, admin, clock, make = world
    from govchat.authsvc import directory_from_lookup

    moderation = ModerationService(
        admin_keypair=admin,
        directory=directory_from_lookup(auth.lookup),
        ban_fn=ds.apply_ban,
        revoke_fn=auth.revoke,
        clock=clock,
    )
    ms_client = make("@moderation", escalation_handler=lambda r, p: moderation.receive_escalation(r, p))
    http = HttpClient(create_app(ms_client, TOKEN, moderation=moderation))
    assert http.get("/ms/cases", headers=AUTH).json() == []

    plain = make("alice")
    http_plain = HttpClient(create_app(plain, TOKEN))
    assert http_plain.get("/ms/cases", headers=AUTH).status_code == 404


def test_cli_and_api_share_one_code_path(world):
    """The same scenario driven via perform() and via HTTP lands on the
    identical governance state hash."""
    *_, make = world
    a1, b1 = make("a1"), make("b1")
    a2, b2 = make("a2"), make("b2")

    # route one: direct perform (the CLI path)
    a1.create_group("g")
    a1.invite("g", "b1")
    b1.sync()
    a1.perform("g", "ChangeName", {"name": "Same Name"})
    a1.perform("g", "SetTextFilter", {"words": ["banned"]})

    # route two: HTTP API
    http = HttpClient(create_app(a2, TOKEN))
    http.post("/groups", headers=AUTH, json={"group_id": "g2"})
    a2.invite("g2", "b2")
    b2.sync()
    http.post("/groups/g2/actions", headers=AUTH,
              json={"action_type": "ChangeName", "payload": {"name": "Same Name"}})
    http.post("/groups/g2/actions", headers=AUTH,
              json={"action_type": "SetTextFilter", "payload": {"words": ["banned"]}})

    s1, s2 = a1.status("g"), a2.status("g2")
    assert s1["kv"]["word_filter"] == s2["kv"]["word_filter"]
    assert s1["name"] == s2["name"]
    assert s1["user_roles"].keys() == {"a1", "b1"}
    assert s2["user_roles"].keys() == {"a2", "b2"}
