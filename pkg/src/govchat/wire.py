"""JSON-over-WebSocket wire layer for the platform services.

Requests are ``{"op": <name>, "body": {...}}``; responses mirror with
``{"ok": true, "body": ...}`` or ``{"ok": false, "err": <code>, "msg": ...}``.
A connection starts with a ``hello`` op binding the username; the service
stamps that identity onto everything the connection sends, so clients
cannot speak for each other at the transport level.

Fault-injection ops (``test_*``) exist only when a server is started with
faults enabled.
"""

from __future__ import annotations

import json
import logging
import threading
from typing import Optional

from websockets.sync.client import connect as ws_connect
from websockets.sync.server import serve as ws_serve

from .authsvc import AuthService
from .delivery import AdversarialDeliveryService, DeliveryService, SimClock
from .errors import GovchatError, UnauthorizedError, error_for_code

logger = logging.getLogger(__name__)

DS_DEFAULT_PORT = 7700
AS_DEFAULT_PORT = 7701


def _ok(body) -> str:
    return json.dumps({"ok": True, "body": body})


def _err(exc: Exception) -> str:
    if isinstance(exc, GovchatError):
        return json.dumps({"ok": False, "err": exc.code, "msg": str(exc)})
    logger.exception("internal error handling request")
    return json.dumps({"ok": False, "err": "Internal", "msg": str(exc)})


class _ServiceServer:
    """Shared accept-loop plumbing for the DS and AS servers."""

    def __init__(self, host: str, port: int):
        self._server = ws_serve(self._connection, host, port)
        self.port = self._server.socket.getsockname()[1]
        self._thread: Optional[threading.Thread] = None

    def _connection(self, ws) -> None:
        username = None
        for raw in ws:
            try:
                request = json.loads(raw)
                op = request["op"]
                body = request.get("body", {})
                if op == "hello":
                    username = body["username"]
                    ws.send(_ok({"hello": username}))
                    continue
                ws.send(_ok(self.dispatch(username, op, body)))
            except GovchatError as exc:
                ws.send(_err(exc))
            except Exception as exc:  # malformed input must not kill the loop
                ws.send(_err(exc))

    def dispatch(self, username: Optional[str], op: str, body: dict):
        raise NotImplementedError

    def serve_forever(self) -> None:
        self._server.serve_forever()

    def start_background(self) -> "_ServiceServer":
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def shutdown(self) -> None:
        self._server.shutdown()


class DsServer(_ServiceServer):
    def __init__(
        self,
        host: str = "127.0.0.1",
        port: int = DS_DEFAULT_PORT,
        admin_pk: Optional[bytes] = None,
        snapshot_path: Optional[str] = None,
        faults: bool = False,
        fault_script: Optional[dict] = None,
    ):
        self.faults = faults
        clock = SimClock() if faults else None
        if faults:
            self.ds = AdversarialDeliveryService(admin_pk=admin_pk, clock=clock)
            if fault_script:
                self.ds.load_fault_script(fault_script)
        else:
            self.ds = DeliveryService(admin_pk=admin_pk)
        self.snapshot_path = snapshot_path
        super().__init__(host, port)

    def dispatch(self, username, op, body):
        ds = self.ds
        if op == "send_ordered":
            self._require(username, body["envelope"]["sender"])
            return ds.handle_send_ordered(
                username, body["group_id"], body["envelope"], body.get("last_acked", -1)
            )
        if op == "send_unordered":
            self._require(username, body["envelope"]["sender"])
            return ds.handle_send_unordered(username, body["recipients"], body["envelope"])
        if op == "sync":
            return ds.handle_sync(username, body.get("last_acked", {}))
        if op == "publish_kp":
            return ds.publish_key_packages(username, body["packages"])
        if op == "fetch_kp":
            return ds.fetch_key_package(body["username"])
        if op == "welcome":
            self._require(username, body["envelope"]["sender"])
            return ds.relay_welcome(username, body["recipient"], body["envelope"])
        if op == "ban":
            return ds.apply_ban(body["body"], body["sig_hex"])
        if self.faults and op == "test_advance_clock":
            ds.clock.advance(float(body["seconds"]))
            return {"now": ds.clock()}
        if self.faults and op == "test_fault":
            ds.load_fault_script(body)
            return {"applied": True}
        if self.faults and op == "test_snapshot":
            return ds.snapshot()
        raise UnauthorizedError(f"unknown op {op}")

    @staticmethod
    def _require(bound: Optional[str], claimed: str) -> None:
        if bound is None or bound != claimed:
            raise UnauthorizedError("envelope sender does not match connection identity")

    def persist(self) -> None:
        if self.snapshot_path:
            self.ds.save(self.snapshot_path)


class AsServer(_ServiceServer):
    def __init__(
        self,
        host: str = "127.0.0.1",
        port: int = AS_DEFAULT_PORT,
        admin_pk: Optional[bytes] = None,
        snapshot_path: Optional[str] = None,
    ):
        self.auth = AuthService(admin_pk=admin_pk)
        self.snapshot_path = snapshot_path
        super().__init__(host, port)

    def dispatch(self, username, op, body):
        if op == "register":
            return self.auth.register(body["username"], body["sig_pk_hex"], body["gov_pk_hex"])
        if op == "lookup":
            return self.auth.lookup(body["username"])
        if op == "revoke":
            return self.auth.revoke(body["body"], body["sig_hex"])
        raise UnauthorizedError(f"unknown op {op}")

    def persist(self) -> None:
        if self.snapshot_path:
            self.auth.save(self.snapshot_path)


class _WsChannel:
    """One persistent client connection with hello binding and byte counting."""

    def __init__(self, url: str, username: str):
        self.url = url
        self.username = username
        self._ws = None
        self._lock = threading.Lock()
        self.bytes_sent = 0
        self.bytes_received = 0

    def _ensure(self):
        if self._ws is None:
            self._ws = ws_connect(self.url, max_size=16 * 1024 * 1024)
            self._send_raw({"op": "hello", "body": {"username": self.username}})

    def _send_raw(self, request: dict) -> dict:
        text = json.dumps(request)
        self._ws.send(text)
        self.bytes_sent += len(text.encode("utf-8"))
        raw = self._ws.recv()
        self.bytes_received += len(raw.encode("utf-8") if isinstance(raw, str) else raw)
        return json.loads(raw)

    def call(self, op: str, body: dict):
        with self._lock:
            self._ensure()
            resp = self._send_raw({"op": op, "body": body})
        if resp.get("ok"):
            return resp.get("body")
        raise error_for_code(resp.get("err", "Internal"), resp.get("msg", ""))

    def close(self) -> None:
        with self._lock:
            if self._ws is not None:
                self._ws.close()
                self._ws = None


class WsTransport:
    """Client-side transport speaking the JSON-over-WebSocket protocol."""

    def __init__(self, ds_url: str, as_url: str, username: str):
        self.username = username
        self._ds = _WsChannel(ds_url, username)
        self._as = _WsChannel(as_url, username)

    # traffic accounting (wire bytes at the WebSocket boundary)
    def traffic_bytes_total(self) -> int:
        return (
            self._ds.bytes_sent
            + self._ds.bytes_received
            + self._as.bytes_sent
            + self._as.bytes_received
        )

    def ds_traffic_bytes(self) -> int:
        return self._ds.bytes_sent + self._ds.bytes_received

    def close(self) -> None:
        self._ds.close()
        self._as.close()

    # -- AS ops ---------------------------------------------------------------

    def as_register(self, username, sig_pk_hex, gov_pk_hex):
        return self._as.call(
            "register",
            {"username": username, "sig_pk_hex": sig_pk_hex, "gov_pk_hex": gov_pk_hex},
        )

    def as_lookup(self, username):
        return self._as.call("lookup", {"username": username})

    def as_revoke(self, body, sig_hex):
        return self._as.call("revoke", {"body": body, "sig_hex": sig_hex})

    # -- DS ops ---------------------------------------------------------------

    def ds_send_ordered(self, sender, group_id, env_wire, last_acked):
        return self._ds.call(
            "send_ordered",
            {"group_id": group_id, "envelope": env_wire, "last_acked": last_acked},
        )

    def ds_send_unordered(self, sender, recipients, env_wire):
        return self._ds.call("send_unordered", {"recipients": recipients, "envelope": env_wire})

    def ds_sync(self, user, last_acked):
        return self._ds.call("sync", {"last_acked": last_acked})

    def ds_publish_kp(self, user, packages):
        return self._ds.call("publish_kp", {"packages": packages})

    def ds_fetch_kp(self, username):
        return self._ds.call("fetch_kp", {"username": username})

    def ds_welcome(self, sender, recipient, env_wire):
        return self._ds.call("welcome", {"recipient": recipient, "envelope": env_wire})

    def ds_ban(self, body, sig_hex):
        return self._ds.call("ban", {"body": body, "sig_hex": sig_hex})

    # -- test-only DS ops -------------------------------------------------------

    def ds_test_advance_clock(self, seconds: float):
        return self._ds.call("test_advance_clock", {"seconds": seconds})

    def ds_test_fault(self, script: dict):
        return self._ds.call("test_fault", script)

    def ds_test_snapshot(self):
        return self._ds.call("test_snapshot", {})
