"""Loopback control API consumed by the web console (HTTP + WebSocket push).

The daemon owns one Client (single-writer), so every handler funnels
through a shared lock. Events stream over ``WS /events`` with at-least-once
delivery and id-based resume; no key material ever crosses this API.
"""

from __future__ import annotations

import json
import logging
import os
import queue
import threading
from typing import Optional

from fastapi import Depends, FastAPI, Header, HTTPException, Query, WebSocket, WebSocketDisconnect
from fastapi.staticfiles import StaticFiles

from .client import Client
from .errors import GovchatError, UnknownGroupError
from .moderation import ModerationService

logger = logging.getLogger(__name__)

CONTROL_DEFAULT_PORT = 7800


def create_app(
    client: Client,
    token: str,
    lock: Optional[threading.RLock] = None,
    moderation: Optional[ModerationService] = None,
    console_dir: Optional[str] = None,
) -> FastAPI:
    app = FastAPI(title="govchat control api")
    lock = lock or threading.RLock()
    app.state.client = client
    app.state.lock = lock
    app.state.moderation = moderation

    def require_auth(authorization: Optional[str] = Header(default=None)):
        if authorization != f"Bearer {token}":
            raise HTTPException(status_code=401, detail="bad token")

    auth = Depends(require_auth)

    def run(fn):
        with lock:
            try:
                return fn()
            except UnknownGroupError as exc:
                raise HTTPException(status_code=404, detail=str(exc)) from exc
            except GovchatError as exc:
                raise HTTPException(status_code=422, detail={"err": exc.code, "msg": str(exc)}) from exc

    @app.get("/whoami", dependencies=[auth])
    def whoami():
        return {"username": client.username, "moderation": moderation is not None}

    @app.get("/groups", dependencies=[auth])
    def groups():
        return run(client.groups)

    @app.post("/groups", dependencies=[auth], status_code=201)
    def create_group(body: dict):
        return run(lambda: client.create_group(body["group_id"]))

    @app.get("/groups/{group_id}/state", dependencies=[auth])
    def group_state(group_id: str):
        return run(lambda: client.status(group_id))

    @app.get("/groups/{group_id}/messages", dependencies=[auth])
    def group_messages(group_id: str):
        return run(lambda: client.messages(group_id))

    @app.post("/groups/{group_id}/actions", dependencies=[auth], status_code=202)
    def group_action(group_id: str, body: dict):
        result = run(lambda: client.perform(group_id, body["action_type"], body.get("payload", {})))
        if result.get("verdict") == "failed":
            raise HTTPException(status_code=422, detail=result)
        return result

    @app.post("/sync", dependencies=[auth])
    def sync():
        events = run(client.sync)
        return {"events": len(events)}

    @app.post("/tick", dependencies=[auth])
    def tick():
        verdicts = run(client.tick)
        return {"resolved": len(verdicts)}

    @app.get("/alerts", dependencies=[auth])
    def alerts():
        return run(client.alerts)

    @app.get("/ms/cases", dependencies=[auth])
    def ms_cases(verified: Optional[bool] = Query(default=None)):
        if moderation is None:
            raise HTTPException(status_code=404, detail="not a moderation daemon")
        return moderation.list_cases(verified)

    @app.post("/ms/cases/{case_id}/decision", dependencies=[auth])
    def ms_decide(case_id: str, body: dict):
        if moderation is None:
            raise HTTPException(status_code=404, detail="not a moderation daemon")
        try:
            case = moderation.decide(case_id, body)
        except GovchatError as exc:
            raise HTTPException(status_code=422, detail={"err": exc.code, "msg": str(exc)}) from exc
        return case.summary()

    @app.websocket("/events")
    async def events_ws(
        ws: WebSocket,
        token_param: Optional[str] = Query(default=None, alias="token"),
        since: int = Query(default=0),
    ):
        import asyncio

        header = ws.headers.get("authorization")
        if header != f"Bearer {token}" and token_param != token:
            await ws.close(code=4401)
            return
        await ws.accept()
        outbox: "queue.Queue[dict]" = queue.Queue()
        with lock:
            backlog = client.events_since(since)
            client.subscribe(outbox.put)
        try:
            for event in backlog:
                await ws.send_text(json.dumps(event))
            while True:
                try:
                    event = outbox.get_nowait()
                except queue.Empty:
                    await asyncio.sleep(0.05)
                    continue
                await ws.send_text(json.dumps(event))
        except (WebSocketDisconnect, RuntimeError):
            pass
        finally:
            client.unsubscribe(outbox.put)

    if console_dir and os.path.isdir(console_dir):
        app.mount("/console", StaticFiles(directory=console_dir, html=True), name="console")

    return app


def run_daemon(
    client: Client,
    token: str,
    port: int = CONTROL_DEFAULT_PORT,
    poll_ms: Optional[int] = None,
    moderation: Optional[ModerationService] = None,
    console_dir: Optional[str] = None,
):
    """Serve the control API on loopback, optionally with a background sync loop."""
    import time as _time

    import uvicorn

    lock = threading.RLock()
    app = create_app(client, token, lock=lock, moderation=moderation, console_dir=console_dir)

    if poll_ms:
        def loop():
            while True:
                _time.sleep(poll_ms / 1000.0)
                with lock:
                    try:
                        client.sync()
                    except Exception:
                        logger.exception("background sync failed")

        threading.Thread(target=loop, daemon=True).start()

    uvicorn.run(app, host="127.0.0.1", port=port, log_level="warning")
