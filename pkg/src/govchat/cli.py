"""Command-line interface: client commands, service servers, benchmarks."""

from __future__ import annotations

import json
import os
import sys

import click

from . import bench as bench_mod
from .canonical import from_hex
from .client import Client
from .control_api import CONTROL_DEFAULT_PORT, run_daemon
from .errors import GovchatError
from .wire import AS_DEFAULT_PORT, AsServer, DS_DEFAULT_PORT, DsServer, WsTransport


def _echo(obj) -> None:
    click.echo(json.dumps(obj, indent=2, sort_keys=True, default=str))


class Ctx:
    def __init__(self, ds_url, as_url, data_dir, token, poll_ms):
        self.ds_url = ds_url
        self.as_url = as_url
        self.data_dir = os.path.expanduser(data_dir)
        self.token = token
        self.poll_ms = poll_ms
        self._client = None

    def username(self):
        index = os.path.join(self.data_dir, "index.json")
        if not os.path.exists(index):
            raise click.ClickException("no identity here yet; run `govchat register --username NAME` first")
        with open(index, "r", encoding="utf-8") as fh:
            return json.load(fh)["username"]

    def client(self, username=None) -> Client:
        if self._client is None:
            name = username or self.username()
            transport = WsTransport(self.ds_url, self.as_url, name)
            self._client = Client(name, transport, data_dir=self.data_dir)
        return self._client


@click.group()
@click.option("--ds-url", default=f"ws://127.0.0.1:{DS_DEFAULT_PORT}", envvar="GOVCHAT_DS_URL", show_default=True)
@click.option("--as-url", default=f"ws://127.0.0.1:{AS_DEFAULT_PORT}", envvar="GOVCHAT_AS_URL", show_default=True)
@click.option("--data-dir", default="~/.govchat", envvar="GOVCHAT_DATA_DIR", show_default=True)
@click.option("--token", default="local-dev-token", envvar="GOVCHAT_TOKEN")
@click.option("--poll-ms", default=None, type=int, help="background sync interval for the daemon")
@click.pass_context
def main(ctx, ds_url, as_url, data_dir, token, poll_ms):
    """End-to-end encrypted group chat with community governance."""
    ctx.obj = Ctx(ds_url, as_url, data_dir, token, poll_ms)


def _run(ctx, fn):
    try:
        _echo(fn())
    except GovchatError as exc:
        raise click.ClickException(f"{exc.code}: {exc}") from exc


@main.command()
@click.option("--username", required=True)
@click.pass_obj
def register(ctx, username):
    """Create an identity, register it with the directory, upload key packages."""
    client = ctx.client(username=username)
    _run(ctx, client.register)


@main.command("create-group")
@click.argument("group_id")
@click.pass_obj
def create_group(ctx, group_id):
    _run(ctx, lambda: ctx.client().create_group(group_id))


@main.command()
@click.argument("group_id")
@click.argument("username")
@click.pass_obj
def invite(ctx, group_id, username):
    _run(ctx, lambda: ctx.client().invite(group_id, username))


@main.command()
@click.argument("group_id", required=False)
@click.pass_obj
def accept(ctx, group_id):
    """Pull pending welcomes/announcements and finish joining."""
    client = ctx.client()

    def do():
        client.sync()
        if group_id:
            return client.status(group_id)
        return client.groups()

    _run(ctx, do)


@main.command()
@click.argument("group_id")
@click.argument("text")
@click.pass_obj
def send(ctx, group_id, text):
    _run(ctx, lambda: ctx.client().send_text(group_id, text))


@main.command()
@click.argument("group_id")
@click.argument("name")
@click.pass_obj
def rename(ctx, group_id, name):
    _run(ctx, lambda: ctx.client().rename(group_id, name))


@main.command("set-topic")
@click.argument("group_id")
@click.argument("topic")
@click.pass_obj
def set_topic(ctx, group_id, topic):
    _run(ctx, lambda: ctx.client().perform(group_id, "ChangeTopic", {"topic": topic}))


@main.command("def-role")
@click.argument("group_id")
@click.argument("role")
@click.argument("permissions", nargs=-1, required=True)
@click.pass_obj
def def_role(ctx, group_id, role, permissions):
    _run(ctx, lambda: ctx.client().perform(
        group_id, "DefRole", {"role": role, "permissions": list(permissions)}
    ))


@main.command("set-role")
@click.argument("group_id")
@click.argument("username")
@click.argument("roles", nargs=-1, required=True)
@click.pass_obj
def set_role(ctx, group_id, username, roles):
    _run(ctx, lambda: ctx.client().perform(
        group_id, "SetUserRole", {"username": username, "roles": list(roles)}
    ))


@main.command()
@click.argument("group_id")
@click.argument("username")
@click.pass_obj
def kick(ctx, group_id, username):
    _run(ctx, lambda: ctx.client().kick(group_id, username))


@main.command("set-filter")
@click.argument("group_id")
@click.argument("words", nargs=-1)
@click.pass_obj
def set_filter(ctx, group_id, words):
    _run(ctx, lambda: ctx.client().perform(group_id, "SetTextFilter", {"words": list(words)}))


@main.command("poll-start")
@click.argument("group_id")
@click.argument("action_type")
@click.argument("payload_json")
@click.pass_obj
def poll_start(ctx, group_id, action_type, payload_json):
    """Open a poll over a governance action, e.g.:

    govchat poll-start g1 ChangeName '{"name": "New Name"}'
    """
    payload = json.loads(payload_json)
    _run(ctx, lambda: ctx.client().poll_start(group_id, action_type, payload))


@main.command()
@click.argument("group_id")
@click.argument("proposal_id")
@click.argument("choice", type=click.Choice(["yes", "no"]))
@click.pass_obj
def vote(ctx, group_id, proposal_id, choice):
    _run(ctx, lambda: ctx.client().vote(group_id, proposal_id, choice))


@main.command("poll-end")
@click.argument("group_id")
@click.argument("proposal_id")
@click.pass_obj
def poll_end(ctx, group_id, proposal_id):
    _run(ctx, lambda: ctx.client().perform(group_id, "PollEnd", {"proposal_id": proposal_id}))


@main.command()
@click.argument("group_id")
@click.option("--message-id", "-m", "message_ids", multiple=True, required=True)
@click.option("--reason", default="")
@click.option("--to-group", default=None, help="group to deliver the report into (default: same group)")
@click.pass_obj
def report(ctx, group_id, message_ids, reason, to_group):
    _run(ctx, lambda: ctx.client().report(group_id, list(message_ids), reason, to_group=to_group))


@main.command()
@click.argument("group_id")
@click.option("--message-id", "-m", "message_ids", multiple=True, required=True)
@click.option("--reason", default="")
@click.pass_obj
def escalate(ctx, group_id, message_ids, reason):
    _run(ctx, lambda: ctx.client().escalate(group_id, list(message_ids), reason))


@main.command()
@click.pass_obj
def sync(ctx):
    client = ctx.client()
    _run(ctx, lambda: {"events": len(client.sync()), "groups": client.groups()})


@main.command()
@click.argument("group_id")
@click.pass_obj
def status(ctx, group_id):
    _run(ctx, lambda: ctx.client().status(group_id))


@main.command()
@click.option("--port", default=CONTROL_DEFAULT_PORT, show_default=True)
@click.option("--ms", is_flag=True, help="run as the platform moderation daemon")
@click.option("--admin-key", default=None, help="hex file with the MS admin signing secret")
@click.option("--console-dir", default=None, help="directory with the built web console")
@click.pass_obj
def daemon(ctx, port, ms, admin_key, console_dir):
    """Serve the loopback control API (HTTP + WS) for the web console."""
    client = ctx.client()
    moderation = None
    if ms:
        from . import crypto
        from .authsvc import directory_from_lookup
        from .moderation import ModerationService

        if not admin_key:
            raise click.ClickException("--ms requires --admin-key")
        with open(os.path.expanduser(admin_key), "r", encoding="utf-8") as fh:
            secret = from_hex(fh.read().strip())
        keypair = crypto.SigKeyPair(crypto.sig_public_key(secret), secret)
        moderation = ModerationService(
            admin_keypair=keypair,
            directory=lambda u: _gov_pk_or_none(client, u),
            ban_fn=client.transport.ds_ban,
            revoke_fn=client.transport.as_revoke,
        )
        docket_path = os.path.join(ctx.data_dir, "ms_docket.json")
        if os.path.exists(docket_path):
            with open(docket_path, "r", encoding="utf-8") as fh:
                moderation.restore(json.load(fh))

        def handler(reporter, payload):
            moderation.receive_escalation(reporter, payload)
            moderation.save(docket_path)

        client.escalation_handler = handler
    click.echo(f"control api on http://127.0.0.1:{port} (token: --token)", err=True)
    run_daemon(
        client,
        ctx.token,
        port=port,
        poll_ms=ctx.poll_ms,
        moderation=moderation,
        console_dir=console_dir,
    )


def _gov_pk_or_none(client, username):
    entry = client._lookup(username)
    return bytes.fromhex(entry["gov_pk_hex"]) if entry else None


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------


@main.group()
def bench():
    """Micro/vote/server benchmarks; CSV plus figures."""


def _finish_bench(rows, out):
    bench_mod.write_csv(rows, out)
    figures = bench_mod.render_figures(rows, os.path.dirname(os.path.abspath(out)) or ".")
    _echo({"csv": out, "figures": figures, "rows": len(rows)})


def _parse_sizes(text):
    return tuple(int(s) for s in text.split(",") if s)


@bench.command()
@click.option("--sizes", default="8,16,32,64", show_default=True)
@click.option("--trials", default=5, show_default=True)
@click.option("--out", default="results.csv", show_default=True)
def micro(sizes, trials, out):
    rows = bench_mod.run_micro(_parse_sizes(sizes), trials)
    _finish_bench(rows, out)


@bench.command("vote")
@click.option("--sizes", default="8,16,32,64", show_default=True)
@click.option("--trials", default=5, show_default=True)
@click.option("--out", default="results.csv", show_default=True)
def bench_vote(sizes, trials, out):
    rows = bench_mod.run_vote_macro(_parse_sizes(sizes), trials)
    _finish_bench(rows, out)


@bench.command()
@click.option("--uam-fraction", default=0.9, show_default=True)
@click.option("--requests", "total_requests", default=400, show_default=True)
@click.option("--group-size", default=8, show_default=True)
@click.option("--groups", "n_groups", default=2, show_default=True)
@click.option("--out", default="results.csv", show_default=True)
def server(uam_fraction, total_requests, group_size, n_groups, out):
    rows = bench_mod.run_server_load(uam_fraction, total_requests, group_size, n_groups)
    _finish_bench(rows, out)


# ---------------------------------------------------------------------------
# service entry points
# ---------------------------------------------------------------------------


@click.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=DS_DEFAULT_PORT, show_default=True)
@click.option("--snapshot", default=None, help="JSON snapshot path (saved on shutdown)")
@click.option("--faults", default=None, help="fault-script JSON (enables the test interface)")
@click.option("--admin-pk", default=None, help="hex moderation-service public key")
def ds_main(host, port, snapshot, faults, admin_pk):
    """Run the delivery service."""
    fault_script = None
    if faults:
        with open(faults, "r", encoding="utf-8") as fh:
            fault_script = json.load(fh)
    server = DsServer(
        host=host,
        port=port,
        admin_pk=from_hex(admin_pk) if admin_pk else None,
        snapshot_path=snapshot,
        faults=faults is not None,
        fault_script=fault_script,
    )
    if snapshot and os.path.exists(snapshot):
        server.ds.load(snapshot)
    click.echo(f"delivery service on ws://{host}:{server.port}", err=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.persist()


@click.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=AS_DEFAULT_PORT, show_default=True)
@click.option("--snapshot", default=None)
@click.option("--admin-pk", default=None, help="hex moderation-service public key")
def as_main(host, port, snapshot, admin_pk):
    """Run the authentication service."""
    server = AsServer(
        host=host,
        port=port,
        admin_pk=from_hex(admin_pk) if admin_pk else None,
        snapshot_path=snapshot,
    )
    click.echo(f"authentication service on ws://{host}:{server.port}", err=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.persist()


if __name__ == "__main__":
    main()
