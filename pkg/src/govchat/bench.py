"""Desk-scale benchmark harness: per-operation micro-benchmarks, the voting
macro-benchmark, and delivery-service load runs.

Everything runs against unmodified production code paths over real
WebSocket servers on loopback; traffic is measured as serialized wire
bytes at the WebSocket boundary. Results go to CSV
(scenario,group_size,op,trial,latency_ms,traffic_bytes) with matplotlib
figures rendered alongside.
"""

from __future__ import annotations

import csv
import os
import threading
import time
from dataclasses import dataclass

from . import crypto
from .client import Client
from .errors import RetriesExhaustedError, ScenarioSetupError
from .wire import AsServer, DsServer, WsTransport

CSV_FIELDS = ("scenario", "group_size", "op", "trial", "latency_ms", "traffic_bytes")

DEFAULT_SIZES = (8, 16, 32, 64)
DEFAULT_TRIALS = 5


@dataclass
class BenchRow:
    scenario: str
    group_size: int
    op: str
    trial: int
    latency_ms: float
    traffic_bytes: int

    def as_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "group_size": self.group_size,
            "op": self.op,
            "trial": self.trial,
            "latency_ms": round(self.latency_ms, 3),
            "traffic_bytes": self.traffic_bytes,
        }


class Platform:
    """In-process DS/AS servers plus registered WebSocket clients."""

    def __init__(self):
        self.ds_server = DsServer(port=0).start_background()
        self.as_server = AsServer(port=0).start_background()
        self.ds_url = f"ws://127.0.0.1:{self.ds_server.port}"
        self.as_url = f"ws://127.0.0.1:{self.as_server.port}"
        self._transports = []

    def client(self, name: str) -> Client:
        transport = WsTransport(self.ds_url, self.as_url, name)
        self._transports.append(transport)
        client = Client(
            name,
            transport,
            rand=crypto.DeterministicRand(f"bench:{name}"),
            sleeper=time.sleep,
        )
        client.register()
        return client

    def close(self) -> None:
        for t in self._transports:
            t.close()
        self.ds_server.shutdown()
        self.as_server.shutdown()


def _timed(fn):
    start = time.perf_counter()
    result = fn()
    return (time.perf_counter() - start) * 1000.0, result


def _traffic_delta(client: Client, fn):
    before = client.transport.traffic_bytes_total()
    latency_ms, result = _timed(fn)
    return latency_ms, client.transport.traffic_bytes_total() - before, result


def build_group(platform: Platform, gid: str, names: list, sync_members: bool) -> list:
    """First name owns the group and invites the rest."""
    clients = [platform.client(n) for n in names]
    owner = clients[0]
    owner.create_group(gid)
    for follower in names[1:]:
        verdict = owner.invite(gid, follower)
        if verdict["verdict"] != "passed":
            raise ScenarioSetupError(f"invite of {follower} failed: {verdict}")
    if sync_members:
        for client in clients[1:]:
            client.sync()
        owner.sync()
    return clients


# ---------------------------------------------------------------------------
# scenarios
# ---------------------------------------------------------------------------


def run_micro(sizes=DEFAULT_SIZES, trials=DEFAULT_TRIALS, ops=("SendText", "RenameGroup", "GovStateAnnouncement")) -> list:
    rows = []
    platform = Platform()
    try:
        for n in sizes:
            gid = f"micro{n}"
            names = [f"m{n}u{i:03d}" for i in range(n)]
            owner = build_group(platform, gid, names, sync_members=False)[0]
            for trial in range(trials):
                if "SendText" in ops:
                    latency, traffic, _ = _traffic_delta(
                        owner, lambda: owner.send_text(gid, f"benchmark message {trial:02d}")
                    )
                    rows.append(BenchRow("micro", n, "SendText", trial, latency, traffic))
                if "RenameGroup" in ops:
                    latency, traffic, _ = _traffic_delta(
                        owner, lambda: owner.rename(gid, f"bench name {trial:02d}")
                    )
                    rows.append(BenchRow("micro", n, "RenameGroup", trial, latency, traffic))
                if "GovStateAnnouncement" in ops:
                    latency, traffic, _ = _traffic_delta(owner, lambda: owner.announce(gid))
                    rows.append(BenchRow("micro", n, "GovStateAnnouncement", trial, latency, traffic))
    finally:
        platform.close()
    return rows


def run_vote_macro(sizes=DEFAULT_SIZES, trials=DEFAULT_TRIALS, timeout_s: float = 120.0) -> list:
    """One member proposes a rename; every member votes yes via unordered
    messages; the proposer batches once a deciding set is observed."""
    rows = []
    platform = Platform()
    try:
        for n in sizes:
            gid = f"vote{n}"
            names = [f"v{n}u{i:03d}" for i in range(n)]
            clients = build_group(platform, gid, names, sync_members=True)
            proposer = clients[1 % n]
            for trial in range(trials):
                deadline = time.time() + timeout_s
                target = f"vote outcome {trial:02d}"
                start = time.perf_counter()
                out = proposer.rename(gid, target)
                pid = out["action_id"]
                for c in clients:
                    c.sync()
                voter_traffic = []
                for c in clients:
                    before = c.transport.traffic_bytes_total()
                    c.vote(gid, pid, "yes")
                    voter_traffic.append(c.transport.traffic_bytes_total() - before)
                batch_before = proposer.transport.traffic_bytes_total()
                while proposer.status(gid)["name"] != target:
                    proposer.sync()
                    if time.time() > deadline:
                        raise TimeoutError(f"vote macro n={n} did not complete")
                batch_traffic = proposer.transport.traffic_bytes_total() - batch_before
                latency_ms = (time.perf_counter() - start) * 1000.0
                for c in clients:
                    c.sync()
                    if c.status(gid)["name"] != target:
                        raise TimeoutError(f"member {c.username} missed the outcome")
                rows.append(BenchRow("vote", n, "PollComplete", trial, latency_ms, 0))
                for traffic in voter_traffic:
                    rows.append(BenchRow("vote", n, "VoterBallot", trial, 0.0, traffic))
                rows.append(BenchRow("vote", n, "BatcherCommit", trial, 0.0, batch_traffic))
    finally:
        platform.close()
    return rows


def run_server_load(
    uam_fraction: float = 0.9,
    total_requests: int = 400,
    group_size: int = 8,
    n_groups: int = 2,
) -> list:
    """Mixed unordered/ordered workload; measures achieved request rate and
    ordered-channel retry counts under contention."""
    rows = []
    platform = Platform()
    try:
        groups = []
        for g in range(n_groups):
            gid = f"load{g}"
            names = [f"l{g}u{i:02d}" for i in range(group_size)]
            groups.append((gid, build_group(platform, gid, names, sync_members=True)))
        workers = [c for _, clients in groups for c in clients]
        per_worker = max(1, total_requests // len(workers))

        def work(client: Client, gid: str, count: int, results: list):
            rolls = crypto.DeterministicRand(f"load-mix:{client.username}")
            done = 0
            for i in range(count):
                roll = int.from_bytes(rolls(2), "big") / 65536.0
                try:
                    if roll < uam_fraction:
                        client.send_text(gid, f"load {client.username} {i}")
                    else:
                        client.rename(gid, f"load name {client.username} {i}")
                    done += 1
                except RetriesExhaustedError:
                    continue
            results.append(done)

        results: list = []
        threads = []
        start = time.perf_counter()
        for gid, clients in groups:
            for client in clients:
                t = threading.Thread(target=work, args=(client, gid, per_worker, results))
                threads.append(t)
                t.start()
        for t in threads:
            t.join()
        elapsed = time.perf_counter() - start
        completed = sum(results)
        rps = completed / elapsed if elapsed > 0 else 0.0
        retries = sum(c.commit_retries for _, clients in groups for c in clients)
        rows.append(BenchRow("server", group_size, f"mix{int(uam_fraction * 100)}", 0, elapsed * 1000.0, completed))
        rows.append(BenchRow("server", group_size, "achieved_rps", 0, rps, completed))
        rows.append(BenchRow("server", group_size, "oam_retries", 0, 0.0, retries))
    finally:
        platform.close()
    return rows


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------


def write_csv(rows: list, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row.as_dict())


def mean_by(rows: list, scenario: str, op: str) -> dict:
    """group_size -> mean traffic_bytes for the given scenario/op."""
    acc: dict = {}
    for row in rows:
        if row.scenario == scenario and row.op == op:
            acc.setdefault(row.group_size, []).append(row.traffic_bytes)
    return {n: sum(v) / len(v) for n, v in acc.items()}


def mean_latency_by(rows: list, scenario: str, op: str) -> dict:
    acc: dict = {}
    for row in rows:
        if row.scenario == scenario and row.op == op:
            acc.setdefault(row.group_size, []).append(row.latency_ms)
    return {n: sum(v) / len(v) for n, v in acc.items()}


def linear_fit_r2(points: dict) -> tuple:
    """Least-squares line over {x: y}; returns (slope, intercept, r_squared)."""
    import numpy as np

    xs = np.array(sorted(points))
    ys = np.array([points[x] for x in sorted(points)])
    slope, intercept = np.polyfit(xs, ys, 1)
    predicted = slope * xs + intercept
    ss_res = float(np.sum((ys - predicted) ** 2))
    ss_tot = float(np.sum((ys - np.mean(ys)) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return float(slope), float(intercept), r2


def flatness_ratio(points: dict) -> float:
    """max deviation from the mean, as a fraction of the mean."""
    values = list(points.values())
    mean = sum(values) / len(values)
    if mean == 0:
        return 0.0
    return max(abs(v - mean) for v in values) / mean


def render_figures(rows: list, out_dir: str) -> list:
    """Render the scaling-shape figures next to the CSV; returns file paths."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    os.makedirs(out_dir, exist_ok=True)
    written = []

    micro_ops = [
        ("SendText", "tab:green"),
        ("RenameGroup", "tab:blue"),
        ("GovStateAnnouncement", "tab:orange"),
    ]
    if any(r.scenario == "micro" for r in rows):
        fig, ax = plt.subplots(figsize=(6, 4))
        for op, color in micro_ops:
            points = mean_by(rows, "micro", op)
            if not points:
                continue
            xs = sorted(points)
            ax.plot(xs, [points[x] / 1024 for x in xs], marker="o", color=color, label=op)
        ax.set_xlabel("group size")
        ax.set_ylabel("traffic (KiB)")
        ax.set_title("Per-operation traffic vs group size")
        ax.legend()
        ax.grid(True, linestyle="--", alpha=0.5)
        path = os.path.join(out_dir, "micro_traffic.png")
        fig.savefig(path, dpi=120, bbox_inches="tight")
        plt.close(fig)
        written.append(path)

    if any(r.scenario == "vote" for r in rows):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
        latency = mean_latency_by(rows, "vote", "PollComplete")
        xs = sorted(latency)
        ax1.plot(xs, [latency[x] for x in xs], marker="o", color="tab:red")
        ax1.set_xlabel("group size")
        ax1.set_ylabel("poll completion (ms)")
        ax1.set_title("Vote macro latency")
        ax1.grid(True, linestyle="--", alpha=0.5)
        voter = mean_by(rows, "vote", "VoterBallot")
        batcher = mean_by(rows, "vote", "BatcherCommit")
        xs = sorted(voter)
        ax2.plot(xs, [voter[x] / 1024 for x in xs], marker="o", label="per voter")
        ax2.plot(sorted(batcher), [batcher[x] / 1024 for x in sorted(batcher)], marker="s", label="batcher")
        ax2.set_xlabel("group size")
        ax2.set_ylabel("traffic (KiB)")
        ax2.set_title("Vote traffic")
        ax2.legend()
        ax2.grid(True, linestyle="--", alpha=0.5)
        path = os.path.join(out_dir, "vote_macro.png")
        fig.savefig(path, dpi=120, bbox_inches="tight")
        plt.close(fig)
        written.append(path)

    server_rows = [r for r in rows if r.scenario == "server" and r.op == "achieved_rps"]
    if server_rows:
        fig, ax = plt.subplots(figsize=(5, 4))
        labels = [f"n={r.group_size}" for r in server_rows]
        ax.bar(labels, [r.latency_ms for r in server_rows], color="tab:purple")
        ax.set_ylabel("requests / s")
        ax.set_title("Delivery-service throughput")
        ax.grid(True, axis="y", linestyle="--", alpha=0.5)
        path = os.path.join(out_dir, "server_load.png")
        fig.savefig(path, dpi=120, bbox_inches="tight")
        plt.close(fig)
        written.append(path)

    return written
