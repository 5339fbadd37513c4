"""Bench-harness smoke tests: CSV schema, fits, figures."""

from __future__ import annotations

import csv
import os

from govchat import bench


def test_micro_csv_schema_and_figures(tmp_path):
    rows = bench.run_micro(sizes=(2, 4), trials=5, ops=("SendText", "RenameGroup"))
    out = tmp_path / "results.csv"
    bench.write_csv(rows, str(out))
    with open(out, newline="") as fh:
        reader = csv.DictReader(fh)
        assert reader.fieldnames == list(bench.CSV_FIELDS)
        parsed = list(reader)
    assert len(parsed) == len(rows) == 2 * 5 * 2
    trials = {r["trial"] for r in parsed if r["op"] == "SendText" and r["group_size"] == "2"}
    assert len(trials) == 5  # at least 5 trials per (size, op)
    figures = bench.render_figures(rows, str(tmp_path))
    assert any(f.endswith("micro_traffic.png") and os.path.getsize(f) > 0 for f in figures)


def test_linear_fit_and_flatness_helpers():
    slope, intercept, r2 = bench.linear_fit_r2({1: 10.0, 2: 20.0, 3: 30.0})
    assert abs(slope - 10.0) < 1e-9 and r2 > 0.999
    assert bench.flatness_ratio({1: 100.0, 2: 100.0}) == 0.0
    assert abs(bench.flatness_ratio({1: 90.0, 2: 110.0}) - 0.1) < 1e-9


def test_server_load_counts_retries_and_rates():
    rows = bench.run_server_load(uam_fraction=1.0, total_requests=60, group_size=2, n_groups=2)
    stats = {r.op: r for r in rows}
    assert stats["achieved_rps"].latency_ms > 0
    assert stats["mix100"].traffic_bytes == 60  # all requests completed
    assert stats["oam_retries"].traffic_bytes == 0  # pure UAM never conflicts
