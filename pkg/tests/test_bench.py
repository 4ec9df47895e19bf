import csv
import random

import pytest

from ctr.bench import harness, smallbank
from ctr.bench.cli import main as bench_main
from ctr.bench.harness import MiB, BenchRecord
from ctr.errors import NoData


@pytest.mark.parametrize(
    "text, size",
    [("64MiB", 64 * MiB), ("64M", 64 * MiB), ("1GiB", 1 << 30), ("512k", 512 << 10), ("8", 8 * MiB)],
)
def test_parse_size(text, size):
    assert harness.parse_size(text) == size


def test_window_counts_against_brute_force():
    rng = random.Random(1)
    stamps = sorted(rng.uniform(0, 7.5) for _ in range(500))
    duration = 7.5
    counts = harness.per_second_counts(stamps, duration)
    assert counts == [sum(k <= s < k + 1 for s in stamps) for k in range(7)]
    rolling = dict(harness.rolling_average(stamps, duration, step=0.25))
    for t, v in rolling.items():
        assert v == sum(t - 1 < s <= t for s in stamps)


def test_transaction_stream_is_deterministic():
    a = [smallbank.transaction(5, i) for i in range(200)]
    assert a == [smallbank.transaction(5, i) for i in range(200)]
    assert a != [smallbank.transaction(6, i) for i in range(200)]
    assert {t.kind for t in a} == set(range(5))
    assert all(t.a != t.b for t in a)


def test_reference_state_conserves_money():
    bal, flow = smallbank.reference_state(9, 2000)
    assert sum(bal) == 2 * smallbank.N_ACCOUNTS * smallbank.INITIAL_BALANCE + flow


def test_throughput_run_by_transaction_count(tmp_path):
    r = harness.run_throughput_bench(MiB, seed=4, pre_txns=300, post_txns=300, workdir=tmp_path)
    assert r.sequence_ok and r.conserved and r.matches_reference
    assert len(r.commits) >= 600 and r.final_seq == len(r.commits)
    assert r.markers["checkpoint-start"] <= r.markers["checkpoint-end"] <= r.markers["restore-end"]
    kinds = {rec.metric for rec in r.records}
    assert {"marker", "commit"} <= kinds
    again = harness.run_throughput_bench(MiB, seed=4, pre_txns=300, post_txns=300, workdir=tmp_path / "b")
    assert again.commits == r.commits


def test_throughput_run_by_time_is_available(tmp_path):
    r = harness.run_throughput_bench(MiB, seed=2, pre_secs=1.0, post_secs=1.0, workdir=tmp_path)
    assert r.available and r.sequence_ok and r.conserved and r.matches_reference
    assert len(r.per_second) >= 2
    assert {"rolling_txn_per_s", "txn_per_second"} <= {rec.metric for rec in r.records}


def test_sweep_records_and_report(tmp_path):
    sizes = [MiB, 2 * MiB, 4 * MiB]
    recs = harness.run_latency_sweep(sizes, harness.PHASES, runs=2, seed=1, workdir=tmp_path)
    for ph in harness.PHASES:
        for metric in ("checkpoint", "restore"):
            pts = [r for r in recs if r.phase == ph and r.metric == metric]
            assert len(pts) == 6 and all(r.value > 0 for r in pts)
    sizes_bytes = {r.enclave_size: r.value for r in recs if r.phase == "full" and r.metric == "bytes"}
    by_size = [sizes_bytes[s] for s in sizes]
    assert by_size == sorted(by_size) and by_size[2] - by_size[1] == 2 * MiB
    fit = harness.fit_latency(recs, "full", "checkpoint")
    assert fit.n == 3
    text = harness.emit_report(recs, tmp_path / "out")
    assert "sweep full hw checkpoint" in text
    with open(tmp_path / "out" / "sweep.csv") as fh:
        assert tuple(next(csv.reader(fh))) == harness.COLUMNS
    back = harness.read_records(tmp_path / "out" / "sweep.csv")
    assert [(r.run_id, r.metric, r.value) for r in back] == [(r.run_id, r.metric, r.value) for r in recs]


def test_fit_on_exact_line():
    recs = [BenchRecord("sweep", "x", "restore", 0.5 + 0.01 * s, 0, s * MiB, "full") for s in (8, 16, 32, 64)]
    fit = harness.fit_latency(recs, "full", "restore")
    assert fit.slope == pytest.approx(0.01) and fit.intercept == pytest.approx(0.5)
    assert fit.r2 == pytest.approx(1.0)


def test_sweep_argument_errors(tmp_path):
    with pytest.raises(ValueError):
        harness.run_latency_sweep([2 * MiB, MiB], workdir=tmp_path)
    with pytest.raises(ValueError):
        harness.run_latency_sweep([MiB], ["warp"], workdir=tmp_path)
    with pytest.raises(NoData):
        harness.emit_report([], tmp_path)
    with pytest.raises(NoData):
        harness.fit_latency([], "full", "restore")


def test_cli_sweep_and_throughput(tmp_path, capsys):
    assert bench_main(["sweep", "--sizes", "1,2,3", "--runs", "1", "--phase", "full",
                       "--phase", "host-no-buffer", "--out", str(tmp_path / "s")]) == 0
    assert (tmp_path / "s" / "sweep.csv").exists()
    assert bench_main(["throughput", "--size", "1MiB", "--pre-secs", "1", "--post-secs", "1",
                       "--out", str(tmp_path / "t")]) == 0
    out = capsys.readouterr().out
    assert "sequence ok" in out and "availability ok" in out
    assert (tmp_path / "t" / "throughput.csv").exists()


def test_flatness_is_an_equivalence_test():
    flat = [BenchRecord("sweep", "x", "restore", 0.5 + 0.001 * (i % 3), 0, s * MiB, "h")
            for i, s in enumerate((8, 16, 32, 64, 128, 256) * 3)]
    fit = harness.fit_latency(flat, "h", "restore", means=False)
    lo, hi = fit.slope_interval(0.99)
    assert lo < fit.slope < hi
    assert harness.is_flat(fit, 1e-3)
    sloped = [BenchRecord("sweep", "x", "restore", 0.01 * s, 0, s * MiB, "h") for s in (8, 16, 32)]
    assert not harness.is_flat(harness.fit_latency(sloped, "h", "restore"), 1e-3)
