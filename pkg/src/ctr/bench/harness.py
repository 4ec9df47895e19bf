"""Throughput-around-migration runs, latency sweeps and report output."""

from __future__ import annotations

import csv
import os
import random
import statistics
import tempfile
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np
from scipy import stats

from .. import ctrlib
from ..agent import ORDINARY, SimProcess, checkpoint, restore
from ..agent.process import EXPORT_BUFFER
from ..ctrlib import image as img
from ..enclave import core
from ..enclave.memory import EnclaveConfig, memset
from ..enclave.programs import FN_RUN as COUNTER_RUN
from ..enclave.programs import counter_program
from ..enclave.vm import FN_PLACEHOLDER
from ..errors import NoData
from ..mks import EscrowStore, MigrationKeyService, MksClient, Platform
from .smallbank import (
    FN_INIT,
    FN_RUN,
    INITIAL_BALANCE,
    N_ACCOUNTS,
    SmallBankHost,
    read_state,
    reference_state,
    smallbank_program,
)

MiB = 1 << 20
PHASES = ("full", "enclave-only", "host-only", "host-no-buffer")
MARKERS = ("checkpoint-start", "checkpoint-end", "restore-end")
HOST_REGION_SIZE = 64 << 10


@dataclass
class BenchRecord:
    """One measurement.  Columns of every CSV written by :func:`emit_report`."""

    experiment: str
    run_id: str
    metric: str
    value: float
    timestamp: float = 0.0
    enclave_size: int = 0
    phase: str = ""
    crypto: str = ""


COLUMNS = tuple(f.name for f in fields(BenchRecord))


def config_for_size(size: int, *, debug: bool = False) -> EnclaveConfig:
    """Enclave size is the heap size; the other sections add a fixed ~100 KiB."""
    return EnclaveConfig(heap_size=size, debug=debug)


def parse_size(text: str) -> int:
    """``64MiB``, ``64M``, ``1GiB`` or a bare number of MiB."""
    t = text.strip().lower().replace("ib", "").rstrip("b")
    units = {"k": 1 << 10, "m": MiB, "g": 1 << 30}
    if t and t[-1] in units:
        return int(float(t[:-1]) * units[t[-1]])
    return int(float(t) * MiB)


class LocalEscrow(MksClient):
    """A key service in this process, reached over an attested socket pair."""

    def __init__(self, workdir: Path, platform: Optional[Platform] = None):
        platform = platform or Platform()
        self.store = EscrowStore(Path(workdir) / "escrow.log")
        super().__init__(MigrationKeyService(self.store, platform), platform)

    def close(self) -> None:
        self.store.close()


# -- throughput ----------------------------------------------------------------


@dataclass
class ThroughputResult:
    run_id: str
    seed: int
    enclave_size: int
    commits: list[int]
    stamps: list[float]
    markers: dict[str, float]
    per_second: list[int]
    rolling: list[tuple[float, float]]
    final_seq: int
    conserved: bool
    matches_reference: bool
    records: list[BenchRecord] = field(default_factory=list)

    @property
    def sequence_ok(self) -> bool:
        """Commits are exactly 0, 1, 2, ... with no gap and no duplicate."""
        return self.commits == list(range(len(self.commits)))

    @property
    def available(self) -> bool:
        return bool(self.per_second) and min(self.per_second) >= 1


def per_second_counts(stamps: list[float], duration: float) -> list[int]:
    """Commits in each whole-second window [k, k+1) of the run."""
    whole = int(duration)
    counts = np.bincount(np.floor(np.asarray(stamps, dtype=float)).astype(int), minlength=whole)
    return [int(c) for c in counts[:whole]]


def rolling_average(stamps: list[float], duration: float, step: float = 0.001) -> list[tuple[float, float]]:
    """Transactions in the previous second, sampled every ``step`` from t = 1 s."""
    s = np.asarray(stamps, dtype=float)
    ts = np.arange(1.0, duration + step / 2, step)
    hi = np.searchsorted(s, ts, side="right")
    lo = np.searchsorted(s, ts - 1.0, side="right")
    return list(zip(ts.round(3).tolist(), (hi - lo).astype(float).tolist()))


def _settle(proc: SimProcess, host: SmallBankHost) -> None:
    """Single-step until a commit notice lands, so the heap is between transactions."""
    n = len(host.commits)
    while len(host.commits) == n:
        proc.run(1, slice_steps=1, preempt=False, ocall=host)


def run_throughput_bench(
    enclave_size: int,
    seed: int,
    pre_secs: float = 5.0,
    post_secs: float = 5.0,
    *,
    pre_txns: Optional[int] = None,
    post_txns: Optional[int] = None,
    chunk_steps: int = 4096,
    slice_steps: int = 997,
    provider: str = "hw",
    workdir: Optional[Path] = None,
    escrow=None,
    run_id: Optional[str] = None,
    clock: Callable[[], float] = time.monotonic,
    with_records: bool = True,
) -> ThroughputResult:
    """SmallBank in an enclave, self-migrated between a pre and a post period.

    Periods are wall-clock seconds, or transaction counts when ``pre_txns``
    and ``post_txns`` are given (deterministic logs for a given seed).
    """
    run_id = run_id or f"tp-{seed}"
    own_dir = workdir is None
    tmp = tempfile.TemporaryDirectory(prefix="ctr-bench-") if own_dir else None
    wd = Path(tmp.name) if tmp else Path(workdir)
    local = None
    if escrow is None:
        local = escrow = LocalEscrow(wd)
    try:
        host = SmallBankHost(seed)
        proc = SimProcess(manifest_path=wd / f"{run_id}.manifest", escrow=escrow)
        idx = proc.create_enclave(smallbank_program(), config_for_size(enclave_size, debug=True), provider)
        e = proc.enclave(idx)
        init = proc.start_thread(idx, FN_INIT, (INITIAL_BALANCE,))
        while init.state == "running":
            proc.run(1 << 16, ocall=host)
        ctrlib.prepare_migration(e, provider=provider)
        proc.host.host_prepare()
        proc.start_thread(idx, FN_RUN)

        t0 = clock()
        host.clock = lambda: clock() - t0

        def drive(p: SimProcess, until_secs: float, until_txns: Optional[int]) -> None:
            if until_txns is not None:
                while len(host.commits) < until_txns:
                    p.run(chunk_steps, slice_steps=slice_steps, ocall=host)
                return
            while clock() - t0 < until_secs:
                p.run(chunk_steps, slice_steps=slice_steps, ocall=host)

        drive(proc, pre_secs, pre_txns)
        markers = {"checkpoint-start": clock() - t0}
        image_path = wd / f"{run_id}.img"
        checkpoint(proc, image_path)
        markers["checkpoint-end"] = clock() - t0
        proc = restore(image_path, escrow, manifest_path=proc.manifest_path)
        markers["restore-end"] = clock() - t0
        os.unlink(image_path)
        if post_txns is not None:
            drive(proc, 0.0, len(host.commits) + post_txns)
        else:
            drive(proc, markers["restore-end"] + post_secs, None)
        duration = clock() - t0
        _settle(proc, host)

        heap = np.frombuffer(proc.enclave(idx).debug_read("heap", 0, 8 * (16 + 2 * N_ACCOUNTS)), dtype="<u8")
        seq, flow, bal = read_state([int(w) for w in heap])
        conserved = sum(bal) == 2 * N_ACCOUNTS * INITIAL_BALANCE + flow
        ref_bal, ref_flow = reference_state(seed, seq)
        matches = seq == len(host.commits) and bal == ref_bal and flow == ref_flow
        proc.terminate()

        stamps = host.stamps[: len(host.commits)]
        result = ThroughputResult(
            run_id=run_id,
            seed=seed,
            enclave_size=enclave_size,
            commits=list(host.commits),
            stamps=list(stamps),
            markers=markers,
            per_second=per_second_counts(stamps, duration),
            rolling=rolling_average(stamps, duration),
            final_seq=seq,
            conserved=conserved,
            matches_reference=matches,
        )
        if with_records:
            result.records = throughput_records(result)
        return result
    finally:
        if local is not None:
            local.close()
        if tmp is not None:
            tmp.cleanup()


def throughput_records(r: ThroughputResult) -> list[BenchRecord]:
    def rec(metric, value, ts=0.0, phase=""):
        return BenchRecord("throughput", r.run_id, metric, value, ts, r.enclave_size, phase)

    out = [rec("marker", 0.0, r.markers[m], m) for m in MARKERS]
    out += [rec("commit", float(seq), ts) for seq, ts in zip(r.commits, r.stamps)]
    out += [rec("rolling_txn_per_s", v, ts) for ts, v in r.rolling]
    out += [rec("txn_per_second", float(c), float(k)) for k, c in enumerate(r.per_second)]
    return out


# -- latency sweep ---------------------------------------------------------------


def _export_size(size: int) -> int:
    cfg = config_for_size(size)
    plain = cfg.data_size + cfg.heap_size + cfg.stack_size * cfg.max_threads + cfg.ssa_size
    return img.header_size(cfg.max_threads) + plain + img.TAG_SIZE


def _time(fn) -> float:
    t = time.perf_counter()
    fn()
    return time.perf_counter() - t


def _measure_full(size: int, crypto: str, wd: Path, escrow) -> dict[str, float]:
    proc = SimProcess(manifest_path=wd / "full.manifest", escrow=escrow)
    idx = proc.create_enclave(counter_program(), config_for_size(size), crypto)
    ctrlib.prepare_migration(proc.enclave(idx), provider=crypto)
    proc.host.host_prepare()
    proc.start_thread(idx, COUNTER_RUN)
    proc.run(5000)
    image_path = wd / "full.img"
    t_ckpt = _time(lambda: checkpoint(proc, image_path))
    box = {}
    t_rest = _time(lambda: box.setdefault("p", restore(image_path, escrow, manifest_path=proc.manifest_path)))
    nbytes = proc.host.enclaves[idx].receipt.byte_count
    box["p"].terminate()
    os.unlink(image_path)
    return {"checkpoint": t_ckpt, "restore": t_rest, "bytes": float(nbytes)}


def _measure_enclave_only(size: int, crypto: str, wd: Path, escrow) -> dict[str, float]:
    prog, cfg = counter_program(), config_for_size(size)
    src = core.create_enclave(prog, cfg)
    ctrlib.prepare_migration(src, provider=crypto)
    tid = core.ecall(src, COUNTER_RUN).thread_id
    core.step_guest(src, tid, 5000)
    core.interrupt_thread(src, tid)
    buf = bytearray(ctrlib.required_export_size(src))
    memset(buf, 0)
    out = {}
    out["checkpoint"] = _time(lambda: ctrlib.enclave_export_all(src, buf, escrow=escrow))
    out["destroy"] = _time(lambda: core.destroy_enclave(src))
    box = {}
    out["create"] = _time(lambda: box.setdefault("e", core.create_enclave(prog, cfg)))
    dst = box["e"]
    ctrlib.prepare_migration(dst, provider=crypto)
    core.ecall(dst, FN_PLACEHOLDER, (), thread_id=tid)
    core.interrupt_thread(dst, tid)
    out["restore"] = _time(lambda: ctrlib.enclave_import_all(dst, buf, escrow))
    out["bytes"] = float(len(buf))
    core.destroy_enclave(dst)
    return out


def _measure_host(size: int, wd: Path, with_buffer: bool) -> dict[str, float]:
    proc = SimProcess()
    proc.alloc_region("heap", HOST_REGION_SIZE, ORDINARY)
    nbytes = 0
    if with_buffer:
        nbytes = _export_size(size)
        memset(proc.alloc_region("export-buffer-0", nbytes, EXPORT_BUFFER), 0)
    image_path = wd / "host.img"
    t_ckpt = _time(lambda: checkpoint(proc, image_path))
    t_rest = _time(lambda: restore(image_path, None))
    os.unlink(image_path)
    return {"checkpoint": t_ckpt, "restore": t_rest, "bytes": float(nbytes)}


def run_latency_sweep(
    sizes: Iterable[int],
    phases: Iterable[str] = ("full",),
    crypto: str = "hw",
    runs: int = 10,
    *,
    seed: int = 0,
    workdir: Optional[Path] = None,
    on_point: Optional[Callable[[BenchRecord], None]] = None,
) -> list[BenchRecord]:
    """Latency of each phase at each size, ``runs`` repetitions per point.

    Points are visited in a seeded random order so slow drift of the
    machine does not masquerade as a size trend.  A point that runs out of
    memory is reported with metric ``error`` and the sweep carries on.
    """
    sizes = list(sizes)
    if sizes != sorted(sizes):
        raise ValueError("sizes must be ascending")
    phases = list(phases)
    for ph in phases:
        if ph not in PHASES:
            raise ValueError(f"unknown phase {ph!r} (choose from {', '.join(PHASES)})")
    points = [(ph, s, r) for ph in phases for s in sizes for r in range(runs)]
    random.Random(seed).shuffle(points)
    tmp = tempfile.TemporaryDirectory(prefix="ctr-sweep-") if workdir is None else None
    wd = Path(tmp.name) if tmp else Path(workdir)
    escrow = LocalEscrow(wd)
    records: list[BenchRecord] = []
    try:
        for ph, size, r in points:
            run_id = f"{ph}-{size // MiB}MiB-{r}"
            try:
                if ph == "full":
                    m = _measure_full(size, crypto, wd, escrow)
                elif ph == "enclave-only":
                    m = _measure_enclave_only(size, crypto, wd, escrow)
                else:
                    m = _measure_host(size, wd, with_buffer=ph == "host-only")
            except MemoryError:
                m = {"error": 1.0}
            for metric, value in m.items():
                rec = BenchRecord("sweep", run_id, metric, value, time.time(), size, ph, crypto)
                records.append(rec)
                if on_point:
                    on_point(rec)
    finally:
        escrow.close()
        if tmp:
            tmp.cleanup()
    return records


# -- analysis and report -----------------------------------------------------------


@dataclass
class Fit:
    slope: float
    intercept: float
    r2: float
    p_value: float
    n: int
    stderr: float = 0.0

    def slope_interval(self, confidence: float = 0.99) -> tuple[float, float]:
        half = stats.t.ppf(0.5 + confidence / 2, self.n - 2) * self.stderr
        return self.slope - half, self.slope + half


def is_flat(fit: Fit, margin: float, confidence: float = 0.99) -> bool:
    """Equivalence test: the slope's confidence interval lies inside +/- margin."""
    lo, hi = fit.slope_interval(confidence)
    return -margin < lo and hi < margin


def fit_latency(records: list[BenchRecord], phase: str, metric: str, *, means: bool = True) -> Fit:
    """Least-squares fit of latency (s) against enclave size (MiB)."""
    pts = [(r.enclave_size / MiB, r.value) for r in records if r.phase == phase and r.metric == metric]
    if means:
        by = defaultdict(list)
        for x, y in pts:
            by[x].append(y)
        pts = [(x, statistics.fmean(ys)) for x, ys in sorted(by.items())]
    if len(pts) < 3:
        raise NoData(f"need at least 3 points for {phase}/{metric}")
    x, y = np.array(pts).T
    res = stats.linregress(x, y)
    return Fit(
        float(res.slope), float(res.intercept), float(res.rvalue**2), float(res.pvalue), len(pts), float(res.stderr)
    )


def summarize(records: list[BenchRecord]) -> str:
    lines = []
    groups = defaultdict(list)
    for r in records:
        groups[(r.experiment, r.phase if r.experiment == "sweep" else "", r.crypto, r.metric)].append(r)
    for (exp, phase, crypto, metric), rs in sorted(groups.items()):
        if metric in ("commit", "rolling_txn_per_s", "marker", "error"):
            continue
        if exp == "sweep":
            by = defaultdict(list)
            for r in rs:
                by[r.enclave_size].append(r.value)
            med = ", ".join(f"{s // MiB}MiB={statistics.median(v):.4g}" for s, v in sorted(by.items()))
            line = f"{exp} {phase} {crypto} {metric}: median {med}"
            if len(by) >= 3 and metric != "bytes":
                f = fit_latency(rs, phase, metric)
                line += f"; slope {f.slope * 1e3:.4g} ms/MiB, R^2 {f.r2:.4f}, p {f.p_value:.3g}"
            lines.append(line)
        else:
            vals = [r.value for r in rs]
            lines.append(f"{exp} {metric}: median {statistics.median(vals):.4g}, min {min(vals):.4g}, n {len(vals)}")
    return "\n".join(lines)


def emit_report(records: list[BenchRecord], out_dir: str | os.PathLike) -> str:
    """One CSV per experiment (columns ``COLUMNS``) plus ``summary.txt``."""
    if not records:
        raise NoData("no benchmark records to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    by_exp = defaultdict(list)
    for r in records:
        by_exp[r.experiment].append(r)
    for exp, rs in sorted(by_exp.items()):
        with open(out / f"{exp}.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=COLUMNS, lineterminator="\n")
            w.writeheader()
            for r in rs:
                w.writerow(asdict(r))
    text = summarize(records)
    (out / "summary.txt").write_text(text + "\n")
    return text


def read_records(path: str | os.PathLike) -> list[BenchRecord]:
    with open(path, newline="") as fh:
        return [
            BenchRecord(
                experiment=row["experiment"],
                run_id=row["run_id"],
                metric=row["metric"],
                value=float(row["value"]),
                timestamp=float(row["timestamp"]),
                enclave_size=int(row["enclave_size"]),
                phase=row["phase"],
                crypto=row["crypto"],
            )
            for row in csv.DictReader(fh)
        ]
