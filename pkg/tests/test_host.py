import itertools
import random

import pytest

from conftest import counter_process, small_config
from ctr import ctrlib
from ctr.agent import SimProcess
from ctr.enclave import core
from ctr.enclave.core import ThreadState
from ctr.enclave.programs import register_program
from ctr.enclave.vm import assemble
from ctr.errors import (
    ExportInProgress,
    ManifestError,
    ManifestMissing,
    MigrationInProgress,
    NotStaged,
)
from ctr.host import (
    MANIFEST_ORDER,
    PARKED,
    StagedEnclave,
    decode_staged,
    encode_staged,
    parse_manifest,
    read_manifest,
    should_park,
)
from ctr.host import model


def test_should_park_truth_table():
    for m, h, a in itertools.product([False, True], repeat=3):
        assert should_park(m, h, a) == (m and not h and not a)


def test_model_explores_without_violations():
    r = model.explore(3, 6)
    assert r.violations == []
    assert r.states == 60 and r.sequences == 204_750


def test_model_catches_rule_that_ignores_entered_flag():
    r = model.explore(2, 5, park=lambda m, h, a: m and not a)
    assert any("migration thread parked" in msg for _, msg in r.violations)


def test_model_catches_rule_that_never_parks():
    r = model.explore(2, 5, park=lambda m, h, a: False)
    assert any("still inside" in msg or "lost" in msg for _, msg in r.violations)


def test_model_catches_rule_that_never_releases():
    r = model.explore(2, 5, park=lambda m, h, a: m)
    assert r.violations


# -- conformance of the model with the real runtime ------------------------------

GATED_ASM = """
; worker t spins until heap word t becomes non-zero, then returns
.entry 1 wait
wait:
    ld   r1, r0
    br   z, r1, wait
    halt
"""


def gated_program():
    return register_program(assemble(GATED_ASM, name="gated-spin"))


class Real:
    def __init__(self, n, tmp_path, escrow):
        self.proc = SimProcess(manifest_path=tmp_path / "m", escrow=escrow)
        self.idx = self.proc.create_enclave(gated_program(), small_config(max_threads=n))
        self.e = self.proc.enclave(self.idx)
        ctrlib.prepare_migration(self.e)
        self.host = self.proc.host
        self.host.host_prepare()

    def enter(self, t):
        self.e.debug_write("heap", 8 * t, bytes(8))
        self.host.ecall(self.idx, 1, (t,), thread_id=t)
        core.step_guest(self.e, t, 3)

    def apply(self, ev):
        h = self.host
        if ev == "M":
            h.flags.set_migrating()
        elif ev == "C":
            h.capture_threads()
        elif ev == "HX":
            h.export_all_wrapper()
        elif ev in ("G", "D"):
            h.gate_resume(fork_allowed=ev == "G")
        else:
            kind, t = ev.split(":")
            t = int(t)
            if kind == "aex":
                h.preempt(self.idx, t)
            elif kind == "ret":
                self.e.debug_write("heap", 8 * t, (1).to_bytes(8, "little"))
                core.step_guest(self.e, t, 10)
            elif kind == "in":
                self.enter(t)

    def workers(self):
        if self.e.destroyed:
            return tuple(model.DEAD for _ in self.e.worker_tids)
        out = []
        for t in self.e.worker_tids:
            if (self.idx, t) in self.host.parked:
                out.append(model.PARKED)
            elif self.e.tcs[t].state == ThreadState.IN_ENCLAVE:
                out.append(model.IN)
            else:
                out.append(model.OUT)
        return tuple(out)

    def flags(self):
        return self.host.flags.snapshot()


def test_runtime_conforms_to_model(tmp_path, escrow):
    rng = random.Random(3)
    n = 3
    gated = 0
    for case in range(150):
        real = Real(n, tmp_path / str(case), escrow)
        init = [rng.random() < 0.5 for _ in range(n)]
        for t, inside in enumerate(init):
            if inside:
                real.enter(t)
        s = model.ModelState(False, False, False, tuple(model.IN if i else model.OUT for i in init), model.OUT)
        assert real.workers() == s.workers
        for _ in range(rng.randint(0, 8)):
            ev = rng.choice(["M", "C"] + [f"{k}:{t}" for k in ("aex", "ret", "in") for t in range(n)])
            nxt = model.step(s, ev)
            if nxt is None:
                continue
            s = nxt
            real.apply(ev)
            assert real.workers() == s.workers, (case, ev)
            assert real.flags() == (s.m, s.h, s.a)
        if not s.m:
            s = model.step(s, "M")
            real.apply("M")
        s = model.step(model.step(s, "H"), "X")
        real.apply("HX")
        assert real.workers() == s.workers
        gate = rng.choice(["G", "D"])
        s = model.step(s, gate)
        real.apply(gate)
        assert real.workers() == s.workers
        assert real.flags() == (s.m, s.h, s.a)
        assert model.PARKED not in s.workers
        gated += 1
    assert gated == 150


# -- runtime ---------------------------------------------------------------------


def test_host_prepare_writes_manifest_and_staged(escrow, tmp_path):
    proc = counter_process(escrow, tmp_path, steps=0)
    assert set(proc.resources.values()).isdisjoint({"stdin", "stdout", "stderr", "/dev/sgx_enclave"})
    entries = read_manifest(tmp_path / "manifest")
    assert [n for n, _ in entries] == list(MANIFEST_ORDER)
    assert all(proc.registry[tok] for _, tok in entries)
    staged = decode_staged(proc.host.staged_path.read_bytes())
    assert staged[0].program == "counter" and staged[0].config == proc.enclave().config
    buf = proc.region(staged[0].buffer_token)
    assert len(buf) == ctrlib.required_export_size(proc.enclave())


def test_staged_encoding_round_trip():
    items = [
        StagedEnclave("counter", small_config(), "hw", "export-buffer-0"),
        StagedEnclave("other", small_config(data_init=b"abc", ssa_depth=2), "sw", "export-buffer-1"),
    ]
    assert decode_staged(encode_staged(items)) == items
    with pytest.raises(ManifestError):
        decode_staged(encode_staged(items)[:-3])
    with pytest.raises(ManifestError):
        decode_staged(b"NOPE" + encode_staged(items)[4:])


def test_manifest_parsing():
    assert parse_manifest("# comment\n\na=b\n c = d \n") == [("a", "b"), ("c", "d")]
    with pytest.raises(ManifestError):
        parse_manifest("no-equals-sign\n")
    with pytest.raises(ManifestMissing):
        read_manifest("/nonexistent/manifest")


def test_export_without_staging(escrow):
    proc = SimProcess(escrow=escrow)
    proc.create_enclave(gated_program(), small_config())
    with pytest.raises(NotStaged):
        proc.host.export_all_wrapper()


def test_gate_before_export(escrow, tmp_path):
    proc = counter_process(escrow, tmp_path)
    with pytest.raises(ExportInProgress):
        proc.host.gate_resume()


def test_capture_parks_every_thread_inside(escrow, tmp_path):
    proc = counter_process(escrow, tmp_path, threads=2, steps=2000)
    parked = proc.seize()
    e = proc.enclave()
    assert parked == 2 and proc.host.parked == {(0, 0), (0, 1)}
    assert all(e.tcs[t].state == ThreadState.INTERRUPTED for t in e.worker_tids)
    counter = e.debug_heap_word(0)
    with pytest.raises(MigrationInProgress):
        proc.host.ecall(0, 1)
    assert e.debug_heap_word(0) == counter
    # a parked thread's trampoline keeps it parked while migrating
    assert proc.host.trampoline(0, 0) == PARKED


def test_migration_thread_survives_preemption(escrow, tmp_path):
    proc = counter_process(escrow, tmp_path, threads=2)
    stages = []

    def preempt(enclave, stage):
        stages.append(stage)
        core.interrupt_thread(enclave, enclave.migration_tid)

    proc.host.export_preempt = preempt
    assert proc.host.export_all_wrapper()
    assert stages == ["poisoned", "serialized", "encrypted"]
    assert proc.host.flags.snapshot() == (True, True, False)


def test_failed_export_releases_threads(tmp_path):
    class Down:
        def deposit(self, *a):
            raise ConnectionRefusedError("no service")

    proc = counter_process(Down(), tmp_path, threads=2)
    with pytest.raises(ConnectionRefusedError):
        proc.host.export_all_wrapper()
    e = proc.enclave()
    assert proc.host.parked == set() and proc.host.flags.snapshot() == (False, False, False)
    assert all(e.tcs[t].state == ThreadState.IN_ENCLAVE for t in e.worker_tids)
    before = e.debug_heap_word(0)
    proc.sync_threads()
    proc.run(500)
    assert e.debug_heap_word(0) > before


def test_multi_enclave_partial_failure_destroys_exported(tmp_path):
    calls = []

    class FailSecond:
        def deposit(self, enclave, image_id, key):
            calls.append(image_id)
            if len(calls) == 2:
                raise ConnectionResetError("dropped")

    proc = SimProcess(manifest_path=tmp_path / "m", escrow=FailSecond())
    for _ in range(2):
        idx = proc.create_enclave(gated_program(), small_config())
        ctrlib.prepare_migration(proc.enclave(idx))
    proc.host.host_prepare()
    with pytest.raises(ConnectionResetError):
        proc.host.export_all_wrapper()
    assert proc.enclave(0).destroyed and not proc.enclave(1).destroyed
