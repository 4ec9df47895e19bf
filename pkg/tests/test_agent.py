import pytest

from conftest import counter_process, small_config
from ctr import ctrlib, policy
from ctr.agent import ENCLAVE, ProcessImage, RestorerPlan, SimProcess, checkpoint, restore, self_migrate
from ctr.enclave.programs import FN_RUN, counter_program
from ctr.errors import (
    AccessViolation,
    AlreadyReleased,
    CorruptProcessImage,
    ManifestMissing,
    PolicyDenied,
    ResumeBlocked,
    exit_code_for,
)
from ctr.enclave import core


def test_checkpoint_restore_continues_the_counter(escrow, tmp_path):
    proc = counter_process(escrow, tmp_path, steps=5000)
    before = proc.enclave().debug_heap_word(0)
    image = checkpoint(proc, tmp_path / "img")
    assert not proc.alive and proc.enclave().destroyed
    assert all(tag != ENCLAVE for tag, _ in image.regions.values())
    new = restore(tmp_path / "img", escrow, manifest_path=tmp_path / "m2")
    assert new.pid == proc.pid
    assert new.enclave().debug_heap_word(0) >= before
    assert [t.state for t in new.threads] == ["running"]
    start = new.enclave().debug_heap_word(0)
    new.run(1000)
    assert new.enclave().debug_heap_word(0) > start


def test_restored_state_equals_source_state(escrow, tmp_path):
    proc = counter_process(escrow, tmp_path, threads=2, steps=3000)
    e = proc.enclave()
    proc.seize()
    # registers are saved in the SSA; compare memory plus the saved frames
    src_mem = [bytes(e.memory.heap.buf)] + [bytes(s.buf) for s in e.memory.stacks] + [bytes(e.memory.ssa.buf)]
    proc.host.flags.reset()
    proc.host.parked.clear()
    for t in e.worker_tids:
        core.eresume(e, t)
    proc.unseize()
    checkpoint(proc, tmp_path / "img")
    new = restore(tmp_path / "img", escrow)
    d = new.enclave()
    assert bytes(d.memory.heap.buf) == src_mem[0]
    assert [bytes(s.buf) for s in d.memory.stacks] == src_mem[1:3]


def test_image_has_no_enclave_memory_and_dumper_is_refused(escrow, tmp_path):
    proc = counter_process(escrow, tmp_path)
    with pytest.raises(AccessViolation):
        checkpoint(proc, tmp_path / "img", enlightened=False)
    # the failed attempt released the process; it still runs
    assert proc.alive and not proc.seized
    proc.run(100)
    with pytest.raises(AccessViolation):
        proc.region("enclave-0")


def test_default_gate_blocks_source(escrow, tmp_path):
    proc = counter_process(escrow, tmp_path)
    e = proc.enclave()
    checkpoint(proc, tmp_path / "img")
    for t in e.worker_tids:
        with pytest.raises(ResumeBlocked):
            core.eresume(e, t)
    assert e.destroyed


def test_fork_opt_in_runs_both(escrow, tmp_path):
    proc = counter_process(escrow, tmp_path, fork_allowed=True)
    checkpoint(proc, tmp_path / "img")
    assert proc.alive and not proc.enclave().destroyed
    copy = restore(tmp_path / "img", escrow)
    a0, b0 = proc.enclave().debug_heap_word(0), copy.enclave().debug_heap_word(0)
    proc.run(600)
    copy.run(600)
    assert proc.enclave().debug_heap_word(0) > a0 and copy.enclave().debug_heap_word(0) > b0


def test_second_restore_is_refused_and_leaves_nothing_running(escrow, tmp_path, monkeypatch):
    from ctr.agent import migrate

    proc = counter_process(escrow, tmp_path)
    checkpoint(proc, tmp_path / "img")
    restore(tmp_path / "img", escrow)
    made = []

    class Spy(SimProcess):
        def __post_init__(self):
            super().__post_init__()
            made.append(self)

    monkeypatch.setattr(migrate, "SimProcess", Spy)
    with pytest.raises(AlreadyReleased) as err:
        restore(tmp_path / "img", escrow)
    assert exit_code_for(err.value) == 3
    (aborted,) = made
    assert not aborted.alive
    assert all(he.enclave.destroyed for he in aborted.host.enclaves)
    assert all(t.state != "running" for t in aborted.threads)


def test_migration_limit_via_agent(escrow, tmp_path):
    proc = SimProcess(manifest_path=tmp_path / "m", escrow=escrow)
    idx = proc.create_enclave(counter_program(), small_config())
    ctrlib.prepare_migration(proc.enclave(idx))
    policy.register_policy(proc.enclave(idx), policy.migration_limit_policy(1))
    proc.host.host_prepare()
    proc.start_thread(idx, FN_RUN)
    proc.run(100)
    proc = self_migrate(proc, tmp_path / "a")
    assert policy.remaining_migrations(proc.enclave()) == 0
    with pytest.raises(PolicyDenied) as err:
        self_migrate(proc, tmp_path / "b")
    assert exit_code_for(err.value) == 2


def test_missing_manifest(escrow):
    proc = SimProcess(escrow=escrow)
    proc.create_enclave(counter_program(), small_config())
    with pytest.raises(ManifestMissing):
        checkpoint(proc, "/tmp/never-written")


def test_plain_process_round_trip(tmp_path):
    proc = SimProcess()
    proc.alloc_region("heap", 4096)[:5] = b"hello"
    proc.resources[7] = "/var/log/app.log"
    checkpoint(proc, tmp_path / "img")
    new = restore(tmp_path / "img", None)
    assert new.read_region("heap")[:5] == b"hello"
    assert new.resources[7] == "/var/log/app.log"


def test_process_image_round_trip_and_corruption(escrow, tmp_path):
    proc = counter_process(escrow, tmp_path)
    image = checkpoint(proc, tmp_path / "img")
    raw = (tmp_path / "img").read_bytes()
    again = ProcessImage.decode(raw)
    assert again.meta == image.meta and again.staged == image.staged
    assert {k: (t, bytes(d)) for k, (t, d) in again.regions.items()} == {
        k: (t, bytes(d)) for k, (t, d) in image.regions.items()
    }
    for bad in (raw[:-1], raw[:3], b"XXXX" + raw[4:], raw + b"\0"):
        with pytest.raises(CorruptProcessImage):
            ProcessImage.decode(bad)
    flipped = bytearray(raw)
    flipped[len(raw) // 2] ^= 1
    with pytest.raises(CorruptProcessImage) as err:
        ProcessImage.decode(bytes(flipped))
    assert exit_code_for(err.value) == 4
    with pytest.raises(FileNotFoundError):
        ProcessImage.read(tmp_path / "missing")


def test_restorer_plan_skips_completed_steps():
    calls = []
    fail = {"b": 1}

    def step(name):
        def fn():
            calls.append(name)
            if fail.get(name):
                fail[name] -= 1
                raise OSError("transient")

        return fn

    plan = RestorerPlan([(n, step(n)) for n in "abc"])
    with pytest.raises(OSError):
        plan.run()
    plan.run()
    assert calls == ["a", "b", "b", "c"] and plan.completed == ["a", "b", "c"]
