import pytest

from conftest import small_config
from ctr.enclave import core
from ctr.enclave.core import ThreadState
from ctr.enclave.memory import MAX_ENCLAVE_SIZE, EnclaveConfig, SsaFrame
from ctr.enclave.programs import FN_RUN, FN_RUN_BOUNDED, counter_program
from ctr.enclave.vm import assemble
from ctr.errors import (
    AlreadyEntered,
    AssemblyError,
    DebugAccessDenied,
    EnclaveDestroyed,
    GuestFault,
    NoSavedFrame,
    NotInEnclave,
    SizeOverflow,
    SsaFull,
    UnknownFunction,
    ZeroSizeSection,
)

MiB = 1 << 20


def test_fresh_enclave_state(enclave):
    assert all(enclave.state_of(t) == ThreadState.OUTSIDE for t in range(len(enclave.tcs)))
    assert all(t.cssa == 0 for t in enclave.tcs)
    assert enclave.migration_tid == enclave.config.max_threads
    assert not enclave.destroyed


def test_sections_are_disjoint_and_ordered(enclave):
    secs = enclave.memory.sections()
    names = [s.name for s in secs]
    assert names == ["code", "data", "heap", "stack0", "stack1", "ssa", "reserve"]
    for a, b in zip(secs, secs[1:]):
        assert a.end <= b.base
    assert enclave.size == sum(s.size for s in secs)


def test_measurement_is_deterministic_and_sensitive():
    p, c = counter_program(), small_config()
    m = core.compute_measurement(p, c)
    assert m == core.compute_measurement(counter_program(), small_config())
    assert m != core.compute_measurement(p, small_config(heap_size=c.heap_size + 8))
    assert m != core.compute_measurement(p, small_config(data_init=b"\x01"))
    other = assemble(counter_program_source_with_one_byte_changed(), name="counter")
    assert m != core.compute_measurement(other, c)


def counter_program_source_with_one_byte_changed() -> str:
    from ctr.enclave.programs import COUNTER_ASM

    return COUNTER_ASM.replace("li   r2, 1", "li   r2, 2", 1)


@pytest.mark.parametrize("size", [8 * MiB, 64 * MiB])
def test_large_sizes_create(size):
    e = core.create_enclave(counter_program(), EnclaveConfig(heap_size=size))
    assert e.memory.heap.size == size
    core.destroy_enclave(e)


@pytest.mark.slow
def test_one_gib_enclave_creates():
    e = core.create_enclave(counter_program(), EnclaveConfig(heap_size=1024 * MiB, max_threads=1))
    assert e.size > 1024 * MiB
    core.destroy_enclave(e)


@pytest.mark.parametrize(
    "kw, exc",
    [
        (dict(heap_size=0), ZeroSizeSection),
        (dict(heap_size=4096, stack_size=0), ZeroSizeSection),
        (dict(heap_size=4096, max_threads=0), ZeroSizeSection),
        (dict(heap_size=4097), ZeroSizeSection),
        (dict(heap_size=MAX_ENCLAVE_SIZE), SizeOverflow),
    ],
)
def test_invalid_configs(kw, exc):
    with pytest.raises(exc):
        core.create_enclave(counter_program(), EnclaveConfig(**kw))


def test_unknown_function(enclave):
    with pytest.raises(UnknownFunction):
        core.ecall(enclave, 99)


def test_ecall_twice_on_same_tcs(enclave):
    core.ecall(enclave, FN_RUN, thread_id=0)
    with pytest.raises(AlreadyEntered):
        core.ecall(enclave, FN_RUN, thread_id=0)


def test_guest_code_refused_on_migration_tcs(enclave):
    with pytest.raises(UnknownFunction):
        core.ecall(enclave, FN_RUN, thread_id=enclave.migration_tid)


def test_interrupt_requires_thread_inside(enclave):
    with pytest.raises(NotInEnclave):
        core.interrupt_thread(enclave, 0)


def test_eresume_without_frame(enclave):
    with pytest.raises(NoSavedFrame):
        core.eresume(enclave, 0)


def test_nested_entry_beyond_ssa_depth(enclave):
    tid = core.ecall(enclave, FN_RUN).thread_id
    core.interrupt_thread(enclave, tid)
    with pytest.raises(SsaFull):
        core.ecall(enclave, FN_RUN, thread_id=tid)


def test_debug_access_needs_debug_enclave():
    e = core.create_enclave(counter_program(), small_config(debug=False))
    with pytest.raises(DebugAccessDenied):
        e.debug_heap_word(0)


def test_aex_saves_frame_and_clears_registers(enclave):
    tid = core.ecall(enclave, FN_RUN).thread_id
    core.step_guest(enclave, tid, 1234)
    before = enclave.cpus[tid].snapshot()
    ev = core.interrupt_thread(enclave, tid)
    assert ev.cssa == 1 and ev.instruction_pointer == before[0]
    assert ev.host_registers == (0,) * 8
    assert enclave.host_registers(tid) == (0,) * 8
    frame = SsaFrame.decode(enclave.memory.ssa.buf[: 128])
    assert (frame.instruction_pointer, frame.general_registers) == (before[0], before[3])
    core.eresume(enclave, tid)
    assert enclave.cpus[tid].snapshot() == before
    assert enclave.tcs[tid].cssa == 0


def test_counter_continues_across_aex(enclave):
    tid = core.ecall(enclave, FN_RUN_BOUNDED, (100,)).thread_id
    # each loop iteration is five instructions after a two-instruction prologue
    core.step_guest(enclave, tid, 2 + 5 * 42)
    assert enclave.debug_heap_word(0) == 42
    core.interrupt_thread(enclave, tid)
    core.eresume(enclave, tid)
    core.step_guest(enclave, tid, 5)
    assert enclave.debug_heap_word(0) == 43


def test_bounded_counter_halts(enclave):
    tid = core.ecall(enclave, FN_RUN_BOUNDED, (10,)).thread_id
    status = core.step_guest(enclave, tid, 10_000)
    assert status.status == "Halted"
    assert enclave.debug_heap_word(0) == 10
    assert enclave.state_of(tid) == ThreadState.OUTSIDE
    with pytest.raises(NotInEnclave):
        core.step_guest(enclave, tid, 1)


def test_zero_steps_is_identity(enclave):
    tid = core.ecall(enclave, FN_RUN).thread_id
    core.step_guest(enclave, tid, 50)
    before = (enclave.cpus[tid].snapshot(), bytes(enclave.memory.heap.buf))
    assert core.step_guest(enclave, tid, 0).steps == 0
    assert (enclave.cpus[tid].snapshot(), bytes(enclave.memory.heap.buf)) == before


def test_split_execution_equals_straight_execution():
    def run(split):
        e = core.create_enclave(counter_program(), small_config())
        tid = core.ecall(e, FN_RUN).thread_id
        if split:
            core.step_guest(e, tid, 5)
            core.interrupt_thread(e, tid)
            core.eresume(e, tid)
            core.step_guest(e, tid, 5)
        else:
            core.step_guest(e, tid, 10)
        return e.cpus[tid].snapshot(), bytes(e.memory.heap.buf)

    assert run(True) == run(False)


def test_destroy_zeroes_memory_and_refuses_everything(enclave):
    tid = core.ecall(enclave, FN_RUN).thread_id
    core.step_guest(enclave, tid, 1000)
    core.destroy_enclave(enclave)
    assert not any(core.inspect_memory(enclave))
    assert all(t.state == ThreadState.DESTROYED for t in enclave.tcs)
    for op in (
        lambda: core.ecall(enclave, FN_RUN),
        lambda: core.step_guest(enclave, tid, 1),
        lambda: core.interrupt_thread(enclave, tid),
        lambda: core.destroy_enclave(enclave),
    ):
        with pytest.raises(EnclaveDestroyed):
            op()


def test_destroy_cost_grows_with_size():
    costs = []
    for size in (8 * MiB, 128 * MiB):
        e = core.create_enclave(counter_program(), EnclaveConfig(heap_size=size))
        core.destroy_enclave(e)
        costs.append((e.sim_cost["create"], e.sim_cost["destroy"]))
    assert costs[1][0] > costs[0][0] and costs[1][1] > costs[0][1]


def test_heap_out_of_bounds_faults():
    prog = assemble(".entry 1 go\ngo:\n li r1, 999999\n ld r2, r1\n halt\n")
    e = core.create_enclave(prog, small_config())
    tid = core.ecall(e, 1).thread_id
    with pytest.raises(GuestFault):
        core.step_guest(e, tid, 10)
    assert e.state_of(tid) == ThreadState.OUTSIDE


@pytest.mark.parametrize(
    "src",
    [
        "bogus r1",
        "li r9, 1",
        "add r1, r2",
        "br never, r0, 0",
        ".entry 1 nowhere\nhalt",
        "x:\nx:\nhalt",
        "br al, r0, missing",
        ".weird",
    ],
)
def test_assembly_errors(src):
    with pytest.raises(AssemblyError):
        assemble(src)


def test_reserved_entry_ids_refused():
    with pytest.raises(AssemblyError):
        assemble(".entry 0xE0 a\na: halt")
