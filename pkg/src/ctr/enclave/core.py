"""Deterministic in-process TEE simulator.

Thread lifecycle mirrors SGX: an ecall enters a TCS, an interrupt causes an
asynchronous exit that spills the registers into the State Save Area and
increments CSSA, and ERESUME pops the topmost frame.  Enclave memory is
only reachable through this module; host code never gets the buffers.
"""

from __future__ import annotations

import hashlib
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Optional

from ..errors import (
    AlreadyEntered,
    DebugAccessDenied,
    EnclaveCrashed,
    EnclaveDestroyed,
    GuestFault,
    MigrationInProgress,
    NoSavedFrame,
    NotInEnclave,
    ResumeBlocked,
    SsaFull,
    UnknownFunction,
)
from .memory import DATA_RESERVED, SSA_FRAME_SIZE, EnclaveConfig, EnclaveMemory, pack_frame, unpack_frame
from .vm import (
    HALTED,
    RESERVED_FN_IDS,
    CpuContext,
    GuestProgram,
    OcallHandler,
    TraceFn,
    execute,
)

# synthetic per-byte costs (seconds); configuration, not contract
COST_MODEL = {"create_per_byte": 1.8e-9, "destroy_per_byte": 1.4e-10}


class ThreadState(str, Enum):
    OUTSIDE = "Outside"
    IN_ENCLAVE = "InEnclave"
    INTERRUPTED = "Interrupted"
    DESTROYED = "Destroyed"


@dataclass
class Tcs:
    thread_id: int
    cssa: int = 0
    state: ThreadState = ThreadState.OUTSIDE


@dataclass(frozen=True)
class EcallTicket:
    thread_id: int
    fn_id: int
    result: Any = None


@dataclass(frozen=True)
class AexEvent:
    thread_id: int
    cssa: int
    instruction_pointer: int
    host_registers: tuple[int, ...]


@dataclass(frozen=True)
class VmStatus:
    status: str
    steps: int


Measurement = bytes


def compute_measurement(program: GuestProgram, config: EnclaveConfig) -> Measurement:
    h = hashlib.sha256()
    h.update(b"CTR-MRENCLAVE\0")
    h.update(program.code_bytes())
    h.update(config.canonical())
    return h.digest()


TrustedEcall = Callable[["EnclaveInstance", int, tuple], Any]

_trusted_ecalls: dict[int, TrustedEcall] = {}


def register_trusted_ecall(fn_id: int, handler: TrustedEcall) -> None:
    """Link a trusted-library function into every enclave's ecall table."""
    if fn_id not in RESERVED_FN_IDS:
        raise ValueError(f"{fn_id:#x} is not a reserved library ecall id")
    _trusted_ecalls[fn_id] = handler


_library_inits: list[Callable[["EnclaveInstance"], None]] = []


def register_library_init(fn: Callable[["EnclaveInstance"], None]) -> None:
    """Run ``fn`` on every enclave at creation (trusted library linkage)."""
    if fn not in _library_inits:
        _library_inits.append(fn)


class EnclaveInstance:
    """One simulated enclave.  Use the module-level operations to drive it."""

    def __init__(self, program: GuestProgram, config: EnclaveConfig):
        config.validate()
        self.program = program
        self.config = config
        self.code = program.instructions
        self.memory = EnclaveMemory.layout(program.code_bytes(), config)
        self.measurement = compute_measurement(program, config)
        # worker TCSs 0..max_threads-1; the last TCS is the dedicated migration thread
        self.tcs = [Tcs(i) for i in range(config.max_threads + 1)]
        self.cpus = [CpuContext() for _ in self.tcs]
        self.lock = threading.RLock()
        self.destroyed = False
        self.crashed = False
        # set by the migration library; see ctr.ctrlib
        self.ecall_barrier = False
        self.migration_locked = False
        self.trusted: dict[str, Any] = {}
        self.entry_hooks: list[Callable[[int], None]] = []
        self.exit_hooks: list[Callable[[int], None]] = []
        self.resume_gate: Optional[Callable[[int], bool]] = None
        self.sim_cost: dict[str, float] = {}
        # optional lifecycle trace: set to a list to record events
        self.events: Optional[list] = None
        for init in _library_inits:
            init(self)

    @property
    def migration_tid(self) -> int:
        return self.config.max_threads

    @property
    def worker_tids(self) -> range:
        return range(self.config.max_threads)

    @property
    def size(self) -> int:
        return self.memory.total_size()

    def state_of(self, thread_id: int) -> ThreadState:
        return self._tcs(thread_id).state

    def _tcs(self, thread_id: int) -> Tcs:
        if not 0 <= thread_id < len(self.tcs):
            raise ValueError(f"no TCS {thread_id}")
        return self.tcs[thread_id]

    def _alive(self) -> None:
        if self.destroyed:
            raise EnclaveDestroyed("enclave has been destroyed")

    def _ssa_slot(self, thread_id: int, slot: int) -> memoryview:
        off = slot * SSA_FRAME_SIZE
        if thread_id == self.migration_tid:
            buf = self.memory.reserve.buf
        else:
            buf = self.memory.ssa.buf
            off += thread_id * self.config.ssa_depth * SSA_FRAME_SIZE
        return memoryview(buf)[off : off + SSA_FRAME_SIZE]

    def ssa_frame_offset(self, thread_id: int, slot: int) -> int:
        """Byte offset of a worker frame inside the SSA section."""
        return (thread_id * self.config.ssa_depth + slot) * SSA_FRAME_SIZE

    def host_registers(self, thread_id: int) -> tuple[int, ...]:
        """Register values a host observes for a thread that is outside."""
        t = self._tcs(thread_id)
        if t.state == ThreadState.IN_ENCLAVE:
            raise AlreadyEntered(f"thread {thread_id} is executing inside the enclave")
        return tuple(self.cpus[thread_id].regs)

    # -- debug access (EDBGRD analogue; debug enclaves only) -----------------

    def debug_read(self, section: str, offset: int, length: int) -> bytes:
        if not self.config.debug:
            raise DebugAccessDenied("debug reads require a debug enclave")
        with self.lock:
            self._alive()
            sec = {s.name: s for s in self.memory.sections()}[section]
            return bytes(sec.buf[offset : offset + length])

    def debug_heap_word(self, word: int) -> int:
        return int.from_bytes(self.debug_read("heap", word * 8, 8), "little")

    def debug_write(self, section: str, offset: int, data: bytes) -> None:
        if not self.config.debug:
            raise DebugAccessDenied("debug writes require a debug enclave")
        with self.lock:
            self._alive()
            sec = {s.name: s for s in self.memory.sections()}[section]
            sec.buf[offset : offset + len(data)] = data


def create_enclave(program: GuestProgram, config: EnclaveConfig) -> EnclaveInstance:
    """Lay out and initialize a fresh enclave (all TCS Outside, cssa 0)."""
    t0 = time.perf_counter()
    enclave = EnclaveInstance(program, config)
    # page initialization: every page is written once, as EADD/EEXTEND would
    mem = enclave.memory
    mem.zeroize()
    mem.data.buf[DATA_RESERVED : DATA_RESERVED + len(config.data_init)] = config.data_init
    mem.code.buf[:] = program.code_bytes()
    enclave.sim_cost["create"] = enclave.size * COST_MODEL["create_per_byte"]
    enclave.sim_cost["create_wall"] = time.perf_counter() - t0
    return enclave


def ecall(
    enclave: EnclaveInstance,
    fn_id: int,
    args: tuple | list = (),
    thread_id: Optional[int] = None,
) -> EcallTicket:
    """Enter the enclave.

    Guest functions return a ticket immediately; the thread then runs via
    ``step_guest``.  Reserved library functions run to completion on the
    migration TCS and the ticket carries their result.
    """
    with enclave.lock:
        enclave._alive()
        trusted = fn_id in RESERVED_FN_IDS and fn_id in _trusted_ecalls
        if fn_id not in enclave.program.entry_points and not trusted:
            raise UnknownFunction(f"no ecall with id {fn_id:#x}")
        if thread_id is None:
            thread_id = enclave.migration_tid if trusted else _free_worker(enclave)
        if trusted and thread_id != enclave.migration_tid:
            raise UnknownFunction("library ecalls run on the migration thread only")
        if not trusted and thread_id == enclave.migration_tid:
            raise UnknownFunction("the migration TCS does not run guest code")
        if not trusted and (enclave.ecall_barrier or enclave.migration_locked):
            raise MigrationInProgress("ecalls are refused while migration is in progress")
        tcs = enclave._tcs(thread_id)
        if tcs.state == ThreadState.IN_ENCLAVE:
            raise AlreadyEntered(f"thread {thread_id} is already inside the enclave")
        if tcs.state == ThreadState.DESTROYED:
            raise EnclaveDestroyed(f"TCS {thread_id} destroyed")
        if tcs.state == ThreadState.INTERRUPTED and tcs.cssa >= enclave.config.ssa_depth:
            raise SsaFull(f"thread {thread_id} has no free SSA frame for a nested entry")

        cpu = enclave.cpus[thread_id]
        cpu.clear()
        tcs.state = ThreadState.IN_ENCLAVE
        for hook in enclave.entry_hooks:
            hook(thread_id)

        if not trusted:
            stack_top = enclave.config.stack_size
            cpu.pc = enclave.program.entry_points[fn_id]
            cpu.sp = cpu.bp = stack_top
            cpu.tls = thread_id
            for i, a in enumerate(list(args)[: len(cpu.regs)]):
                cpu.regs[i] = int(a) & ((1 << 64) - 1)
            return EcallTicket(thread_id, fn_id)

    # trusted handlers run without the lock held so the host can interrupt
    # the migration thread between chunks
    try:
        result = _trusted_ecalls[fn_id](enclave, thread_id, tuple(args))
    except BaseException:
        with enclave.lock:
            _normal_exit(enclave, thread_id)
        raise
    with enclave.lock:
        _normal_exit(enclave, thread_id)
    return EcallTicket(thread_id, fn_id, result)


def _free_worker(enclave: EnclaveInstance) -> int:
    for tid in enclave.worker_tids:
        if enclave.tcs[tid].state == ThreadState.OUTSIDE:
            return tid
    raise AlreadyEntered("no free TCS")


def _normal_exit(enclave: EnclaveInstance, thread_id: int) -> None:
    tcs = enclave.tcs[thread_id]
    if tcs.state != ThreadState.IN_ENCLAVE:
        return
    enclave.cpus[thread_id].clear()
    tcs.state = ThreadState.INTERRUPTED if tcs.cssa else ThreadState.OUTSIDE
    for hook in enclave.exit_hooks:
        hook(thread_id)


def interrupt_thread(enclave: EnclaveInstance, thread_id: int) -> AexEvent:
    """Asynchronous exit: spill registers to the SSA and clear them."""
    with enclave.lock:
        enclave._alive()
        tcs = enclave._tcs(thread_id)
        if tcs.state != ThreadState.IN_ENCLAVE:
            raise NotInEnclave(f"thread {thread_id} is not inside the enclave")
        if tcs.cssa >= enclave.config.ssa_depth:
            raise SsaFull(f"thread {thread_id}: nested AEX beyond depth {enclave.config.ssa_depth}")
        cpu = enclave.cpus[thread_id]
        ip = cpu.pc
        enclave._ssa_slot(thread_id, tcs.cssa)[:] = pack_frame(cpu)
        tcs.cssa += 1
        cpu.clear()
        tcs.state = ThreadState.INTERRUPTED
        return AexEvent(thread_id, tcs.cssa, ip, tuple(cpu.regs))


def eresume(enclave: EnclaveInstance, thread_id: int, *, force: bool = False) -> None:
    """Pop the topmost SSA frame and continue inside the enclave.

    ``force`` models a host that ignores every software gate; the
    migration library's poisoned instruction pointers then crash the
    enclave instead of letting it run.
    """
    with enclave.lock:
        if enclave.migration_locked and not force:
            raise ResumeBlocked("enclave state has been checkpointed; resume is blocked")
        enclave._alive()
        tcs = enclave._tcs(thread_id)
        if tcs.state == ThreadState.IN_ENCLAVE:
            raise AlreadyEntered(f"thread {thread_id} is already inside the enclave")
        if tcs.cssa == 0:
            raise NoSavedFrame(f"thread {thread_id} has no saved frame")
        if enclave.resume_gate is not None and not force and not enclave.resume_gate(thread_id):
            raise ResumeBlocked(f"host gate holds thread {thread_id}")
        slot = tcs.cssa - 1
        cpu = unpack_frame(enclave._ssa_slot(thread_id, slot))
        if thread_id != enclave.migration_tid and not 0 <= cpu.pc < len(enclave.code):
            enclave.crashed = True
            destroy_enclave(enclave)
            raise EnclaveCrashed(f"thread {thread_id} resumed at invalid ip {cpu.pc:#x}")
        enclave.cpus[thread_id] = cpu
        tcs.cssa -= 1
        tcs.state = ThreadState.IN_ENCLAVE
        if enclave.events is not None:
            enclave.events.append(("eresume", thread_id))


def step_guest(
    enclave: EnclaveInstance,
    thread_id: int,
    n_steps: int,
    ocall: Optional[OcallHandler] = None,
    on_store: Optional[TraceFn] = None,
) -> VmStatus:
    """Execute up to ``n_steps`` guest instructions on one thread."""
    with enclave.lock:
        enclave._alive()
        tcs = enclave._tcs(thread_id)
        if tcs.state != ThreadState.IN_ENCLAVE:
            raise NotInEnclave(f"thread {thread_id} is not inside the enclave")
        if thread_id == enclave.migration_tid:
            raise NotInEnclave("the migration TCS does not run guest code")
        if n_steps <= 0:
            return VmStatus("Running", 0)
        cpu = enclave.cpus[thread_id]
        mem = enclave.memory
        try:
            status, done = execute(
                enclave.code,
                cpu,
                mem.heap_words(),
                mem.stack_words(thread_id),
                n_steps,
                thread_id,
                ocall,
                on_store,
            )
        except GuestFault:
            _normal_exit(enclave, thread_id)
            raise
        if enclave.events is not None and done:
            enclave.events.append(("step", thread_id, done))
        if status == HALTED:
            _normal_exit(enclave, thread_id)
        return VmStatus(status, done)


def destroy_enclave(enclave: EnclaveInstance) -> None:
    """Zero and release all enclave memory."""
    with enclave.lock:
        enclave._alive()
        t0 = time.perf_counter()
        enclave.memory.release_views()
        enclave.memory.zeroize()
        for tcs in enclave.tcs:
            tcs.state = ThreadState.DESTROYED
        for cpu in enclave.cpus:
            cpu.clear()
        enclave.trusted.clear()
        enclave.destroyed = True
        enclave.sim_cost["destroy"] = enclave.size * COST_MODEL["destroy_per_byte"]
        enclave.sim_cost["destroy_wall"] = time.perf_counter() - t0


def inspect_memory(enclave: EnclaveInstance) -> bytes:
    """Concatenated contents of every section (test-only; zero after destroy)."""
    return b"".join(bytes(s.buf) for s in enclave.memory.sections())
