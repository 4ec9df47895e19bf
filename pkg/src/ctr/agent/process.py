"""Simulated host process: memory regions, threads, descriptors, functions."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from ..enclave import core
from ..enclave.core import EnclaveInstance, ThreadState
from ..enclave.memory import EnclaveConfig
from ..enclave.programs import ocall_for
from ..enclave.vm import GuestProgram
from ..errors import AccessViolation, AgentError
from ..host.runtime import PARKED, HostRuntime

ORDINARY = "ordinary"
ENCLAVE = "enclave"
EXPORT_BUFFER = "export-buffer"
TAGS = (ORDINARY, ENCLAVE, EXPORT_BUFFER)

_pids = itertools.count(1000)


@dataclass
class Region:
    token: str
    tag: str
    data: Optional[bytearray] = None
    enclave: Optional[EnclaveInstance] = None


@dataclass
class HostThread:
    """One host thread.  Enclave threads carry their (enclave index, TCS)."""

    hid: int
    state: str = "running"  # running | parked | exited | dead
    enclave_idx: Optional[int] = None
    tcs: Optional[int] = None
    steps: int = 0


@dataclass
class SimProcess:
    pid: int = field(default_factory=lambda: next(_pids))
    manifest_path: Optional[Path] = None
    escrow: object = None
    fork_allowed: bool = False

    def __post_init__(self):
        self.regions: dict[str, Region] = {}
        self.resources: dict[int, str] = {0: "stdin", 1: "stdout", 2: "stderr", 3: "/dev/sgx_enclave"}
        self.registry: dict[str, Callable] = {}
        self.threads: list[HostThread] = []
        self.seized = False
        self.alive = True
        self.host = HostRuntime(
            self,
            escrow=self.escrow,
            manifest_path=self.manifest_path,
            fork_allowed=self.fork_allowed,
        )

    # -- memory ---------------------------------------------------------------

    def alloc_region(self, token: str, size: int, tag: str = ORDINARY) -> bytearray:
        if tag not in TAGS or tag == ENCLAVE:
            raise AgentError(f"cannot allocate a region tagged {tag!r}")
        region = Region(token, tag, bytearray(size))
        self.regions[token] = region
        return region.data

    def region(self, token: str) -> bytearray:
        r = self.regions.get(token)
        if r is None:
            raise AgentError(f"no region {token!r}")
        if r.tag == ENCLAVE:
            raise AccessViolation(f"region {token!r} is enclave memory")
        return r.data

    def read_region(self, token: str) -> bytes:
        """What a debugger-style dump of ``token`` returns."""
        return bytes(self.region(token))

    def free_region(self, token: str) -> None:
        self.regions.pop(token, None)

    # -- enclaves and threads ---------------------------------------------------

    def create_enclave(self, program: GuestProgram, config: EnclaveConfig, provider: str = "hw") -> int:
        e = self.host.create(program, config, provider)
        idx = len(self.host.enclaves) - 1
        self.regions[f"enclave-{idx}"] = Region(f"enclave-{idx}", ENCLAVE, enclave=e)
        return idx

    def enclave(self, idx: int = 0) -> EnclaveInstance:
        return self.host.enclaves[idx].enclave

    def start_thread(self, idx: int, fn_id: int, args=(), thread_id: Optional[int] = None) -> HostThread:
        ticket = self.host.ecall(idx, fn_id, args, thread_id)
        t = HostThread(len(self.threads), enclave_idx=idx, tcs=ticket.thread_id)
        self.threads.append(t)
        return t

    def thread_for(self, idx: int, tcs: int) -> Optional[HostThread]:
        for t in self.threads:
            if t.enclave_idx == idx and t.tcs == tcs and t.state in ("running", "parked"):
                return t
        return None

    def run(
        self,
        steps: int,
        *,
        slice_steps: int = 997,
        preempt: bool = True,
        on_store=None,
        ocall: Optional[Callable[[int, int], int]] = None,
    ) -> int:
        """Round-robin the runnable enclave threads for about ``steps`` steps.

        Each slice ends with a timer AEX and the thread's trampoline, as a
        preemptive host scheduler would cause.
        """
        if self.seized or not self.alive:
            raise AgentError("process is not running")
        done = 0
        while done < steps:
            runnable = [t for t in self.threads if t.state == "running"]
            if not runnable:
                break
            for t in runnable:
                n = min(slice_steps, steps - done)
                if n <= 0:
                    break
                he = self.host.enclaves[t.enclave_idx]
                handler = ocall or ocall_for(he.program)
                status = core.step_guest(he.enclave, t.tcs, n, handler, on_store)
                t.steps += status.steps
                done += status.steps
                if status.status == "Halted":
                    t.state = "exited"
                elif preempt:
                    if self.host.preempt(t.enclave_idx, t.tcs) == PARKED:
                        t.state = "parked"
        return done

    # -- seizure ------------------------------------------------------------------

    def seize(self) -> int:
        """Stop every thread; enclave threads leave through an AEX."""
        self.seized = True
        parked = self.host.begin_migration()
        self.sync_threads()
        return parked

    def unseize(self) -> None:
        self.seized = False
        self.sync_threads()

    def sync_threads(self) -> None:
        """Refresh host thread states from the TCSs they map to."""
        for t in self.threads:
            if t.enclave_idx is None or t.state in ("exited", "dead"):
                continue
            e = self.host.enclaves[t.enclave_idx].enclave
            if e.destroyed:
                t.state = "dead"
            elif (t.enclave_idx, t.tcs) in self.host.parked:
                t.state = "parked"
            elif e.tcs[t.tcs].state == ThreadState.IN_ENCLAVE:
                t.state = "running"
            elif e.tcs[t.tcs].state == ThreadState.OUTSIDE:
                t.state = "exited"

    def terminate(self) -> None:
        self.host.destroy_all()
        for t in self.threads:
            if t.state in ("running", "parked"):
                t.state = "dead"
        self.alive = False
