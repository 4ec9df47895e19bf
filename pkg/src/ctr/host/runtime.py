"""Untrusted host side of an enclave application.

Owns the migration flags, the per-thread AEX trampoline, the export
buffers and the parameterless wrapper functions the migration agent
invokes through the function manifest.

``process`` is duck-typed (see :class:`ctr.agent.process.SimProcess`); the
runtime needs ``resources`` (fd -> name), ``registry`` (token -> callable)
and ``alloc_region(token, size, tag)`` / ``region(token)``.
"""

from __future__ import annotations

import functools
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

from .. import ctrlib
from ..ctrlib.library import KeyEscrow
from ..enclave import core
from ..enclave.core import EnclaveInstance, ThreadState
from ..enclave.memory import EnclaveConfig, memset
from ..enclave.programs import lookup_program
from ..enclave.vm import FN_PLACEHOLDER, GuestProgram
from ..errors import (
    ExportInProgress,
    MigrationInProgress,
    NotStaged,
    PlaceholderMismatch,
    PolicyDenied,
)
from ..policy import PolicyVerdict
from . import files
from .flags import HostFlags, should_park

log = logging.getLogger(__name__)

PARKED = "parked"
RESUMED = "resumed"

NON_MIGRATABLE = ("stdin", "stdout", "stderr", "/dev/sgx_enclave")


def _timed(fn):
    """Record the wall time of the last call of a wrapper in ``self.timings``."""

    @functools.wraps(fn)
    def wrapper(self, *args, **kwargs):
        t0 = time.perf_counter()
        try:
            return fn(self, *args, **kwargs)
        finally:
            self.timings[fn.__name__] = time.perf_counter() - t0

    return wrapper


@dataclass
class HostEnclave:
    """Host bookkeeping for one enclave, in creation order."""

    enclave: EnclaveInstance
    program: str
    provider: str = "hw"
    buffer_token: Optional[str] = None
    receipt: Optional[ctrlib.ExportReceipt] = None
    verdict: Optional[PolicyVerdict] = None
    placeholders: int = 0


class HostRuntime:
    def __init__(
        self,
        process,
        *,
        escrow: Optional[KeyEscrow] = None,
        manifest_path: Optional[Path] = None,
        fork_allowed: bool = False,
    ):
        self.process = process
        self.escrow = escrow
        self.manifest_path = Path(manifest_path) if manifest_path else None
        self.fork_allowed = fork_allowed
        self.flags = HostFlags()
        self.enclaves: list[HostEnclave] = []
        self.parked: set[tuple[int, int]] = set()
        self.staged: Optional[list[files.StagedEnclave]] = None
        self.exported = False
        self.gated = False
        self.timings: dict[str, float] = {}
        # called between export stages; lets tests preempt the migration thread
        self.export_preempt: Optional[Callable[[EnclaveInstance, str], None]] = None
        for name in files.MANIFEST_ORDER:
            process.registry[self.token(name)] = getattr(self, name)

    def token(self, name: str) -> str:
        return f"host:{name}"

    # -- enclave lifecycle driven by the application --------------------------

    def create(self, program: GuestProgram, config: EnclaveConfig, provider: str = "hw") -> EnclaveInstance:
        enclave = core.create_enclave(program, config)
        self._adopt(enclave, program.name, provider)
        return enclave

    def _adopt(self, enclave: EnclaveInstance, program: str, provider: str) -> HostEnclave:
        idx = len(self.enclaves)
        enclave.resume_gate = lambda tid, idx=idx: (idx, tid) not in self.parked
        he = HostEnclave(enclave, program, provider)
        self.enclaves.append(he)
        return he

    def ecall(self, idx: int, fn_id: int, args=(), thread_id: Optional[int] = None):
        if self.flags.is_host_migrating:
            raise MigrationInProgress("host is migrating; new ecalls are held back")
        return core.ecall(self.enclaves[idx].enclave, fn_id, args, thread_id)

    def trampoline(self, idx: int, tid: int) -> str:
        """Host code a thread lands in after an AEX."""
        if should_park(*self.flags.snapshot()):
            self.parked.add((idx, tid))
            return PARKED
        core.eresume(self.enclaves[idx].enclave, tid)
        return RESUMED

    def preempt(self, idx: int, tid: int) -> str:
        """Timer interrupt: AEX the thread, then run its trampoline."""
        core.interrupt_thread(self.enclaves[idx].enclave, tid)
        return self.trampoline(idx, tid)

    # -- preparation ------------------------------------------------------------

    def host_prepare(self) -> None:
        for fd, name in list(self.process.resources.items()):
            if name in NON_MIGRATABLE:
                del self.process.resources[fd]
        staged = []
        for i, he in enumerate(self.enclaves):
            size = ctrlib.required_export_size(he.enclave)
            he.buffer_token = f"export-buffer-{i}"
            buf = self.process.alloc_region(he.buffer_token, size, "export-buffer")
            memset(buf, 0)  # touch every page now, not during the checkpoint
            staged.append(files.StagedEnclave(he.program, he.enclave.config, he.provider, he.buffer_token))
        self.staged = staged
        self.exported = False
        self.gated = False
        if self.manifest_path is not None:
            files.write_manifest(self.manifest_path, [(n, self.token(n)) for n in files.MANIFEST_ORDER])
            self.staged_path.write_bytes(files.encode_staged(staged))

    @property
    def staged_path(self) -> Path:
        return self.manifest_path.with_name(self.manifest_path.name + ".staged")

    # -- checkpoint -------------------------------------------------------------

    def begin_migration(self) -> int:
        self.flags.set_migrating()
        return self.capture_threads()

    def capture_threads(self) -> int:
        if not self.flags.is_host_migrating:
            raise MigrationInProgress("capture requires IS_HOST_MIGRATING")
        count = 0
        for idx, he in enumerate(self.enclaves):
            e = he.enclave
            if e.destroyed:
                continue
            for tid in e.worker_tids:
                if e.tcs[tid].state == ThreadState.IN_ENCLAVE:
                    core.interrupt_thread(e, tid)
                    if self.trampoline(idx, tid) == PARKED:
                        count += 1
        return count

    def _require_staged(self) -> list[files.StagedEnclave]:
        if self.staged is None:
            raise NotStaged("host_prepare or restore staging has not run")
        return self.staged

    @_timed
    def export_all_wrapper(self) -> bool:
        self._require_staged()
        if not self.flags.is_host_migrating:
            self.begin_migration()
        else:
            self.capture_threads()
        self.flags.set_entered()
        try:
            for idx, he in enumerate(self.enclaves):
                buf = self.process.region(he.buffer_token)
                he.receipt = ctrlib.enclave_export_all(
                    he.enclave,
                    buf,
                    escrow=self.escrow,
                    chunk_hook=self._chunk_hook(idx),
                )
        except BaseException:
            self.abort_migration()
            raise
        self.exported = True
        return True

    def _chunk_hook(self, idx: int):
        if self.export_preempt is None:
            return None
        enclave = self.enclaves[idx].enclave

        def hook(stage: str) -> None:
            self.export_preempt(enclave, stage)
            # the migration thread's own trampoline: never parked once H is set
            if self.trampoline(idx, enclave.migration_tid) == PARKED:
                self.parked.discard((idx, enclave.migration_tid))
                raise MigrationInProgress("migration thread was parked")

        return hook

    def abort_migration(self) -> None:
        """Export failed: let captured threads carry on.

        An enclave that did finish exporting (multi-enclave case) already
        has its key in escrow; letting it run would fork it, so it is
        destroyed instead.
        """
        for he in self.enclaves:
            if he.enclave.migration_locked and not he.enclave.destroyed:
                core.destroy_enclave(he.enclave)
        self.flags.set_allow_eresume()
        self._release_parked()
        self.flags.reset()

    def _release_parked(self) -> None:
        for idx, tid in sorted(self.parked):
            self.parked.discard((idx, tid))
            e = self.enclaves[idx].enclave
            if not e.destroyed:
                core.eresume(e, tid)

    def gate_resume(self, fork_allowed: Optional[bool] = None) -> None:
        """Decide the source's fate after a checkpoint; default is destroy."""
        if not self.exported:
            raise ExportInProgress("checkpoint has not completed")
        fork = self.fork_allowed if fork_allowed is None else fork_allowed
        if fork:
            for he in self.enclaves:
                ctrlib.release_for_fork(he.enclave)
            self.flags.set_allow_eresume()
            self._release_parked()
            self.flags.reset()  # the source carries on as an ordinary process
        else:
            for he in self.enclaves:
                if not he.enclave.destroyed:
                    core.destroy_enclave(he.enclave)
            self.parked.clear()
        self.gated = True

    @_timed
    def destroy_enclave_wrapper(self) -> bool:
        self.gate_resume()
        return True

    # -- restore (run by the restorer on the destination) ------------------------

    def stage_restore(self, staged: list[files.StagedEnclave]) -> None:
        self.staged = list(staged)
        self.flags.reset()

    @_timed
    def create_enclave_wrapper(self) -> bool:
        staged = self._require_staged()
        # a retried step starts over rather than adding duplicates
        self.destroy_all()
        self.enclaves.clear()
        for item in staged:
            program = lookup_program(item.program)
            he = self._adopt(core.create_enclave(program, item.config), item.program, item.provider)
            he.buffer_token = item.buffer_token
        return True

    @_timed
    def init_context_wrapper(self) -> bool:
        self._require_staged()
        for he in self.enclaves:
            ctrlib.prepare_migration(he.enclave, provider=he.provider)
        return True

    @_timed
    def spawn_placeholders_wrapper(self) -> bool:
        self._require_staged()
        for he in self.enclaves:
            header, _ = ctrlib.parse_header(self.process.region(he.buffer_token))
            e = he.enclave
            for tid, depth in enumerate(header.cssa):
                for _ in range(depth - ctrlib.inferred_cssa(e, tid)):
                    # a throwaway host thread enters, is interrupted and dies
                    core.ecall(e, FN_PLACEHOLDER, (), thread_id=tid)
                    core.interrupt_thread(e, tid)
                    he.placeholders += 1
            staged = tuple(ctrlib.inferred_cssa(e, t) for t in e.worker_tids)
            if staged != header.cssa:
                raise PlaceholderMismatch(f"staged cssa {staged} != image {header.cssa}")
        return True

    @_timed
    def import_all_wrapper(self) -> bool:
        self._require_staged()
        if self.escrow is None:
            raise NotStaged("no key service configured for import")
        for he in self.enclaves:
            he.verdict = ctrlib.enclave_import_all(
                he.enclave, self.process.region(he.buffer_token), self.escrow
            )
            if not he.verdict.allow_resume:
                raise PolicyDenied(f"restore denied by policy: {he.verdict.actions_performed}")
        return True

    def destroy_all(self) -> None:
        for he in self.enclaves:
            if not he.enclave.destroyed:
                core.destroy_enclave(he.enclave)

    def resume_interrupted(self) -> list[tuple[int, int]]:
        """After import: every thread with a saved frame re-enters."""
        resumed = []
        for idx, he in enumerate(self.enclaves):
            e = he.enclave
            for tid in e.worker_tids:
                if e.tcs[tid].state == ThreadState.INTERRUPTED:
                    core.eresume(e, tid)
                    resumed.append((idx, tid))
        return resumed
