"""Processes hosted by one node daemon and the operations on them."""

from __future__ import annotations

import threading
from pathlib import Path
from typing import Optional

from .. import ctrlib, policy
from ..agent import SimProcess, checkpoint, restore
from ..agent.image import ProcessImage
from ..enclave.memory import EnclaveConfig
from ..enclave.programs import lookup_program
from ..errors import UnknownProcess
from ..mks import MksClient, Platform
from . import schemas


def _enclave_info(he) -> schemas.EnclaveInfo:
    e = he.enclave
    head = left = None
    if e.config.debug and not e.destroyed:
        head = [e.debug_heap_word(i) for i in range(4)]
        left = policy.remaining_migrations(e)
    return schemas.EnclaveInfo(
        program=he.program,
        measurement=e.measurement.hex(),
        size=e.size,
        destroyed=e.destroyed,
        heap_head=head,
        migrations_left=left,
    )


def process_info(proc: SimProcess) -> schemas.ProcessInfo:
    return schemas.ProcessInfo(
        pid=proc.pid,
        alive=proc.alive,
        seized=proc.seized,
        enclaves=[_enclave_info(he) for he in proc.host.enclaves],
        threads=[schemas.ThreadInfo(**vars(t)) for t in proc.threads],
        resources=dict(proc.resources),
    )


class Node:
    """All simulated processes of this node.  One operation at a time."""

    def __init__(self, state_dir: Path, platform: Platform, mks: Optional[str] = None):
        self.state_dir = Path(state_dir)
        self.state_dir.mkdir(parents=True, exist_ok=True)
        self.platform = platform
        self.mks = mks
        self.processes: dict[int, SimProcess] = {}
        self.lock = threading.Lock()

    def escrow(self, mks: Optional[str]) -> Optional[MksClient]:
        addr = mks or self.mks
        return MksClient(addr, self.platform) if addr else None

    def manifest_path(self, pid: int) -> Path:
        return self.state_dir / f"{pid}.manifest"

    def get(self, pid: int) -> SimProcess:
        proc = self.processes.get(pid)
        if proc is None:
            raise UnknownProcess(f"no process {pid} on this node")
        return proc

    def spawn(self, req: schemas.SpawnRequest) -> SimProcess:
        program = lookup_program(req.program)
        config = EnclaveConfig(heap_size=req.heap_size, max_threads=req.max_threads, debug=req.debug)
        with self.lock:
            pid = max([999, *self.processes]) + 1
            proc = SimProcess(pid=pid, escrow=self.escrow(req.mks), fork_allowed=req.fork_allowed)
            proc.manifest_path = proc.host.manifest_path = self.manifest_path(proc.pid)
            idx = proc.create_enclave(program, config, req.provider)
            e = proc.enclave(idx)
            ctrlib.prepare_migration(e, provider=req.provider)
            if req.migration_limit is not None:
                policy.register_policy(e, policy.migration_limit_policy(req.migration_limit))
            for name in req.cache_clear:
                policy.register_policy(e, policy.cache_clear_policy(name))
            proc.host.host_prepare()
            for _ in range(req.threads):
                proc.start_thread(idx, req.fn_id, req.args)
            if req.steps:
                proc.run(req.steps)
            self.processes[proc.pid] = proc
            return proc

    def run(self, pid: int, steps: int) -> SimProcess:
        with self.lock:
            proc = self.get(pid)
            proc.run(steps)
            return proc

    def checkpoint(self, pid: int, req: schemas.CheckpointRequest) -> schemas.CheckpointResult:
        with self.lock:
            proc = self.get(pid)
            if req.mks is not None:
                proc.escrow = proc.host.escrow = self.escrow(req.mks)
            if req.fork_allowed is not None:
                proc.host.fork_allowed = req.fork_allowed
            image = checkpoint(proc, req.out)
            forked = proc.alive
            if not forked:
                del self.processes[pid]
            return schemas.CheckpointResult(
                pid=pid,
                image=str(req.out),
                image_ids=[r["image_id"] for r in image.meta["receipts"]],
                bytes=sum(r["bytes"] for r in image.meta["receipts"]),
                forked=forked,
                timings=dict(proc.host.timings),
            )

    def restore(self, req: schemas.RestoreRequest) -> schemas.RestoreResult:
        with self.lock:
            image = ProcessImage.read(req.image)
            pid = image.meta["pid"]
            if pid in self.processes and self.processes[pid].alive:
                # a forked source still runs here; the copy gets a fresh pid
                pid = max(self.processes) + 1
            proc = restore(req.image, self.escrow(req.mks), manifest_path=self.manifest_path(pid), image=image)
            proc.pid = pid
            self.processes[proc.pid] = proc
            return schemas.RestoreResult(
                process=process_info(proc),
                image_ids=[r["image_id"] for r in image.meta["receipts"]],
                actions=[a for he in proc.host.enclaves if he.verdict for a in he.verdict.actions_performed],
                timings=dict(proc.host.timings),
            )

    def self_migrate(self, pid: int, req: schemas.SelfMigrateRequest) -> schemas.RestoreResult:
        self.checkpoint(pid, schemas.CheckpointRequest(out=req.image, mks=req.mks))
        return self.restore(schemas.RestoreRequest(image=req.image, mks=req.mks))
