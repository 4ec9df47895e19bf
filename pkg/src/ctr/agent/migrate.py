"""Checkpoint, restore and self-migration of a simulated process."""

from __future__ import annotations

import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

from .. import ctrlib
from ..errors import ManifestError, ManifestMissing
from ..host import files
from .image import ProcessImage
from .process import ENCLAVE, EXPORT_BUFFER, ORDINARY, HostThread, Region, SimProcess

log = logging.getLogger(__name__)

RESTORER_TOKEN = "restorer"
RESTORER_SIZE = 64 << 10


def _resolve(process: SimProcess, entries: list[tuple[str, str]], names) -> list[tuple[str, Callable]]:
    out = []
    for name, token in entries:
        if name not in names:
            continue
        fn = process.registry.get(token)
        if fn is None:
            raise ManifestError(f"manifest entry {name}={token} does not resolve")
        out.append((name, fn))
    return out


def _manifest_for(process: SimProcess) -> tuple[str, list[tuple[str, str]], bytes]:
    host = process.host
    if host.manifest_path is None:
        if host.enclaves:
            raise ManifestMissing("process has enclaves but no function manifest")
        return "", [], files.encode_staged([])
    try:
        text = host.manifest_path.read_text(encoding="utf-8")
        staged = host.staged_path.read_bytes()
    except FileNotFoundError:
        if host.enclaves:
            raise ManifestMissing(f"no function manifest at {host.manifest_path}") from None
        return "", [], files.encode_staged([])
    return text, files.parse_manifest(text), staged


def checkpoint(process: SimProcess, image_path: str | os.PathLike, *, enlightened: bool = True) -> ProcessImage:
    """Seize the process, run the source half of the manifest, dump, write the image."""
    manifest_text, entries, staged = _manifest_for(process)
    source_calls = _resolve(process, entries, files.SOURCE_PHASE)
    process.seize()
    threads = None
    try:
        if not enlightened:
            # a plain dumper reads every mapping, including the enclave's
            for token in list(process.regions):
                process.read_region(token)
        for name, fn in source_calls:
            if name == "destroy_enclave_wrapper":
                # the thread table describes the seized threads, not their teardown
                process.sync_threads()
                threads = [asdict(t) for t in process.threads]
            log.info("pid %d: parasite calls %s", process.pid, name)
            fn()
    except BaseException:
        process.unseize()
        raise
    process.sync_threads()
    if threads is None:
        threads = [asdict(t) for t in process.threads]
    image = ProcessImage(
        meta={
            "pid": process.pid,
            "time": time.time(),
            "enclaves": [he.program for he in process.host.enclaves],
            "receipts": [
                {"image_id": he.receipt.image_id.hex(), "bytes": he.receipt.byte_count}
                for he in process.host.enclaves
                if he.receipt is not None
            ],
        },
        threads=threads,
        resources=dict(process.resources),
        manifest=manifest_text,
        staged=staged,
        regions={
            token: (r.tag, memoryview(process.region(token)))
            for token, r in process.regions.items()
            if r.tag != ENCLAVE
        },
    )
    image.write(image_path)
    forked = process.host.gated and any(not he.enclave.destroyed for he in process.host.enclaves)
    if forked:
        process.unseize()
    else:
        process.terminate()
    return image


@dataclass
class RestorerPlan:
    """Fixed-order restore steps; completed steps are skipped on retry."""

    steps: list[tuple[str, Callable[[], object]]]
    completed: list[str] = field(default_factory=list)

    def run(self) -> None:
        for name, fn in self.steps:
            if name in self.completed:
                continue
            fn()
            self.completed.append(name)


def restore(
    image_path: str | os.PathLike,
    escrow,
    *,
    manifest_path: Optional[Path] = None,
    image: Optional[ProcessImage] = None,
) -> SimProcess:
    """Rebuild the process and its enclaves from an image; the enclaves fetch their keys."""
    image = image or ProcessImage.read(image_path)
    entries = files.parse_manifest(image.manifest)
    staged = files.decode_staged(image.staged)
    proc = SimProcess(pid=image.meta["pid"], manifest_path=manifest_path, escrow=escrow)
    proc.seized = True

    def restore_threads():
        proc.threads = [HostThread(**t) for t in image.threads]

    def inject_restorer():
        proc.alloc_region(RESTORER_TOKEN, RESTORER_SIZE, ORDINARY)

    def restore_memory():
        for token, (tag, data) in image.regions.items():
            proc.alloc_region(token, len(data), tag)[:] = data
        proc.resources = dict(image.resources)
        proc.host.stage_restore(staged)

    steps = [
        ("restore_threads", restore_threads),
        ("inject_restorer", inject_restorer),
        ("restore_memory", restore_memory),
    ]
    # create, init, placeholders, import: resolved lazily since the
    # registry is populated when the host runtime is constructed
    steps += [(name, fn) for name, fn in _resolve(proc, entries, files.RESTORE_PHASE)]
    plan = RestorerPlan(steps)
    proc.restorer_plan = plan
    try:
        plan.run()
    except BaseException:
        # abort: nothing from this restore may run
        proc.terminate()
        raise
    _cleanup(proc)
    return proc


def _cleanup(proc: SimProcess) -> None:
    proc.free_region(RESTORER_TOKEN)
    for idx, he in enumerate(proc.host.enclaves):
        proc.regions[f"enclave-{idx}"] = Region(f"enclave-{idx}", ENCLAVE, enclave=he.enclave)
    for token in [t for t, r in proc.regions.items() if r.tag == EXPORT_BUFFER]:
        proc.free_region(token)
    resumed = set(proc.host.resume_interrupted())
    for t in proc.threads:
        if t.enclave_idx is None:
            continue
        if (t.enclave_idx, t.tcs) in resumed:
            t.state = "running"
        elif t.state in ("running", "parked"):
            t.state = "dead"
    proc.seized = False
    # re-prepare so the restored process can migrate again
    for he in proc.host.enclaves:
        ctrlib.prepare_migration(he.enclave, provider=he.provider)
    proc.host.host_prepare()


def self_migrate(
    process: SimProcess,
    image_path: str | os.PathLike,
    escrow=None,
) -> SimProcess:
    """Checkpoint then restore on the same node, strictly one after the other."""
    escrow = escrow if escrow is not None else process.escrow
    checkpoint(process, image_path)
    return restore(image_path, escrow, manifest_path=process.manifest_path)
