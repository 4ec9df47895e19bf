"""Trusted migration library linked into every simulated enclave.

Runs inside the enclave: the key, the cipher context and the plaintext
never leave enclave memory except as the authenticated ciphertext.
"""

from __future__ import annotations

import logging
import os
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol

from .. import policy
from ..crypto import KEY_SIZE, NONCE_SIZE, get_provider
from ..enclave import core
from ..enclave.core import EnclaveInstance, ThreadState
from ..enclave.memory import CIPHER_CTX_OFFSET, CIPHER_CTX_SIZE, SSA_FRAME_SIZE, memset
from ..enclave.vm import FN_EXPORT_ALL, FN_IMPORT_ALL, FN_INIT_CONTEXT
from ..errors import (
    BufferTooSmall,
    CssaMismatch,
    MalformedImage,
    MeasurementMismatch,
    MigrationError,
    MonitorError,
    NotPrepared,
    ThreadsNotQuiesced,
)
from . import image as img

log = logging.getLogger(__name__)

POISON_IP = 0xDEAD_C0DE_DEAD_C0DE
_CTX_MAGIC = b"CTX1"
_CTX = struct.Struct("<4sI32s16s")


class KeyEscrow(Protocol):
    """Enclave-side endpoint of the key service channel."""

    def deposit(self, enclave: EnclaveInstance, image_id: bytes, key: bytes) -> None: ...

    def fetch(self, enclave: EnclaveInstance, image_id: bytes) -> bytes: ...


class ThreadEntryExitMonitor:
    """Counts enclave entries and normal exits per TCS.

    An asynchronous exit is invisible to enclave software, so a thread
    that left through an AEX keeps one more entry than exits; that
    surplus is the inferred CSSA.
    """

    def __init__(self, n_tcs: int):
        self.entries = [0] * n_tcs
        self.exits = [0] * n_tcs
        self._lock = threading.Lock()

    def record_entry(self, thread_id: int) -> None:
        with self._lock:
            self.entries[thread_id] += 1

    def record_exit(self, thread_id: int) -> None:
        with self._lock:
            if self.exits[thread_id] >= self.entries[thread_id]:
                raise MonitorError(f"exit without matching entry on thread {thread_id}")
            self.exits[thread_id] += 1

    def inferred_cssa(self, thread_id: int) -> int:
        with self._lock:
            return self.entries[thread_id] - self.exits[thread_id]


@dataclass
class MigrationContext:
    migration_key: bytes
    image_id: bytes
    section_table: dict[str, tuple[int, int]]
    provider: str = "hw"
    exported: bool = False
    # (thread_id, slot, original ip) for poisoned SSA frames
    stash: list[tuple[int, int, int]] = field(default_factory=list)


@dataclass(frozen=True)
class ExportReceipt:
    image_id: bytes
    byte_count: int


def monitor(enclave: EnclaveInstance) -> ThreadEntryExitMonitor:
    return enclave.trusted["monitor"]


def record_entry(enclave: EnclaveInstance, thread_id: int) -> None:
    monitor(enclave).record_entry(thread_id)


def record_exit(enclave: EnclaveInstance, thread_id: int) -> None:
    monitor(enclave).record_exit(thread_id)


def inferred_cssa(enclave: EnclaveInstance, thread_id: int) -> int:
    return monitor(enclave).inferred_cssa(thread_id)


def attach(enclave: EnclaveInstance) -> None:
    """Link the library into a freshly created enclave."""
    mon = ThreadEntryExitMonitor(len(enclave.tcs))
    enclave.trusted["monitor"] = mon
    enclave.entry_hooks.append(mon.record_entry)
    enclave.exit_hooks.append(mon.record_exit)


def _context(enclave: EnclaveInstance) -> MigrationContext:
    ctx = enclave.trusted.get("ctx")
    if ctx is None:
        raise NotPrepared("prepare_migration has not run")
    return ctx


def _cipher_ctx_region(enclave: EnclaveInstance) -> memoryview:
    return memoryview(enclave.memory.data.buf)[
        CIPHER_CTX_OFFSET : CIPHER_CTX_OFFSET + CIPHER_CTX_SIZE
    ]


def section_table(enclave: EnclaveInstance) -> dict[str, tuple[int, int]]:
    return {s.name: (s.base, s.size) for s in enclave.memory.exported_sections()}


# -- preparation ---------------------------------------------------------------


def _init_context(enclave: EnclaveInstance, thread_id: int, args: tuple) -> MigrationContext:
    key, image_id, provider = (tuple(args) + (None, None, None))[:3]
    key = key if key is not None else os.urandom(KEY_SIZE)
    image_id = image_id if image_id is not None else os.urandom(16)
    if len(key) != KEY_SIZE or len(image_id) != 16:
        raise MigrationError("migration key must be 32 bytes and image id 16 bytes")
    ctx = MigrationContext(key, image_id, section_table(enclave), provider or "hw")
    get_provider(ctx.provider)
    # the cipher context lives at a fixed data-section offset
    _cipher_ctx_region(enclave)[: _CTX.size] = _CTX.pack(_CTX_MAGIC, 1, key, image_id)
    enclave.trusted["ctx"] = ctx
    return ctx


def prepare_migration(
    enclave: EnclaveInstance,
    *,
    provider: str = "hw",
    key: Optional[bytes] = None,
    image_id: Optional[bytes] = None,
) -> None:
    """Generate a migration key and image id and record the section table.

    Calling again rotates both.  ``key`` and ``image_id`` exist as test
    hooks only.
    """
    core.ecall(enclave, FN_INIT_CONTEXT, (key, image_id, provider))


def required_export_size(enclave: EnclaveInstance) -> int:
    _context(enclave)
    plain = sum(s.size for s in enclave.memory.exported_sections())
    return img.header_size(enclave.config.max_threads) + plain + img.TAG_SIZE


# -- checkpoint ----------------------------------------------------------------


def _poison(enclave: EnclaveInstance, ctx: MigrationContext, cssa: list[int]) -> None:
    ssa = enclave.memory.ssa.buf
    stash = []
    for tid, depth in enumerate(cssa):
        for slot in range(depth):
            off = enclave.ssa_frame_offset(tid, slot)
            (ip,) = struct.unpack_from("<Q", ssa, off)
            stash.append((tid, slot, ip))
            struct.pack_into("<Q", ssa, off, POISON_IP)
    # stash is kept in the migration reserve, which is never exported
    reserve = enclave.memory.reserve.buf
    base = enclave.config.ssa_depth * SSA_FRAME_SIZE
    for i, (tid, slot, ip) in enumerate(stash):
        struct.pack_into("<IIQ", reserve, base + 16 * i, tid, slot, ip)
    ctx.stash = stash


def _unpoison(enclave: EnclaveInstance, ctx: MigrationContext) -> None:
    ssa = enclave.memory.ssa.buf
    for tid, slot, ip in ctx.stash:
        struct.pack_into("<Q", ssa, enclave.ssa_frame_offset(tid, slot), ip)
    ctx.stash = []


def _serialize(enclave: EnclaveInstance, ctx: MigrationContext) -> bytearray:
    """data | heap | stacks | ssa, with the cipher context blanked and real IPs."""
    secs = enclave.memory.exported_sections()
    out = bytearray(sum(s.size for s in secs))
    pos = 0
    for s in secs:
        out[pos : pos + s.size] = s.buf
        if s is enclave.memory.ssa:
            for tid, slot, ip in ctx.stash:
                struct.pack_into("<Q", out, pos + enclave.ssa_frame_offset(tid, slot), ip)
        pos += s.size
    # the key lives in the cipher context; it never enters the plaintext
    out[CIPHER_CTX_OFFSET : CIPHER_CTX_OFFSET + CIPHER_CTX_SIZE] = bytes(CIPHER_CTX_SIZE)
    return out


def _export_all(enclave: EnclaveInstance, thread_id: int, args: tuple) -> ExportReceipt:
    out_buffer, escrow, nonce, chunk_hook = (tuple(args) + (None,) * 4)[:4]
    ctx = _context(enclave)
    if ctx.exported:
        raise NotPrepared("image already exported under this key; prepare again")
    with enclave.lock:
        busy = [t for t in enclave.worker_tids if enclave.tcs[t].state == ThreadState.IN_ENCLAVE]
        if busy:
            raise ThreadsNotQuiesced(f"threads still inside the enclave: {busy}")
        need = required_export_size(enclave)
        if out_buffer is None or len(out_buffer) < need:
            raise BufferTooSmall(f"export needs {need} bytes")
        enclave.ecall_barrier = True
        cssa = [inferred_cssa(enclave, t) for t in enclave.worker_tids]
        _poison(enclave, ctx, cssa)
    try:
        _checkpoint_step(enclave, chunk_hook, "poisoned")
        plaintext = _serialize(enclave, ctx)
        _checkpoint_step(enclave, chunk_hook, "serialized")
        nonce = nonce if nonce is not None else os.urandom(NONCE_SIZE)
        header = img.ImageHeader(
            image_id=ctx.image_id,
            measurement=enclave.measurement,
            sections=tuple(ctx.section_table[s.name] for s in enclave.memory.exported_sections()),
            cssa=tuple(cssa),
            nonce=nonce,
            ciphertext_length=len(plaintext),
        )
        aad = header.encode()
        view = memoryview(out_buffer)
        view[: len(aad)] = aad
        # ciphertext and tag go straight into the host buffer
        get_provider(ctx.provider).encrypt_into(ctx.migration_key, nonce, plaintext, aad, view[len(aad) : need])
        memset(plaintext, 0)
        _checkpoint_step(enclave, chunk_hook, "encrypted")
        if escrow is not None:
            escrow.deposit(enclave, ctx.image_id, ctx.migration_key)
    except BaseException:
        with enclave.lock:
            _unpoison(enclave, ctx)
            enclave.ecall_barrier = False
        raise
    with enclave.lock:
        ctx.exported = True
        # resume stays blocked until the host either destroys the enclave or
        # the developer's fork opt-in releases it
        enclave.migration_locked = True
    log.debug("exported image %s (%d bytes)", ctx.image_id.hex(), need)
    return ExportReceipt(ctx.image_id, need)


def _checkpoint_step(enclave: EnclaveInstance, hook: Optional[Callable], stage: str) -> None:
    """Give the host a chance to interrupt the migration thread between stages."""
    if hook is None:
        return
    hook(stage)
    if enclave.tcs[enclave.migration_tid].state != ThreadState.IN_ENCLAVE:
        raise MigrationError("migration thread was held outside the enclave")


def enclave_export_all(
    enclave: EnclaveInstance,
    out_buffer,
    *,
    escrow: Optional[KeyEscrow] = None,
    nonce: Optional[bytes] = None,
    chunk_hook: Optional[Callable[[str], None]] = None,
) -> ExportReceipt:
    """Serialize, encrypt and write the paused enclave into ``out_buffer``."""
    return core.ecall(enclave, FN_EXPORT_ALL, (out_buffer, escrow, nonce, chunk_hook)).result


def release_for_fork(enclave: EnclaveInstance) -> None:
    """Restore stashed instruction pointers so the source may keep running."""
    with enclave.lock:
        ctx = _context(enclave)
        _unpoison(enclave, ctx)
        enclave.migration_locked = False
        enclave.ecall_barrier = False


# -- restore -------------------------------------------------------------------


def _import_all(enclave: EnclaveInstance, thread_id: int, args: tuple) -> policy.PolicyVerdict:
    in_buffer, key = args[0], args[1]
    _context(enclave)
    header, hlen = img.parse_header(in_buffer)
    if header.measurement != enclave.measurement:
        raise MeasurementMismatch("image was produced by a different enclave")
    own = tuple(section_table(enclave)[s.name] for s in enclave.memory.exported_sections())
    if header.sections != own:
        raise MalformedImage("section table does not match this enclave's layout")
    for tid in enclave.worker_tids:
        if inferred_cssa(enclave, tid) != header.cssa[tid]:
            raise CssaMismatch(
                f"thread {tid}: image cssa {header.cssa[tid]}, "
                f"staged {inferred_cssa(enclave, tid)}"
            )
    ctx = _context(enclave)
    with enclave.lock:
        enclave.ecall_barrier = True
    try:
        mk = key if isinstance(key, (bytes, bytearray)) else key.fetch(enclave, header.image_id)
        view = memoryview(in_buffer)
        ct_end = hlen + header.ciphertext_length
        if len(view) < ct_end + img.TAG_SIZE:
            raise MalformedImage("image is truncated")
        plaintext = bytearray(header.ciphertext_length)
        get_provider(ctx.provider).decrypt_into(
            bytes(mk), header.nonce, view[hlen : ct_end + img.TAG_SIZE], bytes(view[:hlen]), plaintext
        )
        with enclave.lock:
            _layout(enclave, plaintext)
        memset(plaintext, 0)
        verdict = policy.evaluate(enclave)
    finally:
        with enclave.lock:
            enclave.ecall_barrier = False
    if not verdict.allow_resume:
        with enclave.lock:
            enclave.migration_locked = True
        core.destroy_enclave(enclave)
    return verdict


def _layout(enclave: EnclaveInstance, plaintext: bytes) -> None:
    pos = 0
    view = memoryview(plaintext)
    for s in enclave.memory.exported_sections():
        chunk = view[pos : pos + s.size]
        if s is enclave.memory.data:
            # keep our own decryption context intact
            lo, hi = CIPHER_CTX_OFFSET, CIPHER_CTX_OFFSET + CIPHER_CTX_SIZE
            s.buf[:lo] = chunk[:lo]
            s.buf[hi:] = chunk[hi:]
        else:
            s.buf[:] = chunk
        pos += s.size


def enclave_import_all(enclave: EnclaveInstance, in_buffer, key) -> policy.PolicyVerdict:
    """Authenticate, decrypt and lay out an image, then run the policy gate.

    ``key`` is either the migration key itself or a :class:`KeyEscrow`
    through which the enclave fetches it.
    """
    return core.ecall(enclave, FN_IMPORT_ALL, (in_buffer, key)).result


def init_context(enclave: EnclaveInstance, provider: str = "hw") -> None:
    prepare_migration(enclave, provider=provider)


core.register_trusted_ecall(FN_INIT_CONTEXT, _init_context)
core.register_trusted_ecall(FN_EXPORT_ALL, _export_all)
core.register_trusted_ecall(FN_IMPORT_ALL, _import_all)
core.register_library_init(attach)
