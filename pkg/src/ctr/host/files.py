"""On-disk artefacts the host leaves for the migration agent.

Function manifest: UTF-8 text, one ``name=token`` per line, invoked in file
order.  Blank lines and ``#`` comments are ignored.

Staged parameters: little-endian binary::

    magic "CTRS" | u16 version | u16 enclave count
    per enclave:
        u16 len, program name
        u64 heap_size | u64 stack_size | u16 max_threads | u16 ssa_depth
        u64 reserve_size | u8 debug | u32 len, data_init
        u8 crypto provider (0 hw, 1 sw)
        u16 len, export-buffer region token
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

from ..enclave.memory import EnclaveConfig
from ..errors import ManifestError, ManifestMissing

MANIFEST_ORDER = (
    "export_all_wrapper",
    "destroy_enclave_wrapper",
    "create_enclave_wrapper",
    "init_context_wrapper",
    "spawn_placeholders_wrapper",
    "import_all_wrapper",
)
SOURCE_PHASE = MANIFEST_ORDER[:2]
RESTORE_PHASE = MANIFEST_ORDER[2:]


def write_manifest(path: str | os.PathLike, entries: list[tuple[str, str]]) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    tmp = p.with_name(p.name + ".tmp")
    tmp.write_text("".join(f"{name}={token}\n" for name, token in entries), encoding="utf-8")
    os.replace(tmp, p)


def parse_manifest(text: str) -> list[tuple[str, str]]:
    entries = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        name, sep, token = line.partition("=")
        if not sep or not name or not token:
            raise ManifestError(f"manifest line {n}: expected name=token")
        entries.append((name.strip(), token.strip()))
    return entries


def read_manifest(path: str | os.PathLike) -> list[tuple[str, str]]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ManifestMissing(f"no function manifest at {path}") from None
    return parse_manifest(text)


PROVIDER_IDS = {"hw": 0, "sw": 1}
_PROVIDER_NAMES = {v: k for k, v in PROVIDER_IDS.items()}
_HEAD = struct.Struct("<4sHH")
_CFG = struct.Struct("<QQHHQB")


@dataclass(frozen=True)
class StagedEnclave:
    program: str
    config: EnclaveConfig
    provider: str
    buffer_token: str


def _str(s: str) -> bytes:
    raw = s.encode()
    return struct.pack("<H", len(raw)) + raw


def encode_staged(items: list[StagedEnclave]) -> bytes:
    out = [_HEAD.pack(b"CTRS", 1, len(items))]
    for it in items:
        c = it.config
        out.append(_str(it.program))
        out.append(_CFG.pack(c.heap_size, c.stack_size, c.max_threads, c.ssa_depth, c.reserve_size, int(c.debug)))
        out.append(struct.pack("<I", len(c.data_init)) + bytes(c.data_init))
        out.append(bytes([PROVIDER_IDS[it.provider]]))
        out.append(_str(it.buffer_token))
    return b"".join(out)


def decode_staged(raw: bytes) -> list[StagedEnclave]:
    try:
        magic, version, count = _HEAD.unpack_from(raw, 0)
        if magic != b"CTRS" or version != 1:
            raise ManifestError("not a staged-parameter file")
        pos = _HEAD.size
        items = []

        def take_str() -> str:
            nonlocal pos
            (n,) = struct.unpack_from("<H", raw, pos)
            s = raw[pos + 2 : pos + 2 + n].decode()
            pos += 2 + n
            return s

        for _ in range(count):
            program = take_str()
            heap, stack, threads, depth, reserve, debug = _CFG.unpack_from(raw, pos)
            pos += _CFG.size
            (n,) = struct.unpack_from("<I", raw, pos)
            data_init = raw[pos + 4 : pos + 4 + n]
            pos += 4 + n
            provider = _PROVIDER_NAMES[raw[pos]]
            pos += 1
            token = take_str()
            cfg = EnclaveConfig(
                heap_size=heap,
                stack_size=stack,
                max_threads=threads,
                data_init=bytes(data_init),
                ssa_depth=depth,
                reserve_size=reserve,
                debug=bool(debug),
            )
            items.append(StagedEnclave(program, cfg, provider, token))
        if pos != len(raw):
            raise ManifestError("trailing bytes in staged-parameter file")
        return items
    except (struct.error, KeyError, IndexError, UnicodeDecodeError) as exc:
        raise ManifestError(f"corrupt staged-parameter file: {exc}") from None
