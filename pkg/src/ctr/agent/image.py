"""Process image container written by ``checkpoint``.

Little-endian, versioned, one CRC-32 per section::

    magic "CTRP" | u16 version | u16 section count
    section: kind[4] | u16 name length | name | u64 payload length | u32 crc32 | payload

Kinds: META (JSON), THRD (JSON thread table), RSRC (JSON descriptors),
MANI (manifest text), STAG (staged parameters), REGN (one memory region;
payload is u8 tag id followed by the bytes).
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import CorruptProcessImage
from .process import TAGS

MAGIC = b"CTRP"
VERSION = 1
_HEAD = struct.Struct("<4sHH")
_SEC = struct.Struct("<4sH")
_LEN = struct.Struct("<QI")


@dataclass
class ProcessImage:
    meta: dict
    threads: list[dict]
    resources: dict[int, str]
    manifest: str
    staged: bytes
    # token -> (tag, contents); contents may be any buffer
    regions: dict[str, tuple[str, bytes]] = field(default_factory=dict)
    version: int = VERSION

    def _sections(self):
        yield b"META", "", [json.dumps(self.meta, sort_keys=True).encode()]
        yield b"THRD", "", [json.dumps(self.threads, sort_keys=True).encode()]
        rsrc = {str(k): v for k, v in self.resources.items()}
        yield b"RSRC", "", [json.dumps(rsrc, sort_keys=True).encode()]
        yield b"MANI", "", [self.manifest.encode()]
        yield b"STAG", "", [bytes(self.staged)]
        for token, (tag, data) in self.regions.items():
            yield b"REGN", token, [bytes([TAGS.index(tag)]), data]

    def chunks(self):
        """The encoded image as a sequence of buffers (regions are not copied)."""
        sections = list(self._sections())
        yield _HEAD.pack(MAGIC, self.version, len(sections))
        for kind, name, parts in sections:
            raw = name.encode()
            crc = 0
            for part in parts:
                crc = zlib.crc32(part, crc)
            length = sum(len(part) for part in parts)
            yield _SEC.pack(kind, len(raw)) + raw + _LEN.pack(length, crc)
            yield from parts

    def encode(self) -> bytes:
        return b"".join(self.chunks())

    @classmethod
    def decode(cls, raw: bytes) -> "ProcessImage":
        try:
            magic, version, count = _HEAD.unpack_from(raw, 0)
        except struct.error:
            raise CorruptProcessImage("truncated image header") from None
        if magic != MAGIC:
            raise CorruptProcessImage("not a process image")
        if version != VERSION:
            raise CorruptProcessImage(f"unsupported process image version {version}")
        pos = _HEAD.size
        raw = memoryview(raw)
        parts: dict[bytes, bytes] = {}
        regions = {}
        try:
            for _ in range(count):
                kind, n = _SEC.unpack_from(raw, pos)
                pos += _SEC.size
                name = bytes(raw[pos : pos + n]).decode()
                pos += n
                length, crc = _LEN.unpack_from(raw, pos)
                pos += _LEN.size
                payload = raw[pos : pos + length]
                pos += length
                if len(payload) != length or zlib.crc32(payload) != crc:
                    raise CorruptProcessImage(f"checksum mismatch in {bytes(kind).decode(errors='replace')} {name}")
                if kind == b"REGN":
                    regions[name] = (TAGS[payload[0]], payload[1:])
                else:
                    parts[kind] = bytes(payload)
            if pos != len(raw):
                raise CorruptProcessImage("trailing bytes after last section")
            return cls(
                meta=json.loads(parts[b"META"]),
                threads=json.loads(parts[b"THRD"]),
                resources={int(k): v for k, v in json.loads(parts[b"RSRC"]).items()},
                manifest=parts[b"MANI"].decode(),
                staged=parts[b"STAG"],
                regions=regions,
                version=version,
            )
        except CorruptProcessImage:
            raise
        except (struct.error, KeyError, IndexError, ValueError, UnicodeDecodeError) as exc:
            raise CorruptProcessImage(f"malformed process image: {exc}") from None

    def write(self, path: str | os.PathLike) -> None:
        """Write atomically and durably: the file is complete once it exists."""
        p = Path(path)
        tmp = p.with_name(p.name + ".part")
        with open(tmp, "wb") as fh:
            for chunk in self.chunks():
                fh.write(chunk)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, p)
        dfd = os.open(p.parent, os.O_RDONLY)
        try:
            os.fsync(dfd)
        finally:
            os.close(dfd)

    @classmethod
    def read(cls, path: str | os.PathLike) -> "ProcessImage":
        # a missing file is an ordinary I/O error, not an integrity failure
        return cls.decode(Path(path).read_bytes())
