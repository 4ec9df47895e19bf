"""Binary layout of an encrypted enclave image.

All integers little-endian::

    magic "CTR1"            4
    version u16             2
    image_id                16
    measurement             32
    thread count n u16      2
    section table           (3 + n) x (u64 base, u64 size)   data, heap, stack0..n-1, ssa
    per-thread cssa         n x u16
    nonce                   12
    ciphertext length u64   8
    ciphertext              ...
    tag                     16

Everything up to and including the ciphertext length is the header and is
authenticated as AES-GCM associated data.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from ..errors import MalformedImage

MAGIC = b"CTR1"
VERSION = 1
TAG_SIZE = 16
NONCE_SIZE = 12
_FIXED = struct.Struct("<4sH16s32sH")
_ENTRY = struct.Struct("<QQ")


def header_size(n_threads: int) -> int:
    return _FIXED.size + _ENTRY.size * (3 + n_threads) + 2 * n_threads + NONCE_SIZE + 8


@dataclass(frozen=True)
class ImageHeader:
    image_id: bytes
    measurement: bytes
    sections: tuple[tuple[int, int], ...]
    cssa: tuple[int, ...]
    nonce: bytes
    ciphertext_length: int
    version: int = VERSION

    @property
    def n_threads(self) -> int:
        return len(self.cssa)

    @property
    def interrupted_threads(self) -> list[int]:
        return [tid for tid, c in enumerate(self.cssa) if c]

    @property
    def plaintext_length(self) -> int:
        return sum(size for _, size in self.sections)

    def encode(self) -> bytes:
        if len(self.sections) != 3 + len(self.cssa):
            raise ValueError("section table must hold data, heap, one stack per thread, ssa")
        out = [_FIXED.pack(MAGIC, self.version, self.image_id, self.measurement, len(self.cssa))]
        out += [_ENTRY.pack(b, s) for b, s in self.sections]
        out += [struct.pack("<H", c) for c in self.cssa]
        out.append(self.nonce)
        out.append(struct.pack("<Q", self.ciphertext_length))
        return b"".join(out)


@dataclass(frozen=True)
class EncryptedEnclaveImage:
    header: ImageHeader
    header_bytes: bytes
    ciphertext: bytes
    tag: bytes

    def encode(self) -> bytes:
        return self.header_bytes + self.ciphertext + self.tag

    @property
    def byte_count(self) -> int:
        return len(self.header_bytes) + len(self.ciphertext) + len(self.tag)


def parse_header(buf) -> tuple[ImageHeader, int]:
    """Decode the header from the start of ``buf``; returns (header, header_len)."""
    view = memoryview(buf)
    total = len(view)
    if total < header_size(0) + TAG_SIZE:
        raise MalformedImage("buffer shorter than the smallest image")
    magic, version, image_id, measurement, n = _FIXED.unpack_from(view, 0)
    if magic != MAGIC:
        raise MalformedImage(f"bad magic {bytes(magic)!r}")
    if version != VERSION:
        raise MalformedImage(f"unsupported image version {version}")
    hlen = header_size(n)
    if hlen + TAG_SIZE > total:
        raise MalformedImage(f"header for {n} threads overruns the buffer")
    sections = tuple(_ENTRY.unpack_from(view, _FIXED.size + _ENTRY.size * i) for i in range(3 + n))
    cssa_off = _FIXED.size + _ENTRY.size * (3 + n)
    cssa = struct.unpack_from(f"<{n}H", view, cssa_off)
    nonce = bytes(view[cssa_off + 2 * n : cssa_off + 2 * n + NONCE_SIZE])
    (ct_len,) = struct.unpack_from("<Q", view, hlen - 8)
    if hlen + ct_len + TAG_SIZE > total:
        raise MalformedImage("ciphertext length overruns the buffer")
    header = ImageHeader(
        image_id=bytes(image_id),
        measurement=bytes(measurement),
        sections=tuple(sections),
        cssa=tuple(cssa),
        nonce=nonce,
        ciphertext_length=ct_len,
        version=version,
    )
    if header.plaintext_length != ct_len:
        raise MalformedImage("section sizes disagree with ciphertext length")
    return header, hlen


def decode(buf) -> EncryptedEnclaveImage:
    header, hlen = parse_header(buf)
    view = memoryview(buf)
    ct_end = hlen + header.ciphertext_length
    return EncryptedEnclaveImage(
        header=header,
        header_bytes=bytes(view[:hlen]),
        ciphertext=bytes(view[hlen:ct_end]),
        tag=bytes(view[ct_end : ct_end + TAG_SIZE]),
    )
