"""Wire protocol of the migration key service.

Every message travels in a frame: ``u32 big-endian length`` followed by
that many payload bytes.  The payload starts with a one-byte tag; the
remaining fields are fixed-order and little-endian.  See docs/formats.md.
"""

from __future__ import annotations

import hashlib
import socket
import struct
from dataclasses import dataclass
from typing import Callable, Optional, Union

from ..errors import CtrError, ProtocolError, from_code
from .attestation import EVIDENCE_SIZE, AttestationEvidence

MAX_FRAME = 1 << 16

ROLE_SOURCE = 1
ROLE_DESTINATION = 2
ROLE_SERVICE = 3

SEALED_KEY_SIZE = 12 + 32 + 16


@dataclass(frozen=True)
class AttestChallenge:
    TAG = 1
    role: int
    nonce: bytes  # 16
    ephemeral_pub: bytes  # 32


@dataclass(frozen=True)
class AttestResponse:
    TAG = 2
    nonce: bytes  # challenge for the peer (zeros when none)
    ephemeral_pub: bytes
    evidence: AttestationEvidence


@dataclass(frozen=True)
class Deposit:
    TAG = 3
    image_id: bytes
    sealed_key: bytes


@dataclass(frozen=True)
class DepositAck:
    TAG = 4
    image_id: bytes
    ack: bytes  # HMAC-SHA256 under the session key


@dataclass(frozen=True)
class Fetch:
    TAG = 5
    image_id: bytes


@dataclass(frozen=True)
class FetchResponse:
    TAG = 6
    image_id: bytes
    sealed_key: bytes


@dataclass(frozen=True)
class Error:
    TAG = 7
    code: str
    message: str

    def exception(self) -> CtrError:
        return from_code(self.code, self.message)


Message = Union[AttestChallenge, AttestResponse, Deposit, DepositAck, Fetch, FetchResponse, Error]

_CHALLENGE = struct.Struct("<B16s32s")
_RESPONSE = struct.Struct(f"<16s32s{EVIDENCE_SIZE}s")
_DEPOSIT = struct.Struct(f"<16s{SEALED_KEY_SIZE}s")
_ACK = struct.Struct("<16s32s")
_FETCH = struct.Struct("<16s")


def encode(msg: Message) -> bytes:
    tag = bytes([msg.TAG])
    if isinstance(msg, AttestChallenge):
        return tag + _CHALLENGE.pack(msg.role, msg.nonce, msg.ephemeral_pub)
    if isinstance(msg, AttestResponse):
        return tag + _RESPONSE.pack(msg.nonce, msg.ephemeral_pub, msg.evidence.encode())
    if isinstance(msg, (Deposit, FetchResponse)):
        return tag + _DEPOSIT.pack(msg.image_id, msg.sealed_key)
    if isinstance(msg, DepositAck):
        return tag + _ACK.pack(msg.image_id, msg.ack)
    if isinstance(msg, Fetch):
        return tag + _FETCH.pack(msg.image_id)
    if isinstance(msg, Error):
        code = msg.code.encode()
        text = msg.message.encode()[:4096]
        return tag + struct.pack("<H", len(code)) + code + struct.pack("<H", len(text)) + text
    raise TypeError(f"not a protocol message: {msg!r}")


def decode(payload: bytes) -> Message:
    if not payload:
        raise ProtocolError("empty frame")
    tag, body = payload[0], payload[1:]
    try:
        if tag == AttestChallenge.TAG:
            return AttestChallenge(*_CHALLENGE.unpack(body))
        if tag == AttestResponse.TAG:
            nonce, pub, ev = _RESPONSE.unpack(body)
            return AttestResponse(nonce, pub, AttestationEvidence.decode(ev))
        if tag == Deposit.TAG:
            return Deposit(*_DEPOSIT.unpack(body))
        if tag == FetchResponse.TAG:
            return FetchResponse(*_DEPOSIT.unpack(body))
        if tag == DepositAck.TAG:
            return DepositAck(*_ACK.unpack(body))
        if tag == Fetch.TAG:
            return Fetch(*_FETCH.unpack(body))
        if tag == Error.TAG:
            (n,) = struct.unpack_from("<H", body, 0)
            code = body[2 : 2 + n].decode()
            (m,) = struct.unpack_from("<H", body, 2 + n)
            text = body[4 + n : 4 + n + m].decode(errors="replace")
            if len(body) != 4 + n + m:
                raise ProtocolError("trailing bytes in Error")
            return Error(code, text)
    except struct.error as exc:
        raise ProtocolError(f"bad body for tag {tag}: {exc}") from None
    raise ProtocolError(f"unknown message tag {tag}")


def frame(payload: bytes) -> bytes:
    return struct.pack(">I", len(payload)) + payload


def transcript_hash(challenge: AttestChallenge, server_nonce: bytes, server_pub: bytes) -> bytes:
    """Channel binding: hash of the handshake so far."""
    h = hashlib.sha256(b"CTR-MKS-HS1")
    h.update(encode(challenge))
    h.update(server_nonce)
    h.update(server_pub)
    return h.digest()


class FramedStream:
    """Frame reader/writer over a socket, with an optional wire tap."""

    def __init__(self, sock: socket.socket, tap: Optional[Callable[[str, bytes], None]] = None):
        self.sock = sock
        self.tap = tap

    def _recv_exact(self, n: int) -> bytes:
        chunks = bytearray()
        while len(chunks) < n:
            part = self.sock.recv(n - len(chunks))
            if not part:
                raise ProtocolError("connection closed mid-frame")
            chunks += part
        return bytes(chunks)

    def send(self, msg: Message) -> None:
        data = frame(encode(msg))
        if self.tap:
            self.tap("send", data)
        self.sock.sendall(data)

    def recv(self) -> Message:
        head = self._recv_exact(4)
        (n,) = struct.unpack(">I", head)
        if n > MAX_FRAME:
            raise ProtocolError(f"frame of {n} bytes exceeds limit")
        body = self._recv_exact(n)
        if self.tap:
            self.tap("recv", head + body)
        return decode(body)

    def recv_expect(self, kind: type) -> Message:
        msg = self.recv()
        if isinstance(msg, Error):
            raise msg.exception()
        if not isinstance(msg, kind):
            raise ProtocolError(f"expected {kind.__name__}, got {type(msg).__name__}")
        return msg
