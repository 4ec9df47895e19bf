"""Enclave-side escrow client.

Implements the ``KeyEscrow`` protocol used by the migration library.  The
handshake and key sealing run on behalf of the enclave; the socket is the
only part the host touches, and it only sees sealed frames.
"""

from __future__ import annotations

import hmac
import socket
from typing import Callable, Optional, Union

from ..errors import AuthenticationFailed, ProtocolError
from .attestation import MKS_MEASUREMENT, Platform
from .channel import ClientHandshake, Session
from .protocol import (
    ROLE_DESTINATION,
    ROLE_SOURCE,
    AttestResponse,
    Deposit,
    DepositAck,
    Fetch,
    FetchResponse,
    FramedStream,
)
from .service import MigrationKeyService, parse_address, socketpair_stream

Tap = Callable[[str, bytes], None]


class MksClient:
    def __init__(
        self,
        target: Union[str, MigrationKeyService],
        platform: Platform,
        *,
        trusted_platforms: Optional[list[bytes]] = None,
        service_measurement: bytes = MKS_MEASUREMENT,
        timeout: float = 30.0,
        tap: Optional[Tap] = None,
    ):
        self.target = target
        self.platform = platform
        self.trusted = list(trusted_platforms or [platform.public_key])
        self.service_measurement = service_measurement
        self.timeout = timeout
        self.tap = tap

    def _connect(self) -> socket.socket:
        if isinstance(self.target, MigrationKeyService):
            sock = socketpair_stream(self.target)
        else:
            sock = socket.create_connection(parse_address(self.target), timeout=self.timeout)
        sock.settimeout(self.timeout)
        return sock

    def _open(self, sock: socket.socket, role: int, enclave) -> tuple[FramedStream, Session]:
        stream = FramedStream(sock, self.tap)
        hs = ClientHandshake(role, self.platform, enclave, self.trusted, self.service_measurement)
        stream.send(hs.challenge)
        reply, session = hs.respond(stream.recv_expect(AttestResponse))
        stream.send(reply)
        return stream, session

    def deposit(self, enclave, image_id: bytes, key: bytes) -> None:
        with self._connect() as sock:
            stream, session = self._open(sock, ROLE_SOURCE, enclave)
            sealed = session.seal(b"deposit", image_id, key)
            stream.send(Deposit(image_id, sealed))
            ack = stream.recv_expect(DepositAck)
            if ack.image_id != image_id or not hmac.compare_digest(
                ack.ack, session.ack(image_id, sealed)
            ):
                raise AuthenticationFailed("deposit acknowledgement did not verify")

    def fetch(self, enclave, image_id: bytes) -> bytes:
        with self._connect() as sock:
            stream, session = self._open(sock, ROLE_DESTINATION, enclave)
            stream.send(Fetch(image_id))
            resp = stream.recv_expect(FetchResponse)
            if resp.image_id != image_id:
                raise ProtocolError("response for a different image")
            return session.open(b"fetch", image_id, resp.sealed_key)
