"""Migration key service: escrow logic plus a threaded TCP front end."""

from __future__ import annotations

import logging
import socket
import socketserver
import threading
import time
from typing import Callable, Optional

from ..errors import (
    AlreadyReleased,
    BindingMismatch,
    ChannelNotAttested,
    CtrError,
    EscrowMeasurementMismatch,
    Expired,
    ProtocolError,
)
from .attestation import MKS_MEASUREMENT, Platform
from .channel import Session, server_begin, server_finish
from .protocol import (
    ROLE_DESTINATION,
    ROLE_SOURCE,
    AttestChallenge,
    AttestResponse,
    Deposit,
    DepositAck,
    Error,
    Fetch,
    FetchResponse,
    FramedStream,
)
from .store import EscrowRecord, EscrowStore, RecordState

log = logging.getLogger(__name__)

MeasurementPolicy = Callable[[bytes, bytes], bool]


def same_measurement(source: bytes, destination: bytes) -> bool:
    return source == destination


def allow_list(pairs: set[tuple[bytes, bytes]]) -> MeasurementPolicy:
    """Accept equal measurements plus explicitly listed (source, destination) pairs."""
    return lambda s, d: s == d or (s, d) in pairs


class MigrationKeyService:
    def __init__(
        self,
        store: EscrowStore,
        platform: Platform,
        trusted_platforms: Optional[list[bytes]] = None,
        *,
        max_age: Optional[float] = None,
        measurement_policy: MeasurementPolicy = same_measurement,
        clock: Callable[[], float] = time.time,
    ):
        self.store = store
        self.platform = platform
        self.trusted = list(trusted_platforms or [platform.public_key])
        self.max_age = max_age
        self.measurement_policy = measurement_policy
        self.clock = clock

    # handshake

    def handshake_begin(self, challenge: AttestChallenge):
        return server_begin(self.platform, challenge, MKS_MEASUREMENT)

    def handshake_finish(self, pending, response: AttestResponse) -> Session:
        return server_finish(pending, response, self.trusted)

    @staticmethod
    def _check_session(session: Optional[Session]) -> None:
        if session is None or not session.attested:
            raise ChannelNotAttested("no attested channel")
        if session.peer.channel_binding != session.binding:
            raise BindingMismatch("evidence does not belong to this channel")

    # escrow operations

    def deposit_key(self, session: Session, image_id: bytes, key: bytes) -> EscrowRecord:
        self._check_session(session)
        if len(key) != 32 or len(image_id) != 16:
            raise ProtocolError("bad key or image id length")
        with self.store.lock:
            return self.store.add(image_id, key, session.peer.measurement, self.clock())

    def fetch_key(self, session: Session, image_id: bytes) -> bytes:
        """Release the key once.  The release is durable before this returns."""
        self._check_session(session)
        with self.store.lock:
            rec = self.store.get(image_id)
            if rec.state is RecordState.RELEASED:
                raise AlreadyReleased(f"image {image_id.hex()} was already restored")
            if rec.state is RecordState.DEPOSITED and self._stale(rec, self.clock()):
                self.store.mark(image_id, "expire", self.clock())
            if rec.state is RecordState.EXPIRED:
                raise Expired(f"escrow for image {image_id.hex()} expired")
            if not self.measurement_policy(rec.source_measurement, session.peer.measurement):
                raise EscrowMeasurementMismatch("destination is not the same kind of enclave")
            self.store.mark(image_id, "release", self.clock())
            return self.store.unseal(rec)

    def _stale(self, rec: EscrowRecord, now: float, max_age: Optional[float] = None) -> bool:
        age = self.max_age if max_age is None else max_age
        return age is not None and now - rec.deposit_time > age

    def expire_stale(self, max_age: Optional[float] = None) -> int:
        now = self.clock()
        count = 0
        with self.store.lock:
            for rec in list(self.store.records.values()):
                if rec.state is RecordState.DEPOSITED and self._stale(rec, now, max_age):
                    self.store.mark(rec.image_id, "expire", now)
                    count += 1
        return count

    def state_of(self, image_id: bytes) -> RecordState:
        return self.store.get(image_id).state

    # wire

    def serve_connection(self, stream: FramedStream) -> None:
        """Run one connection: handshake, then any number of requests."""
        session = None
        try:
            challenge = stream.recv_expect(AttestChallenge)
            if challenge.role not in (ROLE_SOURCE, ROLE_DESTINATION):
                raise ProtocolError(f"role {challenge.role} may not talk to the service")
            response, pending = self.handshake_begin(challenge)
            stream.send(response)
            session = self.handshake_finish(pending, stream.recv_expect(AttestResponse))
            while True:
                try:
                    msg = stream.recv()
                except ProtocolError:
                    return  # peer closed
                stream.send(self._dispatch(session, msg))
        except CtrError as exc:
            log.info("request refused: %s %s", exc.code, exc)
            try:
                stream.send(Error(exc.code, str(exc)))
            except OSError:
                pass
        except OSError:
            pass

    def _dispatch(self, session: Session, msg):
        if isinstance(msg, Deposit):
            if session.role != ROLE_SOURCE:
                raise ProtocolError("only a source enclave may deposit")
            key = session.open(b"deposit", msg.image_id, msg.sealed_key)
            self.deposit_key(session, msg.image_id, key)
            return DepositAck(msg.image_id, session.ack(msg.image_id, msg.sealed_key))
        if isinstance(msg, Fetch):
            if session.role != ROLE_DESTINATION:
                raise ProtocolError("only a destination enclave may fetch")
            key = self.fetch_key(session, msg.image_id)
            return FetchResponse(msg.image_id, session.seal(b"fetch", msg.image_id, key))
        raise ProtocolError(f"unexpected {type(msg).__name__}")


class _Handler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        self.server.mks.serve_connection(FramedStream(self.request))


class MksServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True
    request_queue_size = 128

    def __init__(self, address: tuple[str, int], service: MigrationKeyService):
        self.mks = service
        super().__init__(address, _Handler)

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, name="mks", daemon=True)
        t.start()
        return t

    def stop(self) -> None:
        self.shutdown()
        self.server_close()


def parse_address(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"expected host:port, got {addr!r}")
    return host, int(port)


def socketpair_stream(service: MigrationKeyService) -> socket.socket:
    """In-process transport: serve one connection on a thread, return the client end."""
    a, b = socket.socketpair()

    def run():
        with b:
            service.serve_connection(FramedStream(b))

    threading.Thread(target=run, daemon=True).start()
    return a
