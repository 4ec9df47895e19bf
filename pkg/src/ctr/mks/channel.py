"""Mutually attested handshake and the session layer on top of it.

Flow (C = enclave side, S = key service)::

    C -> S  AttestChallenge(role, c_nonce, c_pub)
    S -> C  AttestResponse(s_nonce, s_pub, quote_S(binding, c_nonce))
    C -> S  AttestResponse(0, c_pub, quote_C(binding, s_nonce))

``binding`` is the transcript hash over the challenge and the service's
nonce and public key.  The session key is HKDF over the X25519 secret,
salted with the binding, so evidence relayed from another connection
never matches the channel it is replayed on.
"""

from __future__ import annotations

import hashlib
import hmac
import os
from dataclasses import dataclass, field

from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from ..errors import (
    AuthenticationFailed,
    BindingMismatch,
    NonceReplay,
    ProtocolError,
    UntrustedPlatform,
)
from .attestation import MKS_MEASUREMENT, AttestationEvidence, verify_evidence
from .protocol import SEALED_KEY_SIZE, AttestChallenge, AttestResponse, transcript_hash

ZERO_NONCE = bytes(16)


def _pub_bytes(priv: X25519PrivateKey) -> bytes:
    return priv.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)


def _session_key(priv: X25519PrivateKey, peer_pub: bytes, binding: bytes) -> bytes:
    shared = priv.exchange(X25519PublicKey.from_public_bytes(peer_pub))
    return HKDF(hashes.SHA256(), 32, salt=binding, info=b"ctr-mks-session").derive(shared)


@dataclass
class Session:
    """An attested channel; ``peer`` is the verified evidence of the other side."""

    role: int
    key: bytes
    binding: bytes
    peer: AttestationEvidence
    attested: bool = True

    def seal(self, label: bytes, image_id: bytes, secret: bytes) -> bytes:
        nonce = os.urandom(12)
        return nonce + AESGCM(self.key).encrypt(nonce, secret, label + image_id)

    def open(self, label: bytes, image_id: bytes, sealed: bytes) -> bytes:
        if len(sealed) != SEALED_KEY_SIZE:
            raise ProtocolError("sealed key has wrong length")
        try:
            return AESGCM(self.key).decrypt(sealed[:12], sealed[12:], label + image_id)
        except Exception:
            raise AuthenticationFailed("sealed key failed authentication") from None

    def ack(self, image_id: bytes, sealed: bytes) -> bytes:
        return hmac.new(self.key, b"ack" + image_id + hashlib.sha256(sealed).digest(), "sha256").digest()


class ClientHandshake:
    """Enclave-side handshake; the quote is produced by the local platform."""

    def __init__(self, role: int, platform, enclave, trusted_platforms: list[bytes],
                 service_measurement: bytes = MKS_MEASUREMENT):
        self.role = role
        self.platform = platform
        self.enclave = enclave
        self.trusted = trusted_platforms
        self.service_measurement = service_measurement
        self._priv = X25519PrivateKey.generate()
        self.challenge = AttestChallenge(role, os.urandom(16), _pub_bytes(self._priv))

    def respond(self, server: AttestResponse) -> tuple[AttestResponse, Session]:
        binding = transcript_hash(self.challenge, server.nonce, server.ephemeral_pub)
        verify_evidence(server.evidence, self.trusted, self.challenge.nonce, binding)
        if server.evidence.measurement != self.service_measurement:
            raise UntrustedPlatform("peer is not the migration key service")
        evidence = self.platform.quote_enclave(self.enclave, binding, server.nonce)
        key = _session_key(self._priv, server.ephemeral_pub, binding)
        reply = AttestResponse(ZERO_NONCE, self.challenge.ephemeral_pub, evidence)
        return reply, Session(self.role, key, binding, server.evidence)


@dataclass
class PendingHandshake:
    challenge: AttestChallenge
    nonce: bytes
    binding: bytes
    priv: X25519PrivateKey = field(repr=False)
    done: bool = False


def server_begin(platform, challenge: AttestChallenge,
                 measurement: bytes = MKS_MEASUREMENT) -> tuple[AttestResponse, PendingHandshake]:
    priv = X25519PrivateKey.generate()
    nonce = os.urandom(16)
    pub = _pub_bytes(priv)
    binding = transcript_hash(challenge, nonce, pub)
    evidence = platform.quote(measurement, binding, challenge.nonce)
    return AttestResponse(nonce, pub, evidence), PendingHandshake(challenge, nonce, binding, priv)


def server_finish(pending: PendingHandshake, response: AttestResponse,
                  trusted_platforms: list[bytes]) -> Session:
    """Verify the enclave's quote; each service nonce is accepted once."""
    if pending.done:
        raise NonceReplay("service challenge already answered")
    pending.done = True
    verify_evidence(response.evidence, trusted_platforms, pending.nonce, pending.binding)
    if response.ephemeral_pub != pending.challenge.ephemeral_pub:
        raise BindingMismatch("ephemeral key changed mid-handshake")
    key = _session_key(pending.priv, pending.challenge.ephemeral_pub, pending.binding)
    return Session(pending.challenge.role, key, pending.binding, response.evidence)
