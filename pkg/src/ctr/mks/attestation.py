"""Simulated remote attestation.

One Ed25519 platform key stands in for the hardware quoting
infrastructure.  A quote binds a measurement to a channel transcript hash
and to a fresh challenge nonce chosen by the verifier.
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass
from pathlib import Path

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from ..errors import BindingMismatch, NonceReplay, UntrustedPlatform

MKS_MEASUREMENT = hashlib.sha256(b"ctr-migration-key-service/1").digest()

_EVIDENCE = struct.Struct("<32s32s16s64s")
EVIDENCE_SIZE = _EVIDENCE.size


@dataclass(frozen=True)
class AttestationEvidence:
    measurement: bytes
    channel_binding: bytes
    freshness_nonce: bytes
    signature: bytes

    def signed_payload(self) -> bytes:
        return b"CTR-QUOTE" + self.measurement + self.channel_binding + self.freshness_nonce

    def encode(self) -> bytes:
        return _EVIDENCE.pack(
            self.measurement, self.channel_binding, self.freshness_nonce, self.signature
        )

    @classmethod
    def decode(cls, raw: bytes) -> "AttestationEvidence":
        return cls(*_EVIDENCE.unpack(raw))


class Platform:
    """Holder of the platform attestation key (the simulated hardware)."""

    def __init__(self, key: Ed25519PrivateKey | None = None):
        self._key = key or Ed25519PrivateKey.generate()

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Platform":
        raw = Path(path).read_bytes()
        return cls(Ed25519PrivateKey.from_private_bytes(raw))

    @classmethod
    def load_or_create(cls, path: str | os.PathLike) -> "Platform":
        p = Path(path)
        if p.exists():
            return cls.load(p)
        plat = cls()
        p.parent.mkdir(parents=True, exist_ok=True)
        fd = os.open(p, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o600)
        with os.fdopen(fd, "wb") as fh:
            fh.write(plat.private_bytes())
        return plat

    def private_bytes(self) -> bytes:
        return self._key.private_bytes(
            serialization.Encoding.Raw,
            serialization.PrivateFormat.Raw,
            serialization.NoEncryption(),
        )

    @property
    def public_key(self) -> bytes:
        return self._key.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )

    def quote(self, measurement: bytes, binding: bytes, nonce: bytes) -> AttestationEvidence:
        ev = AttestationEvidence(measurement, binding, nonce, b"\0" * 64)
        return AttestationEvidence(measurement, binding, nonce, self._key.sign(ev.signed_payload()))

    def quote_enclave(self, enclave, binding: bytes, nonce: bytes) -> AttestationEvidence:
        """Quote an enclave; the measurement comes from the enclave, not the caller."""
        return self.quote(enclave.measurement, binding, nonce)


def verify_evidence(
    evidence: AttestationEvidence,
    trusted_keys: list[bytes],
    expected_nonce: bytes,
    expected_binding: bytes,
) -> None:
    """Check signature, freshness and channel binding, in that order."""
    for pub in trusted_keys:
        try:
            Ed25519PublicKey.from_public_bytes(pub).verify(
                evidence.signature, evidence.signed_payload()
            )
            break
        except InvalidSignature:
            continue
    else:
        raise UntrustedPlatform("evidence is not signed by a trusted platform key")
    if evidence.freshness_nonce != expected_nonce:
        raise NonceReplay("evidence answers a different (stale) challenge")
    if evidence.channel_binding != expected_binding:
        raise BindingMismatch("evidence is bound to a different channel")
