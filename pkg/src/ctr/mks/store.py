"""Append-only escrow log.

Each line is one JSON record; ``deposit`` creates an entry, ``release`` and
``expire`` are terminal transitions.  Every append is fsynced before the
caller proceeds.  Migration keys are sealed under a storage key kept in a
sibling file ``<store>.key`` and never hit the log in plaintext.
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from ..errors import DuplicateImage, ProtocolError, UnknownImage


class RecordState(str, Enum):
    DEPOSITED = "Deposited"
    RELEASED = "Released"
    EXPIRED = "Expired"


@dataclass
class EscrowRecord:
    image_id: bytes
    sealed_key: bytes
    source_measurement: bytes
    state: RecordState
    deposit_time: float


def _load_storage_key(path: Path) -> bytes:
    if path.exists():
        key = path.read_bytes()
        if len(key) != 32:
            raise ProtocolError(f"storage key {path} is corrupt")
        return key
    key = AESGCM.generate_key(256)
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o600)
    with os.fdopen(fd, "wb") as fh:
        fh.write(key)
        fh.flush()
        os.fsync(fh.fileno())
    return key


class EscrowStore:
    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._aead = AESGCM(_load_storage_key(self.path.with_name(self.path.name + ".key")))
        self.lock = threading.Lock()
        self.records: dict[bytes, EscrowRecord] = {}
        self._replay()
        self._fh = open(self.path, "a", encoding="utf-8")

    def _replay(self) -> None:
        if not self.path.exists():
            return
        with open(self.path, encoding="utf-8") as fh:
            for line in fh:
                if not line.endswith("\n"):
                    break  # torn tail from a crash mid-append: never acknowledged
                self._apply(json.loads(line))

    def _apply(self, rec: dict) -> None:
        image_id = bytes.fromhex(rec["image_id"])
        op = rec["op"]
        if op == "deposit":
            self.records[image_id] = EscrowRecord(
                image_id,
                bytes.fromhex(rec["sealed_key"]),
                bytes.fromhex(rec["measurement"]),
                RecordState.DEPOSITED,
                rec["time"],
            )
        elif op == "release":
            self.records[image_id].state = RecordState.RELEASED
        elif op == "expire":
            self.records[image_id].state = RecordState.EXPIRED
        else:
            raise ProtocolError(f"unknown log op {op!r}")

    def _append(self, rec: dict) -> None:
        self._fh.write(json.dumps(rec, sort_keys=True) + "\n")
        self._fh.flush()
        os.fsync(self._fh.fileno())
        self._apply(rec)

    # callers hold self.lock for the three mutators below

    def add(self, image_id: bytes, key: bytes, measurement: bytes, now: float) -> EscrowRecord:
        if image_id in self.records:
            raise DuplicateImage(f"image {image_id.hex()} already escrowed")
        nonce = os.urandom(12)
        sealed = nonce + self._aead.encrypt(nonce, key, b"escrow" + image_id)
        self._append({
            "op": "deposit",
            "image_id": image_id.hex(),
            "sealed_key": sealed.hex(),
            "measurement": measurement.hex(),
            "time": now,
        })
        return self.records[image_id]

    def mark(self, image_id: bytes, op: str, now: float) -> None:
        self._append({"op": op, "image_id": image_id.hex(), "time": now})

    def unseal(self, record: EscrowRecord) -> bytes:
        sealed = record.sealed_key
        return self._aead.decrypt(sealed[:12], sealed[12:], b"escrow" + record.image_id)

    def get(self, image_id: bytes) -> EscrowRecord:
        try:
            return self.records[image_id]
        except KeyError:
            raise UnknownImage(f"no escrow record for image {image_id.hex()}") from None

    def close(self) -> None:
        self._fh.close()
