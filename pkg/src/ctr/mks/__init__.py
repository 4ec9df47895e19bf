from .attestation import MKS_MEASUREMENT, AttestationEvidence, Platform, verify_evidence
from .client import MksClient
from .service import MigrationKeyService, MksServer, allow_list, parse_address, same_measurement
from .store import EscrowRecord, EscrowStore, RecordState

__all__ = [
    "MKS_MEASUREMENT",
    "AttestationEvidence",
    "Platform",
    "verify_evidence",
    "MksClient",
    "MigrationKeyService",
    "MksServer",
    "allow_list",
    "parse_address",
    "same_measurement",
    "EscrowRecord",
    "EscrowStore",
    "RecordState",
]
