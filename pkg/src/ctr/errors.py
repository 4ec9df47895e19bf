"""Exception hierarchy shared by every layer.

Each error carries a stable ``code`` string; the node service and the CLI
map codes to HTTP statuses and process exit codes.
"""

from __future__ import annotations


class CtrError(Exception):
    code = "CtrError"


# enclave simulator ----------------------------------------------------------


class EnclaveError(CtrError):
    code = "EnclaveError"


class SizeOverflow(EnclaveError):
    code = "SizeOverflow"


class ZeroSizeSection(EnclaveError):
    code = "ZeroSizeSection"


class UnknownFunction(EnclaveError):
    code = "UnknownFunction"


class AlreadyEntered(EnclaveError):
    code = "AlreadyEntered"


class NotInEnclave(EnclaveError):
    code = "NotInEnclave"


class NoSavedFrame(EnclaveError):
    code = "NoSavedFrame"


class SsaFull(EnclaveError):
    code = "SsaFull"


class ResumeBlocked(EnclaveError):
    code = "ResumeBlocked"


class EnclaveDestroyed(EnclaveError):
    code = "EnclaveDestroyed"


class EnclaveCrashed(EnclaveError):
    code = "EnclaveCrashed"


class GuestFault(EnclaveError):
    code = "GuestFault"


class MigrationInProgress(EnclaveError):
    code = "MigrationInProgress"


class DebugAccessDenied(EnclaveError):
    code = "DebugAccessDenied"


class AssemblyError(EnclaveError):
    code = "AssemblyError"


# migration library ----------------------------------------------------------


class MigrationError(CtrError):
    code = "MigrationError"


class NotPrepared(MigrationError):
    code = "NotPrepared"


class ThreadsNotQuiesced(MigrationError):
    code = "ThreadsNotQuiesced"


class BufferTooSmall(MigrationError):
    code = "BufferTooSmall"


class IntegrityError(MigrationError):
    """Any failure that means the image cannot be trusted."""

    code = "IntegrityError"


class AuthenticationFailed(IntegrityError):
    code = "AuthenticationFailed"


class MalformedImage(IntegrityError):
    code = "MalformedImage"


class MeasurementMismatch(IntegrityError):
    code = "MeasurementMismatch"


class CssaMismatch(MigrationError):
    code = "CssaMismatch"


class MonitorError(MigrationError):
    code = "MonitorError"


class PolicyDenied(MigrationError):
    code = "PolicyDenied"


class PolicyError(MigrationError):
    code = "PolicyError"


class TooLate(PolicyError):
    code = "TooLate"


# host runtime ---------------------------------------------------------------


class HostError(CtrError):
    code = "HostError"


class NotStaged(HostError):
    code = "NotStaged"


class ExportInProgress(HostError):
    code = "ExportInProgress"


class ManifestError(HostError):
    code = "ManifestError"


# escrow service -------------------------------------------------------------


class EscrowError(CtrError):
    """Base for every refusal by the migration key service."""

    code = "EscrowError"


class AttestationError(EscrowError):
    code = "AttestationError"


class UntrustedPlatform(AttestationError):
    code = "UntrustedPlatform"


class NonceReplay(AttestationError):
    code = "NonceReplay"


class BindingMismatch(AttestationError):
    code = "BindingMismatch"


class ChannelNotAttested(AttestationError):
    code = "ChannelNotAttested"


class DuplicateImage(EscrowError):
    code = "DuplicateImage"


class UnknownImage(EscrowError):
    code = "UnknownImage"


class AlreadyReleased(EscrowError):
    code = "AlreadyReleased"


class Expired(EscrowError):
    code = "Expired"


class EscrowMeasurementMismatch(EscrowError):
    """Destination measurement does not match the depositing source."""

    code = "EscrowMeasurementMismatch"


class ProtocolError(EscrowError):
    code = "ProtocolError"


# migration agent ------------------------------------------------------------


class AgentError(CtrError):
    code = "AgentError"


class AccessViolation(AgentError):
    code = "AccessViolation"


class ManifestMissing(AgentError):
    code = "ManifestMissing"


class CorruptProcessImage(IntegrityError):
    code = "CorruptProcessImage"


class UnknownProcess(AgentError):
    code = "UnknownProcess"


class PlaceholderMismatch(AgentError):
    code = "PlaceholderMismatch"


class UnknownProgram(AgentError):
    code = "UnknownProgram"


class NoData(CtrError):
    code = "NoData"


_ALL: dict[str, type[CtrError]] = {}


def _collect(cls: type[CtrError]) -> None:
    for sub in cls.__subclasses__():
        _ALL.setdefault(sub.code, sub)
        _collect(sub)


_collect(CtrError)
_ALL["CtrError"] = CtrError


def from_code(code: str, message: str = "") -> CtrError:
    """Rebuild an exception from its wire/HTTP code."""
    return _ALL.get(code, CtrError)(message)


EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_POLICY_DENIED = 2
EXIT_ESCROW_DENIED = 3
EXIT_INTEGRITY = 4


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, PolicyDenied):
        return EXIT_POLICY_DENIED
    if isinstance(exc, EscrowError):
        return EXIT_ESCROW_DENIED
    if isinstance(exc, IntegrityError):
        return EXIT_INTEGRITY
    return EXIT_FAILURE
