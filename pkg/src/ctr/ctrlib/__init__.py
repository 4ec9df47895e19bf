"""In-enclave migration library: preparation, export, import, CSSA monitor."""

from .image import EncryptedEnclaveImage, ImageHeader, decode, parse_header
from .library import (
    POISON_IP,
    ExportReceipt,
    KeyEscrow,
    MigrationContext,
    ThreadEntryExitMonitor,
    enclave_export_all,
    enclave_import_all,
    inferred_cssa,
    init_context,
    prepare_migration,
    record_entry,
    record_exit,
    release_for_fork,
    required_export_size,
    section_table,
)

__all__ = [
    "POISON_IP",
    "EncryptedEnclaveImage",
    "ExportReceipt",
    "ImageHeader",
    "KeyEscrow",
    "MigrationContext",
    "ThreadEntryExitMonitor",
    "decode",
    "enclave_export_all",
    "enclave_import_all",
    "inferred_cssa",
    "init_context",
    "parse_header",
    "prepare_migration",
    "record_entry",
    "record_exit",
    "release_for_fork",
    "required_export_size",
    "section_table",
]
