"""Untrusted host runtime: migration flags, capture loop, wrappers, manifest."""

from .files import (
    MANIFEST_ORDER,
    StagedEnclave,
    decode_staged,
    encode_staged,
    parse_manifest,
    read_manifest,
    write_manifest,
)
from .flags import HostFlags, should_park
from .runtime import PARKED, RESUMED, HostEnclave, HostRuntime

__all__ = [
    "MANIFEST_ORDER",
    "StagedEnclave",
    "decode_staged",
    "encode_staged",
    "parse_manifest",
    "read_manifest",
    "write_manifest",
    "HostFlags",
    "should_park",
    "PARKED",
    "RESUMED",
    "HostEnclave",
    "HostRuntime",
]
