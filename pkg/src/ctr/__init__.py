"""Checkpoint/transfer/restore migration for simulated in-process enclaves."""

from . import ctrlib  # noqa: F401  links the migration library into every enclave
from .bench import smallbank  # noqa: F401  puts the workload in the program catalog

__version__ = "0.1.0"
