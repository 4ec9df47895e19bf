"""Simulated in-process TEE: memory layout, thread lifecycle, guest VM."""

from .core import (
    AexEvent,
    EcallTicket,
    EnclaveInstance,
    ThreadState,
    VmStatus,
    compute_measurement,
    create_enclave,
    destroy_enclave,
    ecall,
    eresume,
    interrupt_thread,
    register_trusted_ecall,
    step_guest,
)
from .memory import EnclaveConfig, SsaFrame
from .vm import GuestProgram, Instr, Op, assemble

__all__ = [
    "AexEvent",
    "EcallTicket",
    "EnclaveConfig",
    "EnclaveInstance",
    "GuestProgram",
    "Instr",
    "Op",
    "SsaFrame",
    "ThreadState",
    "VmStatus",
    "assemble",
    "compute_measurement",
    "create_enclave",
    "destroy_enclave",
    "ecall",
    "eresume",
    "interrupt_thread",
    "register_trusted_ecall",
    "step_guest",
]
