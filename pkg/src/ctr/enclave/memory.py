"""Enclave memory layout and the SSA frame encoding."""

from __future__ import annotations

import ctypes
import struct
from dataclasses import dataclass, field

from ..errors import SizeOverflow, ZeroSizeSection
from .vm import NUM_REGS, CpuContext

PAGE = 4096
LAYOUT_BASE = 0x10000
MAX_ENCLAVE_SIZE = 64 << 30

SSA_FRAME_SIZE = 128
_FRAME = struct.Struct("<QQQ" + "Q" * NUM_REGS + "Q")

# data-section carve-outs (same code => same offsets at source and destination)
CIPHER_CTX_OFFSET = 0
CIPHER_CTX_SIZE = 128
POLICY_OFFSET = CIPHER_CTX_SIZE
POLICY_SIZE = 384
DATA_RESERVED = CIPHER_CTX_SIZE + POLICY_SIZE

DEFAULT_RESERVE = 64 << 10


def _align(n: int, a: int = PAGE) -> int:
    return (n + a - 1) // a * a


@dataclass(frozen=True)
class EnclaveConfig:
    heap_size: int
    stack_size: int = 16 << 10
    max_threads: int = 4
    data_init: bytes = b""
    ssa_depth: int = 1
    reserve_size: int = DEFAULT_RESERVE
    debug: bool = False

    def canonical(self) -> bytes:
        return struct.pack(
            "<QQIIQ?",
            self.heap_size,
            self.stack_size,
            self.max_threads,
            self.ssa_depth,
            self.reserve_size,
            self.debug,
        ) + self.data_init

    @property
    def data_size(self) -> int:
        return _align(DATA_RESERVED + len(self.data_init), 8)

    @property
    def ssa_size(self) -> int:
        return self.max_threads * self.ssa_depth * SSA_FRAME_SIZE

    def total_size(self, code_size: int = 0) -> int:
        return (
            code_size
            + self.data_size
            + self.heap_size
            + self.stack_size * self.max_threads
            + self.ssa_size
            + self.reserve_size
        )

    def validate(self) -> None:
        if self.max_threads < 1:
            raise ZeroSizeSection("max_threads must be >= 1")
        if self.ssa_depth < 1:
            raise ZeroSizeSection("ssa_depth must be >= 1")
        for name in ("heap_size", "stack_size", "reserve_size"):
            v = getattr(self, name)
            if v <= 0:
                raise ZeroSizeSection(f"{name} must be positive")
            if v % 8:
                raise ZeroSizeSection(f"{name} must be a multiple of 8")
        if self.reserve_size < self.ssa_depth * SSA_FRAME_SIZE:
            raise ZeroSizeSection("reserve too small for the migration thread's SSA")
        if self.total_size() > MAX_ENCLAVE_SIZE:
            raise SizeOverflow(f"enclave of {self.total_size()} bytes exceeds {MAX_ENCLAVE_SIZE}")


@dataclass
class Section:
    name: str
    base: int
    size: int
    buf: bytearray

    @property
    def end(self) -> int:
        return self.base + self.size


@dataclass
class EnclaveMemory:
    """Disjoint, ordered sections; bases and sizes are fixed at creation."""

    code: Section
    data: Section
    heap: Section
    stacks: list[Section]
    ssa: Section
    reserve: Section
    _views: dict = field(default_factory=dict, repr=False)

    @classmethod
    def layout(cls, code: bytes, config: EnclaveConfig) -> "EnclaveMemory":
        cursor = LAYOUT_BASE

        def place(name: str, size: int, buf: bytearray) -> Section:
            nonlocal cursor
            sec = Section(name, cursor, size, buf)
            cursor = _align(cursor + size)
            return sec

        code_sec = place("code", len(code), bytearray(code))
        data = bytearray(config.data_size)
        data[DATA_RESERVED : DATA_RESERVED + len(config.data_init)] = config.data_init
        data_sec = place("data", config.data_size, data)
        heap_sec = place("heap", config.heap_size, bytearray(config.heap_size))
        stacks = [
            place(f"stack{i}", config.stack_size, bytearray(config.stack_size))
            for i in range(config.max_threads)
        ]
        ssa_sec = place("ssa", config.ssa_size, bytearray(config.ssa_size))
        reserve = place("reserve", config.reserve_size, bytearray(config.reserve_size))
        return cls(code_sec, data_sec, heap_sec, stacks, ssa_sec, reserve)

    def sections(self) -> list[Section]:
        return [self.code, self.data, self.heap, *self.stacks, self.ssa, self.reserve]

    def exported_sections(self) -> list[Section]:
        """Sections that make up a checkpoint, in serialization order."""
        return [self.data, self.heap, *self.stacks, self.ssa]

    def heap_words(self) -> memoryview:
        v = self._views.get("heap")
        if v is None:
            v = self._views["heap"] = memoryview(self.heap.buf).cast("Q")
        return v

    def stack_words(self, i: int) -> memoryview:
        key = f"stack{i}"
        v = self._views.get(key)
        if v is None:
            v = self._views[key] = memoryview(self.stacks[i].buf).cast("Q")
        return v

    def release_views(self) -> None:
        for v in self._views.values():
            v.release()
        self._views.clear()

    def zeroize(self) -> None:
        for sec in self.sections():
            memset(sec.buf, 0)

    def total_size(self) -> int:
        return sum(s.size for s in self.sections())


def memset(buf: bytearray, value: int) -> None:
    """Fill ``buf`` in place; touches every page of the backing store."""
    if not buf:
        return
    addr = ctypes.addressof((ctypes.c_char * len(buf)).from_buffer(buf))
    ctypes.memset(addr, value, len(buf))


def pack_frame(cpu: CpuContext) -> bytes:
    return _FRAME.pack(cpu.pc, cpu.sp, cpu.bp, *cpu.regs, cpu.tls).ljust(SSA_FRAME_SIZE, b"\0")


def unpack_frame(raw: bytes | memoryview) -> CpuContext:
    vals = _FRAME.unpack_from(raw)
    return CpuContext(
        pc=vals[0], sp=vals[1], bp=vals[2], regs=list(vals[3 : 3 + NUM_REGS]), tls=vals[-1]
    )


@dataclass(frozen=True)
class SsaFrame:
    instruction_pointer: int
    stack_pointer: int
    base_pointer: int
    general_registers: tuple[int, ...]
    thread_local_slot: int

    @classmethod
    def decode(cls, raw: bytes | memoryview) -> "SsaFrame":
        cpu = unpack_frame(raw)
        return cls(cpu.pc, cpu.sp, cpu.bp, tuple(cpu.regs), cpu.tls)


IP_OFFSET = 0  # instruction pointer is the first word of a frame
