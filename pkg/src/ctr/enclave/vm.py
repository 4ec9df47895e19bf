"""Guest virtual machine executed by simulated enclave threads.

A ten-opcode register machine.  Eight 64-bit general registers, a
word-addressed heap shared by all threads of an enclave, and a per-thread
downward-growing stack.  Every instruction is atomic, so a thread can be
interrupted at any instruction boundary.

Assembly format (one instruction per line, ``;`` starts a comment)::

    .entry 1 run          ; ecall function id 1 starts at label ``run``
    .slice cache 100 16   ; named heap slice: word offset 100, 16 words
    run:
        li   r1, 0
    loop:
        ld   r2, r1
        add  r2, r2, r3
        st   r1, r2
        br   al, r0, loop
"""

from __future__ import annotations

import hashlib
import re
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Optional

from ..errors import AssemblyError, GuestFault

MASK64 = (1 << 64) - 1
NUM_REGS = 8
INSTR_SIZE = 16
_INSTR = struct.Struct("<BBBBxxxxQ")


class Op(IntEnum):
    HALT = 0
    LI = 1  # rd <- imm
    ADD = 2  # rd <- ra + rb (mod 2**64)
    ST = 3  # heap[ra] <- rb
    LD = 4  # rd <- heap[ra]
    PUSH = 5  # stack push ra
    POP = 6  # rd <- stack pop
    CMP = 7  # rd <- sign(ra - rb) as signed words: -1, 0, 1
    BR = 8  # if cond(rs): pc <- imm
    YIELD = 9  # ocall: out-word ra, reply into rd


class Cond(IntEnum):
    AL = 0
    Z = 1
    NZ = 2
    NEG = 3
    POS = 4
    NNEG = 5
    NPOS = 6


# reserved ecall ids handled by the trusted runtime, not by guest code
FN_EXPORT_ALL = 0xE0
FN_IMPORT_ALL = 0xE1
FN_INIT_CONTEXT = 0xE2
FN_PLACEHOLDER = 0xE3
RESERVED_FN_IDS = frozenset({FN_EXPORT_ALL, FN_IMPORT_ALL, FN_INIT_CONTEXT, FN_PLACEHOLDER})


@dataclass(frozen=True)
class Instr:
    op: Op
    rd: int = 0
    ra: int = 0
    rb: int = 0
    imm: int = 0

    def encode(self) -> bytes:
        return _INSTR.pack(self.op, self.rd, self.ra, self.rb, self.imm & MASK64)


@dataclass(frozen=True)
class GuestProgram:
    """Immutable guest code plus its ecall entry table and named heap slices."""

    name: str
    instructions: tuple[Instr, ...]
    entry_points: dict[int, int] = field(default_factory=dict)
    slices: dict[str, tuple[int, int]] = field(default_factory=dict)

    def code_bytes(self) -> bytes:
        body = b"".join(i.encode() for i in self.instructions)
        table = b"".join(struct.pack("<II", k, v) for k, v in sorted(self.entry_points.items()))
        slices = b"".join(
            struct.pack("<H", len(n)) + n.encode() + struct.pack("<QQ", off, cnt)
            for n, (off, cnt) in sorted(self.slices.items())
        )
        return body + b"ENTR" + table + b"SLIC" + slices

    def digest(self) -> str:
        return hashlib.sha256(self.code_bytes()).hexdigest()

    def __hash__(self) -> int:
        return hash((self.name, self.instructions))


_PLACEHOLDER_STUB = "__placeholder"


def with_runtime_stubs(
    name: str,
    instructions: list[Instr],
    entries: dict[int, int],
    slices: dict[str, tuple[int, int]] | None = None,
) -> GuestProgram:
    """Append the library's placeholder spin loop and register its entry."""
    for fn in entries:
        if fn in RESERVED_FN_IDS:
            raise AssemblyError(f"function id {fn:#x} is reserved")
    for ins in instructions:
        if ins.op == Op.BR and not 0 <= ins.imm < len(instructions) + 1:
            raise AssemblyError(f"branch target {ins.imm} out of range")
    pc = len(instructions)
    code = list(instructions) + [Instr(Op.BR, rd=Cond.AL, imm=pc)]
    table = dict(entries)
    table[FN_PLACEHOLDER] = pc
    return GuestProgram(name, tuple(code), table, dict(slices or {}))


_REG = re.compile(r"^r([0-7])$")
_OPERANDS = {
    "halt": "",
    "li": "ri",
    "add": "rrr",
    "st": "rr",
    "ld": "rr",
    "push": "r",
    "pop": "r",
    "cmp": "rrr",
    "br": "crl",
    "yield": "rr",
}


def _reg(tok: str, lineno: int) -> int:
    m = _REG.match(tok)
    if not m:
        raise AssemblyError(f"line {lineno}: expected register, got {tok!r}")
    return int(m.group(1))


def assemble(text: str, name: str = "program") -> GuestProgram:
    """Parse the line-oriented assembly format into a GuestProgram."""
    labels: dict[str, int] = {}
    pending: list[tuple[int, str, list[str]]] = []
    entry_labels: dict[int, str] = {}
    slices: dict[str, tuple[int, int]] = {}

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith("."):
            parts = line.split()
            if parts[0] == ".entry" and len(parts) == 3:
                entry_labels[int(parts[1], 0)] = parts[2]
            elif parts[0] == ".slice" and len(parts) == 4:
                slices[parts[1]] = (int(parts[2], 0), int(parts[3], 0))
            else:
                raise AssemblyError(f"line {lineno}: bad directive {line!r}")
            continue
        while ":" in line:
            label, line = line.split(":", 1)
            label = label.strip()
            if label in labels:
                raise AssemblyError(f"line {lineno}: duplicate label {label!r}")
            labels[label] = len(pending)
            line = line.strip()
        if not line:
            continue
        mnemonic, _, rest = line.partition(" ")
        args = [a.strip() for a in rest.split(",")] if rest.strip() else []
        pending.append((lineno, mnemonic.lower(), args))

    out: list[Instr] = []
    for lineno, mnemonic, args in pending:
        shape = _OPERANDS.get(mnemonic)
        if shape is None:
            raise AssemblyError(f"line {lineno}: unknown mnemonic {mnemonic!r}")
        if len(args) != len(shape):
            raise AssemblyError(f"line {lineno}: {mnemonic} takes {len(shape)} operands")
        op = Op[mnemonic.upper()]
        if mnemonic == "li":
            out.append(Instr(op, rd=_reg(args[0], lineno), imm=int(args[1], 0)))
        elif mnemonic in ("add", "cmp"):
            out.append(Instr(op, *(_reg(a, lineno) for a in args)))
        elif mnemonic == "st":
            out.append(Instr(op, ra=_reg(args[0], lineno), rb=_reg(args[1], lineno)))
        elif mnemonic in ("ld", "yield"):
            out.append(Instr(op, rd=_reg(args[0], lineno), ra=_reg(args[1], lineno)))
        elif mnemonic == "push":
            out.append(Instr(op, ra=_reg(args[0], lineno)))
        elif mnemonic == "pop":
            out.append(Instr(op, rd=_reg(args[0], lineno)))
        elif mnemonic == "br":
            try:
                cond = Cond[args[0].upper()]
            except KeyError:
                raise AssemblyError(f"line {lineno}: unknown condition {args[0]!r}") from None
            target = args[2]
            if target in labels:
                pc = labels[target]
            else:
                try:
                    pc = int(target, 0)
                except ValueError:
                    raise AssemblyError(f"line {lineno}: unknown label {target!r}") from None
            out.append(Instr(op, rd=cond, ra=_reg(args[1], lineno), imm=pc))
        else:
            out.append(Instr(op))

    entries: dict[int, int] = {}
    for fn, label in entry_labels.items():
        if label not in labels:
            raise AssemblyError(f"entry {fn}: unknown label {label!r}")
        entries[fn] = labels[label]
    return with_runtime_stubs(name, out, entries, slices)


@dataclass
class CpuContext:
    """Live architectural state of one enclave thread."""

    pc: int = 0
    sp: int = 0
    bp: int = 0
    regs: list[int] = field(default_factory=lambda: [0] * NUM_REGS)
    tls: int = 0

    def snapshot(self) -> tuple:
        return (self.pc, self.sp, self.bp, tuple(self.regs), self.tls)

    def clear(self) -> None:
        self.pc = self.sp = self.bp = self.tls = 0
        self.regs = [0] * NUM_REGS


RUNNING = "Running"
HALTED = "Halted"
OCALL_PENDING = "OcallPending"

OcallHandler = Callable[[int, int], int]
"""(thread_id, out_word) -> reply word"""

TraceFn = Callable[[int, int, int], None]
"""Called on every heap store: (thread_id, word_address, value)."""


def _signed(v: int) -> int:
    return v - (1 << 64) if v >> 63 else v


def execute(
    code: tuple[Instr, ...],
    cpu: CpuContext,
    heap,
    stack,
    n_steps: int,
    thread_id: int,
    ocall: Optional[OcallHandler] = None,
    on_store: Optional[TraceFn] = None,
) -> tuple[str, int]:
    """Run up to ``n_steps`` instructions.

    ``heap`` and ``stack`` are memoryviews cast to unsigned 64-bit words.
    Returns ``(status, steps_executed)``.  A YIELD with no handler leaves
    the pc on the YIELD so it re-executes once a handler is supplied.
    """
    regs = cpu.regs
    pc = cpu.pc
    sp = cpu.sp
    n_heap = len(heap)
    n_stack = len(stack)
    ncode = len(code)
    done = 0
    status = RUNNING
    try:
        while done < n_steps:
            if not 0 <= pc < ncode:
                raise GuestFault(f"pc {pc:#x} outside code section")
            ins = code[pc]
            op = ins.op
            if op == Op.LI:
                regs[ins.rd] = ins.imm & MASK64
            elif op == Op.ADD:
                regs[ins.rd] = (regs[ins.ra] + regs[ins.rb]) & MASK64
            elif op == Op.LD:
                addr = regs[ins.ra]
                if addr >= n_heap:
                    raise GuestFault(f"heap load at word {addr:#x} out of bounds")
                regs[ins.rd] = heap[addr]
            elif op == Op.ST:
                addr = regs[ins.ra]
                if addr >= n_heap:
                    raise GuestFault(f"heap store at word {addr:#x} out of bounds")
                heap[addr] = regs[ins.rb]
                if on_store is not None:
                    on_store(thread_id, addr, regs[ins.rb])
            elif op == Op.BR:
                v = regs[ins.ra]
                c = ins.rd
                if (
                    c == Cond.AL
                    or (c == Cond.Z and v == 0)
                    or (c == Cond.NZ and v != 0)
                    or (c == Cond.NEG and v >> 63)
                    or (c == Cond.POS and v != 0 and not v >> 63)
                    or (c == Cond.NNEG and not v >> 63)
                    or (c == Cond.NPOS and (v == 0 or v >> 63))
                ):
                    pc = ins.imm
                    done += 1
                    continue
            elif op == Op.CMP:
                a, b = _signed(regs[ins.ra]), _signed(regs[ins.rb])
                regs[ins.rd] = 0 if a == b else (1 if a > b else MASK64)
            elif op == Op.PUSH:
                if sp < 8:
                    raise GuestFault("stack overflow")
                sp -= 8
                stack[sp >> 3] = regs[ins.ra]
            elif op == Op.POP:
                if sp + 8 > n_stack * 8:
                    raise GuestFault("stack underflow")
                regs[ins.rd] = stack[sp >> 3]
                sp += 8
            elif op == Op.YIELD:
                if ocall is None:
                    status = OCALL_PENDING
                    break
                regs[ins.rd] = ocall(thread_id, regs[ins.ra]) & MASK64
            elif op == Op.HALT:
                status = HALTED
                break
            pc += 1
            done += 1
    finally:
        cpu.pc = pc
        cpu.sp = sp
    return status, done
