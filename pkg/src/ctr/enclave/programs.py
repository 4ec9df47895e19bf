"""Stock guest programs and a random program generator for fuzzing."""

from __future__ import annotations

import random
from typing import Callable, Optional

from ..errors import UnknownProgram
from .vm import MASK64, Cond, GuestProgram, Instr, Op, assemble, with_runtime_stubs

FN_RUN = 1
FN_RUN_BOUNDED = 2

COUNTER_ASM = """
; heap word 0 holds the counter; words 16..47 are a scratch cache
.entry 1 run
.slice cache 16 32
.entry 2 bounded
run:
    li   r1, 0
    li   r2, 1
loop:
    ld   r3, r1
    add  r3, r3, r2
    st   r1, r3
    br   al, r0, loop
bounded:            ; r0 = bound
    li   r1, 0
    li   r2, 1
bloop:
    ld   r3, r1
    add  r3, r3, r2
    st   r1, r3
    cmp  r4, r3, r0
    br   neg, r4, bloop
    halt
"""


def counter_program() -> GuestProgram:
    return assemble(COUNTER_ASM, name="counter")


# programs a destination node can instantiate, by name, with the host
# application's ocall handler that goes with each
CATALOG: dict[str, GuestProgram] = {}
OCALLS: dict[str, Callable[[int, int], int]] = {}


def register_program(
    program: GuestProgram, ocall: Optional[Callable[[int, int], int]] = None
) -> GuestProgram:
    known = CATALOG.get(program.name)
    if known is not None and known.code_bytes() != program.code_bytes():
        raise ValueError(f"program name {program.name!r} already bound to different code")
    CATALOG[program.name] = program
    OCALLS[program.name] = ocall or mixing_ocall
    return program


def ocall_for(name: str) -> Callable[[int, int], int]:
    return OCALLS.get(name, mixing_ocall)


def lookup_program(name: str) -> GuestProgram:
    try:
        return CATALOG[name]
    except KeyError:
        raise UnknownProgram(f"no guest program named {name!r} on this node") from None


def mixing_ocall(thread_id: int, word: int) -> int:
    """Stateless host reply used by generated programs."""
    return (word * 0x9E3779B97F4A7C15 + thread_id + 1) & MASK64


def random_program(rng: random.Random, heap_words: int = 256, body_len: int = 40) -> GuestProgram:
    """Generate a program that loops forever without faulting.

    r7 is reserved as the address register so heap accesses stay in range;
    pushes are always popped before the loop back-edge.
    """
    code: list[Instr] = []
    depth = 0
    regs = range(7)

    def r() -> int:
        return rng.choice(regs)

    for i in range(7):
        code.append(Instr(Op.LI, rd=i, imm=rng.getrandbits(64)))
    loop_top = len(code)
    while len(code) - loop_top < body_len:
        kind = rng.random()
        if kind < 0.15:
            code.append(Instr(Op.LI, rd=r(), imm=rng.getrandbits(rng.choice((8, 32, 64)))))
        elif kind < 0.35:
            code.append(Instr(Op.ADD, rd=r(), ra=r(), rb=r()))
        elif kind < 0.45:
            code.append(Instr(Op.CMP, rd=r(), ra=r(), rb=r()))
        elif kind < 0.60:
            code.append(Instr(Op.LI, rd=7, imm=rng.randrange(heap_words)))
            code.append(Instr(Op.ST, ra=7, rb=r()))
        elif kind < 0.72:
            code.append(Instr(Op.LI, rd=7, imm=rng.randrange(heap_words)))
            code.append(Instr(Op.LD, rd=r(), ra=7))
        elif kind < 0.80 and depth < 16:
            code.append(Instr(Op.PUSH, ra=r()))
            depth += 1
        elif kind < 0.87 and depth > 0:
            code.append(Instr(Op.POP, rd=r()))
            depth -= 1
        elif kind < 0.95:
            # forward branch over a short run of stack-neutral instructions
            skip = [Instr(Op.ADD, rd=r(), ra=r(), rb=r()) for _ in range(rng.randint(1, 3))]
            target = len(code) + 1 + len(skip)
            code.append(Instr(Op.BR, rd=rng.choice(list(Cond)), ra=r(), imm=target))
            code.extend(skip)
        else:
            code.append(Instr(Op.YIELD, rd=r(), ra=r()))
    for _ in range(depth):
        code.append(Instr(Op.POP, rd=r()))
    code.append(Instr(Op.BR, rd=Cond.AL, imm=loop_top))
    return with_runtime_stubs(f"random-{rng.getrandbits(32):08x}", code, {FN_RUN: 0})


register_program(counter_program())
