"""SmallBank-style workload running inside the guest VM.

Heap layout (64-bit words): 0 = next sequence number, 1 = net external
flow (deposits minus withdrawals), 2 = last balance-check result,
16 + 2*i = checking[i], 17 + 2*i = savings[i].

Every transaction pulls its parameters from the host through ocalls on
word ``8*seq + field``; the host answers from a stateless generator keyed
by (seed, seq, field), so the stream is identical however often the
enclave migrates.  Field 7 is the commit notice, sent after the sequence
number has been advanced.
"""

from __future__ import annotations

import hashlib
import struct
import time
from dataclasses import dataclass, field
from typing import Optional

from ..enclave.programs import register_program
from ..enclave.vm import MASK64, GuestProgram, assemble

N_ACCOUNTS = 1000
ACCOUNT_BASE = 16
INITIAL_BALANCE = 1000
FN_RUN = 1
FN_INIT = 2
HEAP_WORDS = ACCOUNT_BASE + 2 * N_ACCOUNTS

TXN_TYPES = ("deposit", "transfer", "withdraw", "balance", "amalgamate")

SMALLBANK_ASM = f"""
.entry {FN_RUN} txn
.entry {FN_INIT} init
.slice accounts {ACCOUNT_BASE} {2 * N_ACCOUNTS}

init:                   ; r0 = opening balance of every account
    li   r1, {ACCOUNT_BASE}
    li   r2, {HEAP_WORDS}
    li   r3, 1
iloop:
    st   r1, r0
    add  r1, r1, r3
    cmp  r4, r1, r2
    br   neg, r4, iloop
    halt

txn:
    li   r1, 0
    ld   r0, r1
    add  r0, r0, r0
    add  r0, r0, r0
    add  r0, r0, r0     ; r0 = 8 * seq
    yield r1, r0        ; type
    li   r7, 1
    add  r7, r0, r7
    yield r2, r7        ; checking address of account A
    li   r7, 0
    cmp  r7, r1, r7
    br   z, r7, deposit
    li   r7, 1
    cmp  r7, r1, r7
    br   z, r7, transfer
    li   r7, 2
    cmp  r7, r1, r7
    br   z, r7, withdraw
    li   r7, 3
    cmp  r7, r1, r7
    br   z, r7, balance
    br   al, r7, amalgamate

deposit:
    li   r7, 3
    add  r7, r0, r7
    yield r3, r7        ; amount
    br   al, r7, flow
withdraw:
    li   r7, 4
    add  r7, r0, r7
    yield r3, r7        ; negated amount
flow:
    ld   r4, r2
    add  r4, r4, r3
    st   r2, r4
    li   r7, 1
    ld   r4, r7
    add  r4, r4, r3
    st   r7, r4
    br   al, r7, commit

transfer:
    li   r7, 4
    add  r7, r0, r7
    yield r3, r7
    ld   r4, r2
    add  r4, r4, r3
    st   r2, r4
    li   r7, 2
    add  r7, r0, r7
    yield r5, r7        ; checking address of account B
    li   r7, 3
    add  r7, r0, r7
    yield r3, r7
    ld   r4, r5
    add  r4, r4, r3
    st   r5, r4
    br   al, r7, commit

balance:
    li   r7, 1
    add  r5, r2, r7
    ld   r4, r2
    ld   r6, r5
    add  r4, r4, r6
    li   r7, 2
    st   r7, r4
    br   al, r7, commit

amalgamate:
    li   r7, 1
    add  r5, r2, r7
    ld   r4, r2
    ld   r6, r5
    add  r4, r4, r6
    li   r6, 0
    st   r2, r6
    st   r5, r6
    li   r7, 2
    add  r7, r0, r7
    yield r5, r7
    ld   r6, r5
    add  r6, r6, r4
    st   r5, r6

commit:
    li   r1, 0
    ld   r2, r1
    li   r3, 1
    add  r2, r2, r3
    st   r1, r2
    li   r7, 7
    add  r7, r0, r7
    yield r6, r7        ; commit notice for this sequence number
    br   al, r7, txn
"""


def smallbank_program() -> GuestProgram:
    return assemble(SMALLBANK_ASM, name="smallbank")


@dataclass(frozen=True)
class Txn:
    kind: int
    a: int
    b: int
    amount: int


def transaction(seed: int, seq: int) -> Txn:
    """The seq-th transaction of the seeded stream; uniform over the five types."""
    h = hashlib.blake2b(struct.pack("<QQ", seed & MASK64, seq), digest_size=16).digest()
    w0, w1 = struct.unpack("<QQ", h)
    kind = w0 % 5
    a = (w0 >> 8) % N_ACCOUNTS
    b = (a + 1 + (w1 % (N_ACCOUNTS - 1))) % N_ACCOUNTS
    amount = 1 + (w1 >> 16) % 100
    return Txn(kind, a, b, amount)


@dataclass
class SmallBankHost:
    """Host side: answers parameter ocalls and records commit notices."""

    seed: int
    commits: list[int] = field(default_factory=list)
    stamps: list[float] = field(default_factory=list)
    clock: object = time.monotonic
    _cache: tuple[int, Optional[Txn]] = (-1, None)

    def _txn(self, seq: int) -> Txn:
        if self._cache[0] != seq:
            self._cache = (seq, transaction(self.seed, seq))
        return self._cache[1]

    def __call__(self, thread_id: int, word: int) -> int:
        seq, fld = word >> 3, word & 7
        if fld == 7:
            self.commits.append(seq)
            self.stamps.append(self.clock())
            return 0
        t = self._txn(seq)
        if fld == 0:
            return t.kind
        if fld == 1:
            return ACCOUNT_BASE + 2 * t.a
        if fld == 2:
            return ACCOUNT_BASE + 2 * t.b
        if fld == 3:
            return t.amount
        if fld == 4:
            return -t.amount & MASK64
        return 0


def reference_state(seed: int, n: int) -> tuple[list[int], int]:
    """Pure-Python oracle: balances (checking, savings interleaved) and flow after n txns."""
    bal = [INITIAL_BALANCE] * (2 * N_ACCOUNTS)
    flow = 0
    for seq in range(n):
        t = transaction(seed, seq)
        ca, sa, cb = 2 * t.a, 2 * t.a + 1, 2 * t.b
        if t.kind == 0:
            bal[ca] += t.amount
            flow += t.amount
        elif t.kind == 1:
            bal[ca] -= t.amount
            bal[cb] += t.amount
        elif t.kind == 2:
            bal[ca] -= t.amount
            flow -= t.amount
        elif t.kind == 4:
            total = bal[ca] + bal[sa]
            bal[ca] = bal[sa] = 0
            bal[cb] += total
    return bal, flow


def read_state(heap_words) -> tuple[int, int, list[int]]:
    """(seq, flow, balances) from a heap image, signed."""

    def signed(v: int) -> int:
        return v - (1 << 64) if v >> 63 else v

    seq = heap_words[0]
    flow = signed(heap_words[1])
    bal = [signed(heap_words[ACCOUNT_BASE + i]) for i in range(2 * N_ACCOUNTS)]
    return seq, flow, bal


register_program(smallbank_program())
