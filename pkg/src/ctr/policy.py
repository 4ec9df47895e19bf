"""Developer-defined restore policies.

Hooks are recorded in the policy area of the enclave's data section, so
they and their counters travel inside the encrypted image.  They run on
the destination after the state has been decrypted and laid out, and
before any thread resumes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable

from .enclave.core import EnclaveInstance
from .enclave.memory import POLICY_OFFSET, POLICY_SIZE
from .errors import PolicyError, TooLate

LIMIT = 1
CLEAR = 2
CUSTOM = 3

_MAGIC = b"POL1"
_ENTRY = struct.Struct("<B3x28sQ")
MAX_HOOKS = (POLICY_SIZE - 5) // _ENTRY.size


@dataclass(frozen=True)
class PolicyHook:
    kind: int
    name: str
    value: int = 0


@dataclass
class PolicyVerdict:
    allow_resume: bool = True
    actions_performed: list[str] = field(default_factory=list)


PolicyFunction = Callable[[EnclaveInstance], tuple[bool, list[str]]]
POLICY_FUNCTIONS: dict[str, PolicyFunction] = {}


def policy_function(name: str) -> Callable[[PolicyFunction], PolicyFunction]:
    """Register an in-enclave policy callback under ``name``."""

    def deco(fn: PolicyFunction) -> PolicyFunction:
        POLICY_FUNCTIONS[name] = fn
        return fn

    return deco


def migration_limit_policy(n: int) -> PolicyHook:
    if n < 0:
        raise PolicyError("migration limit must be >= 0")
    return PolicyHook(LIMIT, "migration_limit", n)


def cache_clear_policy(region: str) -> PolicyHook:
    return PolicyHook(CLEAR, region)


def custom_policy(name: str) -> PolicyHook:
    return PolicyHook(CUSTOM, name)


def _area(enclave: EnclaveInstance) -> memoryview:
    return memoryview(enclave.memory.data.buf)[POLICY_OFFSET : POLICY_OFFSET + POLICY_SIZE]


def load_hooks(enclave: EnclaveInstance) -> list[PolicyHook]:
    area = _area(enclave)
    if bytes(area[:4]) != _MAGIC:
        return []
    count = area[4]
    hooks = []
    for i in range(count):
        kind, raw, value = _ENTRY.unpack_from(area, 5 + i * _ENTRY.size)
        hooks.append(PolicyHook(kind, raw.rstrip(b"\0").decode(), value))
    return hooks


def _store_hooks(enclave: EnclaveInstance, hooks: list[PolicyHook]) -> None:
    area = _area(enclave)
    area[:4] = _MAGIC
    area[4] = len(hooks)
    for i, h in enumerate(hooks):
        _ENTRY.pack_into(area, 5 + i * _ENTRY.size, h.kind, h.name.encode(), h.value)


def register_policy(enclave: EnclaveInstance, hook: PolicyHook) -> None:
    with enclave.lock:
        enclave._alive()
        ctx = enclave.trusted.get("ctx")
        if enclave.migration_locked or enclave.ecall_barrier or (ctx is not None and ctx.exported):
            raise TooLate("policies must be registered before the checkpoint")
        if hook.kind == CLEAR and hook.name not in enclave.program.slices:
            raise PolicyError(f"unknown state slice {hook.name!r}")
        if hook.kind == CUSTOM and hook.name not in POLICY_FUNCTIONS:
            raise PolicyError(f"unknown policy function {hook.name!r}")
        if hook.kind not in (LIMIT, CLEAR, CUSTOM):
            raise PolicyError(f"unknown hook kind {hook.kind}")
        if len(hook.name.encode()) > 28:
            raise PolicyError("hook name longer than 28 bytes")
        hooks = load_hooks(enclave)
        if any(h.kind == hook.kind and h.name == hook.name for h in hooks):
            raise PolicyError(f"hook {hook.name!r} already registered")
        if len(hooks) >= MAX_HOOKS:
            raise PolicyError("policy table full")
        _store_hooks(enclave, hooks + [hook])


def evaluate(enclave: EnclaveInstance) -> PolicyVerdict:
    """Run every registered hook in order; any deny denies overall."""
    hooks = load_hooks(enclave)
    verdict = PolicyVerdict()
    updated = []
    for h in hooks:
        if h.kind == LIMIT:
            if h.value == 0:
                verdict.allow_resume = False
                verdict.actions_performed.append("migration_limit:denied")
            else:
                h = PolicyHook(LIMIT, h.name, h.value - 1)
                verdict.actions_performed.append("migration_limit:decremented")
        elif h.kind == CLEAR:
            off, words = enclave.program.slices[h.name]
            enclave.memory.heap.buf[off * 8 : (off + words) * 8] = bytes(words * 8)
            verdict.actions_performed.append(f"cache_clear:{h.name}")
        elif h.kind == CUSTOM:
            allow, actions = POLICY_FUNCTIONS[h.name](enclave)
            verdict.allow_resume = verdict.allow_resume and allow
            verdict.actions_performed.extend(actions)
        updated.append(h)
    if hooks:
        _store_hooks(enclave, updated)
    if enclave.events is not None:
        enclave.events.append(("policy", tuple(verdict.actions_performed)))
    return verdict


def remaining_migrations(enclave: EnclaveInstance) -> int | None:
    """Read the migration-limit counter (debug enclaves only)."""
    raw = enclave.debug_read("data", POLICY_OFFSET, POLICY_SIZE)
    if raw[:4] != _MAGIC:
        return None
    for i in range(raw[4]):
        kind, _, value = _ENTRY.unpack_from(raw, 5 + i * _ENTRY.size)
        if kind == LIMIT:
            return value
    return None
