"""Exhaustive exploration of the host flag protocol.

A pure-state model of one enclave with up to three workers and the
migration thread.  The park decision is the real :func:`should_park`;
everything else mirrors :class:`HostRuntime`.

Events::

    M        set IS_HOST_MIGRATING
    C        capture_threads (AEX + trampoline for every worker inside)
    H        export wrapper: capture, set HAS_ENTERED_ENCLAVE, migration thread enters
    X        export returns (image written, source locked)
    G        resume gate, fork allowed (release, set ALLOW_ERESUME, reset flags)
    D        resume gate, default (destroy)
    aex:t    AEX of worker t followed by its trampoline
    ret:t    worker t returns normally
    in:t     worker t issues an ecall (held back while migrating)
    aexm     AEX of the migration thread followed by its trampoline
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterator

from .flags import should_park

OUT, IN, PARKED, DEAD = "out", "in", "parked", "dead"


@dataclass(frozen=True)
class ModelState:
    m: bool
    h: bool
    a: bool
    workers: tuple[str, ...]
    mig: str  # "out" | "in" | "done"
    exported: bool = False
    gated: bool = False


class Violation(Exception):
    pass


def _set_worker(s: ModelState, t: int, v: str) -> ModelState:
    w = list(s.workers)
    w[t] = v
    return replace(s, workers=tuple(w))


def _aex_worker(s: ModelState, t: int, park=should_park) -> ModelState:
    if park(s.m, s.h, s.a):
        return _set_worker(s, t, PARKED)
    if s.exported and not s.gated:
        raise Violation(f"worker {t} would resume a checkpointed enclave and be lost")
    return s  # resumed: still inside


def _capture(s: ModelState, park=should_park) -> ModelState:
    for t, w in enumerate(s.workers):
        if w == IN:
            s = _aex_worker(s, t, park)
    return s


def events(n_workers: int) -> list[str]:
    ev = ["M", "C", "H", "X", "G", "D", "aexm"]
    for t in range(n_workers):
        ev += [f"aex:{t}", f"ret:{t}", f"in:{t}"]
    return ev


def step(s: ModelState, ev: str, park=should_park) -> ModelState | None:
    """Apply one event; ``None`` if it is not enabled in ``s``."""
    if ev == "M":
        return None if s.m or s.exported else replace(s, m=True)
    if ev == "C":
        return _capture(s, park) if s.m else None
    if ev == "H":
        if not s.m or s.h or s.mig != OUT:
            return None
        s = _capture(s, park)
        if any(w == IN for w in s.workers):
            raise Violation("a worker is still inside after capture")
        return replace(s, h=True, mig=IN)
    if ev == "X":
        if s.mig != IN:
            return None
        if any(w == IN for w in s.workers):
            raise Violation("export would run with a worker inside")
        return replace(s, mig="done", exported=True)
    if ev in ("G", "D"):
        if not s.exported or s.gated:
            return None
        if ev == "G":
            w = tuple(IN if x == PARKED else x for x in s.workers)
            return replace(s, workers=w, m=False, h=False, a=False, gated=True)
        return replace(s, workers=tuple(DEAD for _ in s.workers), gated=True)
    if ev == "aexm":
        if s.mig != IN:
            return None
        if park(s.m, s.h, s.a):
            raise Violation("migration thread parked")
        return s
    kind, t = ev.split(":")
    t = int(t)
    w = s.workers[t]
    if kind == "aex":
        return _aex_worker(s, t, park) if w == IN else None
    if kind == "ret":
        return _set_worker(s, t, OUT) if w == IN else None
    if kind == "in":
        if w != OUT or s.m or (s.exported and not s.gated):
            return None
        return _set_worker(s, t, IN)
    raise ValueError(ev)


def drain(s: ModelState, park=should_park) -> list[ModelState]:
    """Finish the migration both ways; every final state must hold no parked thread."""
    finals = []
    if not s.m and not s.exported:
        finals.append(s)
    else:
        t = s
        if not t.exported:
            if t.mig == OUT:
                t = step(t, "H", park)
            t = step(t, "X", park)
        if t.gated:
            finals.append(t)
        else:
            finals += [step(t, "G", park), step(t, "D", park)]
    for f in finals:
        if PARKED in f.workers:
            raise Violation(f"threads left parked forever: {f}")
    return finals


def initial_states(n_workers: int) -> Iterator[ModelState]:
    for mask in range(1 << n_workers):
        w = tuple(IN if mask >> i & 1 else OUT for i in range(n_workers))
        yield ModelState(False, False, False, w, OUT)


@dataclass
class CheckResult:
    states: int
    sequences: int
    violations: list[tuple[tuple[str, ...], str]]


def explore(n_workers: int = 3, depth: int = 6, park=should_park) -> CheckResult:
    """Depth-first over every enabled event sequence up to ``depth``.

    Sub-trees are shared by memoising on (state, remaining depth), which
    keeps the search exhaustive while visiting each pair once;
    ``sequences`` still counts every distinct event sequence covered.
    ``park`` replaces the trampoline rule, to show the checker catches a
    broken one.
    """
    seen: dict[tuple[ModelState, int], int] = {}
    violations: list[tuple[tuple[str, ...], str]] = []
    alphabet = events(n_workers)

    def dfs(s: ModelState, trace: tuple[str, ...], left: int) -> int:
        if (s, left) in seen:
            return seen[(s, left)]
        try:
            drain(s, park)
        except Violation as v:
            violations.append((trace, str(v)))
        count = 1
        if left:
            for ev in alphabet:
                try:
                    nxt = step(s, ev, park)
                except Violation as v:
                    violations.append((trace + (ev,), str(v)))
                    continue
                if nxt is not None:
                    count += dfs(nxt, trace + (ev,), left - 1)
        seen[(s, left)] = count
        return count

    total = sum(dfs(init, (), depth) for init in initial_states(n_workers))
    return CheckResult(len({s for s, _ in seen}), total, violations)
