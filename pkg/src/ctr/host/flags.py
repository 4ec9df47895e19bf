"""The three host migration flags and the trampoline decision."""

from __future__ import annotations

import threading


def should_park(migrating: bool, entered: bool, allow: bool) -> bool:
    """Decision taken by a thread's host trampoline right after an AEX.

    The trampoline cannot tell the migration thread from a worker; the
    migration thread is spared only because HAS_ENTERED_ENCLAVE is set
    before it enters.
    """
    return migrating and not entered and not allow


class HostFlags:
    """IS_HOST_MIGRATING, HAS_ENTERED_ENCLAVE, ALLOW_ERESUME; all start unset."""

    def __init__(self):
        self._cv = threading.Condition()
        self._m = False
        self._h = False
        self._a = False

    @property
    def is_host_migrating(self) -> bool:
        return self._m

    @property
    def has_entered_enclave(self) -> bool:
        return self._h

    @property
    def allow_eresume(self) -> bool:
        return self._a

    def _set(self, attr: str, value: bool) -> None:
        with self._cv:
            setattr(self, attr, value)
            self._cv.notify_all()

    def set_migrating(self, value: bool = True) -> None:
        self._set("_m", value)

    def set_entered(self, value: bool = True) -> None:
        self._set("_h", value)

    def set_allow_eresume(self, value: bool = True) -> None:
        self._set("_a", value)

    def reset(self) -> None:
        with self._cv:
            self._m = self._h = self._a = False
            self._cv.notify_all()

    def snapshot(self) -> tuple[bool, bool, bool]:
        with self._cv:
            return self._m, self._h, self._a

    def holds(self) -> bool:
        return should_park(*self.snapshot())

    def wait_for_release(self, released, timeout: float | None = None) -> bool:
        """Block a parked thread until ``released()`` holds (spin with yield)."""
        with self._cv:
            return self._cv.wait_for(released, timeout)
