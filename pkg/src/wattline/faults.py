"""Named crash points for fault-injection tests.

Production code calls :func:`crashpoint` at the places where a process death
would matter for durability. Nothing happens unless a test arms the point.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager


class SimulatedCrash(BaseException):
    """Raised at an armed crash point. Derives from BaseException so ordinary
    ``except Exception`` recovery paths do not swallow it."""

    def __init__(self, point: str):
        self.point = point
        super().__init__(f"simulated crash at {point}")


_lock = threading.Lock()
_armed: dict[str, int] = {}
_hits: dict[str, int] = {}


def crashpoint(name: str) -> None:
    with _lock:
        _hits[name] = _hits.get(name, 0) + 1
        if name not in _armed:
            return
        _armed[name] -= 1
        if _armed[name] > 0:
            return
        del _armed[name]
    raise SimulatedCrash(name)


def arm(name: str, after: int = 1) -> None:
    """Crash on the ``after``-th time ``name`` is reached from now on."""
    with _lock:
        _armed[name] = after


def disarm_all() -> None:
    with _lock:
        _armed.clear()
        _hits.clear()


def hits(name: str) -> int:
    with _lock:
        return _hits.get(name, 0)


@contextmanager
def armed(name: str, after: int = 1):
    arm(name, after)
    try:
        yield
    finally:
        with _lock:
            _armed.pop(name, None)
