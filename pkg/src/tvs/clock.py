"""Monotonic time sources: real wall clock and a tick-driven virtual clock."""

from __future__ import annotations

import threading
import time


class Clock:
    """Interface: now() returns a monotonic non-decreasing integer instant."""

    def now(self) -> int:
        raise NotImplementedError


class WallClock(Clock):
    def now(self) -> int:
        return time.monotonic_ns()


class VirtualClock(Clock):
    """Deterministic clock advanced explicitly by scripted backends.

    One tick is reported as one nanosecond so timestamps and latency fields
    stay integer-valued and bit-reproducible across runs.
    """

    def __init__(self, start: int = 0) -> None:
        self._now = start
        self._lock = threading.Lock()

    def now(self) -> int:
        with self._lock:
            return self._now

    def advance(self, ticks: int) -> None:
        if ticks < 0:
            raise ValueError("clock cannot move backwards")
        with self._lock:
            self._now += ticks
