"""Execution environment seen by the protocol code.

The engine never touches wall-clock time or threads directly.  It asks
its runtime for the (possibly skewed) logical time, announces
instrumented points where a scheduler may switch workers or inject a
crash, and sleeps in logical time.
"""
from __future__ import annotations

import threading
import time


class WorkerCrash(BaseException):
    """The current worker died (hard timeout, process loss)."""


class SoftTimeout(BaseException):
    """Request deadline reached; the worker gets a short grace period."""


class DirectRuntime:
    """Single worker, manually advanced clock, no interleaving."""

    def __init__(self, worker: str = "w0", start: int = 0):
        self.worker = worker
        self.clock = start

    def now(self) -> int:
        return self.clock

    def advance(self, ticks: int) -> None:
        self.clock += ticks

    def point(self, label: str) -> None:
        pass

    def sleep_until(self, t: int) -> None:
        self.clock = max(self.clock, t)


class ThreadedRuntime:
    """Real threads sharing one store; time is milliseconds since creation.

    Not deterministic and never used by the acceptance suite.
    """

    def __init__(self) -> None:
        self._start = time.monotonic()

    @property
    def worker(self) -> str:
        return threading.current_thread().name

    def now(self) -> int:
        return int((time.monotonic() - self._start) * 1000)

    def point(self, label: str) -> None:
        time.sleep(0)

    def sleep_until(self, t: int) -> None:
        delay = (t - self.now()) / 1000
        if delay > 0:
            time.sleep(delay)
