"""Append-only event log shared by the engine, GC and checker."""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Any, Iterable, Iterator, Optional

EVENTS = (
    "READ", "LOCK", "ENTER_2LOCKED", "CHECK_PASS", "CHECK_FAIL", "APPLY",
    "RELEASE", "MODE", "COMMIT", "ABORT", "WAIT_ON", "GC",
)


class MalformedHistory(ValueError):
    pass


def _text(value: Any) -> Optional[str]:
    if value is None:
        return None
    canonical = getattr(value, "canonical", None)
    return canonical() if canonical is not None else str(value)


@dataclass(frozen=True)
class Event:
    time: int
    worker: str
    event: str
    dt: str
    obj: Optional[str] = None
    detail: Optional[str] = None

    def format(self) -> str:
        line = f"{self.time} {self.worker} {self.event} {self.dt} {self.obj or '-'}"
        return line + (f" {self.detail}" if self.detail else "")

    @classmethod
    def parse(cls, line: str) -> "Event":
        parts = line.rstrip("\n").split(" ", 5)
        if len(parts) < 5:
            raise MalformedHistory(f"too few fields: {line!r}")
        time, worker, event, dt, obj = parts[:5]
        if event not in EVENTS:
            raise MalformedHistory(f"unknown event {event!r}")
        try:
            t = int(time)
        except ValueError:
            raise MalformedHistory(f"bad time {time!r}") from None
        return cls(t, worker, event, dt, None if obj == "-" else obj, parts[5] if len(parts) > 5 else None)


class History:
    """Event time is a strictly increasing sequence number."""

    def __init__(self, events: Optional[Iterable[Event]] = None):
        self.events: list[Event] = []
        self._lock = threading.Lock()
        for ev in events or ():
            self.append(ev)

    def append(self, ev: Event) -> None:
        if self.events and ev.time <= self.events[-1].time:
            raise MalformedHistory(f"time not increasing at {ev.format()!r}")
        if ev.event not in EVENTS:
            raise MalformedHistory(f"unknown event {ev.event!r}")
        self.events.append(ev)

    def record(self, worker: str, event: str, dt: Any, obj: Any = None, detail: Any = None) -> Event:
        with self._lock:
            t = self.events[-1].time + 1 if self.events else 1
            ev = Event(t, worker, event, _text(dt), _text(obj), None if detail is None else str(detail))
            self.append(ev)
        return ev

    def __iter__(self) -> Iterator[Event]:
        return iter(self.events)

    def __len__(self) -> int:
        return len(self.events)

    def of(self, *kinds: str) -> list[Event]:
        return [e for e in self.events if e.event in kinds]

    def dump(self) -> str:
        return "".join(e.format() + "\n" for e in self.events)

    @classmethod
    def parse(cls, text: str) -> "History":
        return cls(Event.parse(line) for line in text.splitlines() if line.strip())
