"""Deterministic cooperative scheduler.

Workers are greenlets.  One runs at a time and gives control back at
every instrumented point; the next worker is drawn from a seeded RNG.
The logical clock advances by one tick per scheduling step and jumps
forward when every live worker is asleep.  Crashes and soft timeouts are
injected at instrumented points only, so a (scenario, seed) pair fixes
the whole run.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Callable, Optional

import greenlet

from ..runtime import SoftTimeout, WorkerCrash


class Livelock(RuntimeError):
    pass


@dataclass
class Task:
    name: str
    fn: Callable[[], None]
    skew: int = 0
    crashable: bool = True
    glet: Optional[greenlet.greenlet] = None
    wake_at: Optional[int] = None
    done: bool = False
    deadline: Optional[int] = None
    hard_deadline: Optional[int] = None
    soft_fired: bool = False
    points: int = 0
    crashes: list = field(default_factory=list)


class Scheduler:
    def __init__(self, seed: int, crash_prob: float = 0.0, crash_at: Optional[int] = None,
                 max_steps: int = 5_000_000, record_points: bool = False):
        self.rng = random.Random(seed)
        self.crash_rng = random.Random(f"crash-{seed}")
        self.crash_prob = crash_prob
        self.crash_at = crash_at
        self.crash_enabled = True
        self.clock = 0
        self.steps = 0
        self.max_steps = max_steps
        self.tasks: list[Task] = []
        self.current: Optional[Task] = None
        self.main: Optional[greenlet.greenlet] = None
        # points hit by crashable tasks while injection is enabled
        self.crash_points = 0
        self.record_points = record_points
        self.point_log: list[tuple[int, str, str]] = []
        self.crash_log: list[tuple[int, str, str]] = []

    # -- runtime interface -------------------------------------------------

    @property
    def worker(self) -> str:
        return self.current.name if self.current is not None else "main"

    def now(self) -> int:
        return self.clock + (self.current.skew if self.current is not None else 0)

    def point(self, label: str) -> None:
        task = self.current
        if task is None:
            return
        task.points += 1
        if task.crashable and self.crash_enabled:
            self.crash_points += 1
            idx = self.crash_points
            if self.record_points:
                self.point_log.append((idx, task.name, label))
            crash = idx == self.crash_at
            if self.crash_prob > 0.0 and self.crash_rng.random() < self.crash_prob:
                crash = True
            if crash:
                self.crash_log.append((idx, task.name, label))
                raise WorkerCrash(label)
        if task.deadline is not None:
            now = self.now()
            if now >= task.hard_deadline:
                task.deadline = None
                self.crash_log.append((0, task.name, label + ":hard-timeout"))
                raise WorkerCrash(label + ":hard-timeout")
            if now >= task.deadline and not task.soft_fired:
                task.soft_fired = True
                raise SoftTimeout(label)
        self.main.switch()

    def sleep_until(self, t: int) -> None:
        task = self.current
        if task is None:
            self.clock = max(self.clock, t)
            return
        task.wake_at = t - task.skew
        self.main.switch()

    # -- request deadlines -----------------------------------------------------

    def start_request(self, timeout: int, grace: int) -> None:
        task = self.current
        task.deadline = self.now() + timeout
        task.hard_deadline = task.deadline + grace
        task.soft_fired = False

    def end_request(self) -> None:
        if self.current is not None:
            self.current.deadline = None

    # -- driving ---------------------------------------------------------------

    def spawn(self, name: str, fn: Callable[[], None], skew: int = 0, crashable: bool = True) -> Task:
        task = Task(name, fn, skew, crashable)
        self.tasks.append(task)
        return task

    def _body(self, task: Task) -> Callable[[], None]:
        def run() -> None:
            try:
                task.fn()
            finally:
                task.done = True

        return run

    def run(self) -> None:
        """Run all spawned tasks to completion."""
        self.main = greenlet.getcurrent()
        for task in self.tasks:
            if task.glet is None:
                task.glet = greenlet.greenlet(self._body(task), parent=self.main)
        while True:
            alive = [t for t in self.tasks if not t.done]
            if not alive:
                break
            runnable = [t for t in alive if t.wake_at is None or t.wake_at <= self.clock]
            if not runnable:
                self.clock = min(t.wake_at for t in alive)
                continue
            task = runnable[0] if len(runnable) == 1 else self.rng.choice(runnable)
            task.wake_at = None
            self.clock += 1
            self.steps += 1
            if self.steps > self.max_steps:
                raise Livelock(f"no quiescence after {self.max_steps} steps")
            self.current = task
            try:
                task.glet.switch()
            finally:
                self.current = None
        self.tasks = []
