"""Scenario description and the runner that plays it out."""
from __future__ import annotations

import dataclasses
import random
import time
from dataclasses import dataclass, field
from typing import Any, Optional

from .. import user_queues
from ..dt_engine import Engine, EngineConfig
from ..egstore import Store, StoreConfig
from ..gc import GarbageCollector, GCConfig
from ..history import History
from ..read_locks import acquire_read_lock
from ..runtime import SoftTimeout, WorkerCrash
from ..schema import (
    SHADOW_DELETE_KIND, SHADOW_KIND, TERMINAL, TXN_KIND, DTError, DTRecord, ReadLockExpired,
)
from .scheduler import Scheduler
from .workloads import REGISTRY, Workload, build_workload


class NonQuiescent(RuntimeError):
    pass


class ScenarioError(ValueError):
    pass


@dataclass
class Scenario:
    seed: int = 1
    workers: int = 1
    workload: str = "bank"
    ops: int = 10
    # accounts / keys in the workload
    size: int = 10
    # store faults
    p_submarine: float = 0.0
    p_stale_eventual: float = 0.0
    p_stale_index: float = 0.0
    lt_retry_limit: int = 3
    stale_depth: int = 3
    # worker faults
    crash_prob: float = 0.0
    crash_at: int = 0
    soft_timeouts: bool = False
    skews: list = field(default_factory=list)
    # features
    queues: bool = False
    sync_mode: bool = False
    read_locks: bool = False
    # background sweeper cadence in ticks; 0 disables the peer
    gc_interval: int = 200
    timeout_gae: int = 300
    timeout_roll_forward_dt: int = 600
    timeout_garbage_collect_dt: int = 600
    timeout_garbage_collect_shadow: int = 1200
    timeout_read_lock_dt: int = 300
    epsilon: int = 1
    quiesce_rounds: int = 40

    def __post_init__(self) -> None:
        if self.workers < 1:
            raise ScenarioError("workers must be >= 1")
        if self.sync_mode and not self.queues:
            raise ScenarioError("sync_mode needs queues")
        if self.skews and len(self.skews) != self.workers:
            raise ScenarioError("skews needs one offset per worker")
        self.gc_config()  # validates durations

    def gc_config(self) -> GCConfig:
        return GCConfig(self.timeout_gae, self.timeout_roll_forward_dt, self.timeout_garbage_collect_dt,
                        self.timeout_garbage_collect_shadow, self.timeout_read_lock_dt, self.epsilon)

    def store_config(self) -> StoreConfig:
        return StoreConfig(self.p_submarine, self.p_stale_eventual, self.p_stale_index,
                           self.lt_retry_limit, self.seed, self.stale_depth)

    def replace(self, **changes: Any) -> "Scenario":
        return dataclasses.replace(self, **changes)

    # -- flat key=value text ----------------------------------------------------

    @classmethod
    def parse(cls, text: str) -> "Scenario":
        types = {f.name: f for f in dataclasses.fields(cls)}
        values: dict[str, Any] = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            name, sep, value = (s.strip() for s in line.partition("="))
            if not sep or name not in types:
                raise ScenarioError(f"line {n}: unknown or malformed entry {raw!r}")
            values[name] = _coerce(types[name], value)
        return cls(**values)

    def format(self) -> str:
        out = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            out.append(f"{f.name} = {v}")
        return "\n".join(out) + "\n"


def _coerce(f: dataclasses.Field, value: str) -> Any:
    default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
    if isinstance(default, bool):
        if value.lower() not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
            raise ScenarioError(f"{f.name}: not a boolean: {value!r}")
        return value.lower() in ("true", "1", "yes", "on")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, list):
        return [int(x) for x in value.split(",") if x.strip()]
    return value


@dataclass
class RunResult:
    scenario: Scenario
    initial: str
    final: str
    history: History
    report: dict
    # the live store, for tests that inspect its group logs
    store: Optional[Store] = None


def _make_worker(engine: Engine, sched: Scheduler, sc: Scenario, user: str, ops: list, stats: dict) -> Any:
    gc = sc.gc_config()

    def run_op(op: Any) -> None:
        fn = REGISTRY[op.fn]
        if sc.queues:
            user_queues.settle_user(engine, user)
        lock = None
        if sc.read_locks and op.touches:
            from ..egstore import Key
            lock = acquire_read_lock(engine, user, [Key.parse(k) for k in op.touches], gc.timeout_read_lock_dt)
        rec: Optional[DTRecord] = None
        if lock is not None:
            try:
                rec = engine.distributed_run_in_transaction(user, fn, op.args, op.fn, read_lock_dt=lock.key)
            except ReadLockExpired:
                stats["read_lock_expired"] += 1
        if rec is None:
            rec = engine.distributed_run_in_transaction(user, fn, op.args, op.fn)
        stats["committed" if rec.mode.value == "DONE4" else "aborted"] += 1
        if sc.queues:
            user_queues.settle_user(engine, user)
        elif rec.mode in TERMINAL:
            user_queues.acknowledge(engine, user, rec.key)

    def body() -> None:
        for op in ops:
            try:
                if sc.soft_timeouts:
                    sched.start_request(gc.timeout_gae, max(1, gc.timeout_gae // 10))
                run_op(op)
            except WorkerCrash:
                stats["crashes"] += 1
            except SoftTimeout:
                stats["soft_timeouts"] += 1
            except DTError as exc:
                # QueueFull and friends: the request is refused, the user moves on
                stats["refused"] += 1
                stats.setdefault("refusals", []).append(type(exc).__name__)
            finally:
                sched.end_request()

    return body


def residue(store: Store) -> list[str]:
    """Anything a quiescent store must not contain."""
    problems = []
    for ent in store.entities():
        kind = ent.key.kind
        if kind in (SHADOW_KIND, SHADOW_DELETE_KIND):
            problems.append(f"shadow {ent.key}")
        elif kind == TXN_KIND and DTRecord.from_entity(ent).mode not in TERMINAL:
            problems.append(f"unfinished DT {ent.key}")
        if ent.write_lock is not None:
            problems.append(f"lock on {ent.key}")
    return problems


def run_scenario(sc: Scenario, crash_at: Optional[int] = None, record_points: bool = False) -> RunResult:
    started = time.perf_counter()
    wl_rng = random.Random(f"workload-{sc.seed}")
    workload: Workload = build_workload(sc.workload, wl_rng, sc.workers, sc.ops, sc.size)
    gc_cfg = sc.gc_config()
    fault_free = StoreConfig(rng_seed=sc.seed, lt_retry_limit=sc.lt_retry_limit, stale_depth=sc.stale_depth)
    store = Store(fault_free)
    sched = Scheduler(sc.seed, record_points=record_points)
    store.runtime = sched
    cfg = EngineConfig(user_queues=sc.queues, sync_mode=sc.sync_mode,
                       respect_read_locks=sc.read_locks, read_lock_pad=sc.epsilon)
    engine = Engine(store, sched, History(), cfg)
    gc = GarbageCollector(engine, gc_cfg)

    # setup: fault free, not part of the checked history
    def setup() -> None:
        for op in workload.setup:
            rec = engine.distributed_run_in_transaction("setup", REGISTRY[op.fn], op.args, op.fn)
            if rec.mode.value != "DONE4":
                raise RuntimeError(f"setup step {op} failed: {rec.result}")
            user_queues.settle_user(engine, "setup")

    sched.spawn("setup", setup, crashable=False)
    sched.run()
    initial = store.dump()

    history = History()
    engine.history = history
    store.config = sc.store_config()
    sched.crash_prob = sc.crash_prob
    sched.crash_at = crash_at if crash_at is not None else (sc.crash_at or None)
    stats = {"committed": 0, "aborted": 0, "crashes": 0, "soft_timeouts": 0, "refused": 0,
             "read_lock_expired": 0}
    users = [f"u{i + 1}" for i in range(sc.workers)]
    skews = sc.skews or [0] * sc.workers
    done = {"workers": 0}

    for i, user in enumerate(users):
        body = _make_worker(engine, sched, sc, user, workload.per_worker[i], stats)

        def worker(body: Any = body) -> None:
            try:
                body()
            finally:
                done["workers"] += 1

        sched.spawn(f"w{i + 1}", worker, skew=skews[i])

    if sc.gc_interval > 0:
        def peer() -> None:
            while done["workers"] < len(users):
                try:
                    gc.sweep()
                except WorkerCrash:
                    stats["crashes"] += 1
                sched.sleep_until(sched.now() + sc.gc_interval)

        sched.spawn("gc", peer, skew=max(skews) if skews else 0)
    sched.run()
    crash_points = sched.crash_points

    # quiescence: no more client work, no injected crashes
    sched.crash_enabled = False
    max_skew = max(skews) if skews else 0
    rounds = {"n": 0}

    def settle() -> None:
        wait = gc_cfg.longest() + max_skew + 2 * gc_cfg.timeout_gae + 2
        for n in range(sc.quiesce_rounds):
            rounds["n"] = n + 1
            sched.sleep_until(sched.now() + wait)
            gc.sweep()
            for user in users:
                user_queues.settle_user(engine, user)
            if not residue(store) and not any(e.key.kind == TXN_KIND for e in store.entities()):
                return
        raise NonQuiescent("; ".join(residue(store)[:10]) or "DT records remain")

    sched.spawn("final", settle, crashable=False)
    sched.run()
    final = store.dump()
    report = dict(stats)
    report.update(
        crash_points=crash_points,
        steps=sched.steps,
        quiesce_rounds=rounds["n"],
        seconds=time.perf_counter() - started,
        crash_log=list(sched.crash_log),
    )
    if record_points:
        report["points"] = list(sched.point_log)
    return RunResult(sc, initial, final, history, report, store)


@dataclass
class SweepOutcome:
    index: int
    worker: str
    label: str
    result: Optional[RunResult] = None
    error: str = ""


def crash_sweep(sc: Scenario) -> list[SweepOutcome]:
    """Rerun ``sc`` once per instrumented point, killing the worker there."""
    base = sc.replace(crash_prob=0.0, crash_at=0)
    probe = run_scenario(base, record_points=True)
    outcomes = []
    for idx, worker, label in probe.report["points"]:
        out = SweepOutcome(idx, worker, label)
        try:
            out.result = run_scenario(base, crash_at=idx)
        except NonQuiescent as exc:
            out.error = f"NonQuiescent: {exc}"
        outcomes.append(out)
    return outcomes
