"""Soft-timeout recovery and the background sweeper.

Queries may miss entities (stale indices) and clocks may be skewed, so
every destructive step re-reads its target inside an LT first.  Timeouts
only decide how soon work gets noticed, never whether it is safe.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Any

from .dt_engine import Engine, release_lock
from .egstore import STRONG, Entity, LTContext
from .schema import (
    CREATED, DIST_TXN, PENDING_MODES, SHADOW_DELETE_KIND, SHADOW_KIND, TARGET, TXN_KIND,
    DTRecord, Mode,
)
from .egstore import canonical_json


@dataclass
class GCConfig:
    timeout_gae: int = 300
    timeout_roll_forward_dt: int = 600
    timeout_garbage_collect_dt: int = 600
    timeout_garbage_collect_shadow: int = 1200
    timeout_read_lock_dt: int = 300
    epsilon: int = 1

    def __post_init__(self) -> None:
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ValueError(f"{f.name} must be positive")

    @property
    def half_gae(self) -> int:
        return (self.timeout_gae + 1) // 2

    def longest(self) -> int:
        return max(asdict(self).values())


@dataclass
class SweepReport:
    rolled_forward: int = 0
    stillborn_aborted: int = 0
    shadows_collected: int = 0
    read_locks_expired: int = 0

    def counts(self) -> list[int]:
        return [self.rolled_forward, self.stillborn_aborted, self.shadows_collected, self.read_locks_expired]


class GarbageCollector:
    def __init__(self, engine: Engine, config: GCConfig | None = None):
        self.engine = engine
        self.store = engine.store
        self.rt = engine.rt
        self.config = config or GCConfig()

    def sweep(self) -> SweepReport:
        report = SweepReport(
            self.roll_forward_abandoned(),
            self.abort_stillborn(),
            self.collect_orphan_shadows(),
            self.expire_read_locks(),
        )
        for q, count in enumerate(report.counts(), 1):
            self.engine.log("GC", q, count)
        return report

    def _txns(self, predicate: Any) -> list[DTRecord]:
        ents = self.store.general_query(TXN_KIND, lambda e: predicate(e.props), label="gc:query")
        return [DTRecord.from_entity(e) for e in ents]

    # query 1
    def roll_forward_abandoned(self) -> int:
        cutoff = self.rt.now() - self.config.timeout_roll_forward_dt
        pending = {m.value for m in PENDING_MODES}
        recs = self._txns(lambda p: p["mode"] in pending and p["modified"] < cutoff)
        for rec in recs:
            self.engine.roll_forward(rec.key)
        return len(recs)

    # query 2: the double-half algorithm
    def abort_stillborn(self) -> int:
        cutoff = self.rt.now() - self.config.timeout_garbage_collect_dt
        recs = self._txns(lambda p: p["mode"] == Mode.INIT0.value and p["modified"] < cutoff)
        fresh = [r for r in recs if not r.half_timed_out]
        flagged = [r for r in recs if r.half_timed_out]
        half = self.config.half_gae + self.config.epsilon
        if fresh:
            self.rt.sleep_until(self.rt.now() + half)
            for rec in fresh:
                self.engine.lt(rec.key.root, _flag_half_timed_out(rec.key), "gc:halftimeout")
        aborted = 0
        if flagged:
            deadline = self.rt.now() + half
            wanted = {r.key for r in flagged}
            found: dict[Any, list] = {}
            for kind in (SHADOW_KIND, SHADOW_DELETE_KIND):
                for sh in self.store.general_query(kind, lambda e: e.get(DIST_TXN) in wanted, label="gc:query"):
                    target = sh[TARGET]
                    found.setdefault(sh[DIST_TXN], []).append((target if target.is_complete else None, sh.key))
            self.rt.sleep_until(deadline)
            for rec in flagged:
                mode = self.engine.abort_init(rec.key, "stillborn", sorted(found.get(rec.key, []), key=_pair_order))
                if mode == Mode.ABORTING3:
                    aborted += 1
                    self.engine.dispatch(rec.key)
        return aborted

    # query 3
    def collect_orphan_shadows(self) -> int:
        cutoff = self.rt.now() - self.config.timeout_garbage_collect_shadow
        collected = 0
        for kind in (SHADOW_KIND, SHADOW_DELETE_KIND):
            for sh in self.store.general_query(kind, lambda e: e.get(CREATED, 0) < cutoff, label="gc:query"):
                dt = sh[DIST_TXN]
                # existence is decided by a direct read, never by a query
                if self.store.get(dt, STRONG, label="gc:shadow:owner") is not None:
                    continue
                if self.engine.lt(sh.key.root, self._orphan_body(sh), "gc:shadow:delete"):
                    collected += 1
        return collected

    def _orphan_body(self, sh: Entity) -> Any:
        engine = self.engine

        def body(lt: LTContext) -> bool:
            current = lt.get(sh.key)
            if current is None:
                return False
            lt.delete(sh.key)
            target, dt = current[TARGET], current[DIST_TXN]
            if target.is_complete and release_lock(lt, target, dt):
                lt.on_commit(lambda: engine.log("RELEASE", dt, target))
            return True

        return body

    # expired read locks
    def expire_read_locks(self) -> int:
        now = self.rt.now()
        pad = self.engine.config.read_lock_pad
        recs = self._txns(lambda p: p["mode"] == Mode.NONE.value and p.get("read_lock")
                          and (p.get("read_lock_timeout") or 0) + pad < now)
        expired = 0
        for rec in recs:
            reason = canonical_json({"aborted": "read lock expired"})

            def update(r: DTRecord, reason: str = reason) -> None:
                r.result = reason

            if self.engine.transition_mode(rec.key, Mode.NONE, Mode.ABORTING3, update,
                                           label="gc:readlock:expire") == Mode.ABORTING3:
                expired += 1
                self.engine.dispatch(rec.key)
        return expired


def _pair_order(pair: tuple) -> tuple:
    obj, shadow = pair
    return (obj is None, obj if obj is not None else shadow, shadow)


def _flag_half_timed_out(dt_key: Any) -> Any:
    def body(lt: LTContext) -> bool:
        ent = lt.get(dt_key)
        if ent is None or ent.props.get("mode") != Mode.INIT0.value:
            return False
        if not ent.props.get("half_timed_out"):
            # 'modified' is left alone so the second stage is not postponed
            ent.props["half_timed_out"] = True
            lt.put(ent)
        return True

    return body


def handle_soft_timeout(engine: Engine, ctx: Any) -> None:
    engine.handle_soft_timeout(ctx)
