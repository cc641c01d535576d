"""Optimistic distributed transactions built from entity-group LTs.

A DT runs its client function against a private cache (Run and Record),
writes one shadow per modified object next to that object, and then
commits in three passes: lock every written object in key order, check
every read version, and copy shadows over their targets.  Each step is
a small LT guarded so that any number of workers can repeat it, which
is what lets any worker roll any DT forward after a crash.

Out of scope here: the single-entity-group fast path, early lock
transition points and merged lock/check passes.  They only save LTs
and they interact badly with user queues.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

from . import user_queues
from .egstore import (
    EVENTUAL, STRONG, Entity, Key, LTContext, Store, TransientFailure, canonical_json,
    is_reserved,
)
from .history import History
from .runtime import SoftTimeout
from .schema import (
    CREATED, DELETED, DIST_TXN, EMPTY_LISTS, NEW, SHADOW_DELETE_KIND,
    SHADOW_KIND, TARGET, TERMINAL, TXN_KIND, DeleteThenPutNumericId, DTError, DTRecord,
    FlavorViolation, IllegalTransition, Mode, ProtocolError, QueueFull, ReadLockExpired,
    is_edge, pmd_key, user_key, version_of,
)

GET, PUT, DELETE = "GET", "PUT", "DELETE"


@dataclass
class EngineConfig:
    user_queues: bool = False
    # default for users created by this engine
    sync_mode: bool = False
    respect_read_locks: bool = False
    read_lock_pad: int = 1
    # rereads of a lock whose holder is already finished before giving up
    phantom_lock_retries: int = 4


@dataclass
class ReadFlags:
    in_lt: bool = False
    read_through: bool = False
    dont_cache: bool = False


@dataclass
class TxnCache:
    object_cache: dict = field(default_factory=dict)
    version_cache: dict = field(default_factory=dict)
    operation_cache: dict = field(default_factory=dict)


class AbortRequested(DTError):
    """Raised into client code when the DT can no longer commit."""


def shadow_payload(props: dict[str, Any]) -> tuple[dict[str, Any], list[str]]:
    payload, empty = {}, []
    for name, value in props.items():
        if isinstance(value, list) and not value:
            # the native store drops empty lists; remember them explicitly
            empty.append(name)
        else:
            payload[name] = value
    return payload, sorted(empty)


def materialize(shadow: Entity) -> dict[str, Any]:
    props = {k: v for k, v in shadow.props.items() if not k.startswith("dt__")}
    for name in shadow.get(EMPTY_LISTS, []):
        props[name] = []
    return props


def client_desc(fn_name: str, args: Any) -> str:
    return canonical_json({"fn": fn_name, "args": list(args)})


class DistributedTransaction:
    """Handle given to a client function; all data access goes through it."""

    def __init__(self, engine: "Engine", key: Key, desc: str, pinned: Optional[list] = None):
        self.engine = engine
        self.key = key
        self.desc = desc
        self.cache = TxnCache()
        # creates with generated ids, in issue order
        self.creates: list[Entity] = []
        self.shadows_written: list[tuple[Optional[Key], Key]] = []
        self.pinned: dict[Key, Optional[str]] = dict(pinned or [])
        self.abort_reason: Optional[str] = None
        self.running = True

    @property
    def version(self) -> str:
        return version_of(self.key)

    def _require_running(self) -> None:
        if not self.running:
            raise DTError("the client function has already returned")
        if self.abort_reason is not None:
            raise AbortRequested(self.abort_reason)

    def _abort(self, reason: str, exc: type = AbortRequested) -> None:
        self.abort_reason = reason
        raise exc(reason)

    def get(self, key: Key, in_lt: bool = False, read_through: bool = False,
            dont_cache: bool = False) -> Optional[Entity]:
        self._require_running()
        if not key.is_complete:
            raise ValueError("cannot read an incomplete key")
        cache = self.cache
        op = cache.operation_cache.get(key)
        if op in (PUT, DELETE):
            ent = cache.object_cache[key]
            return ent.copy() if ent is not None else None
        if op == GET and not read_through:
            ent = cache.object_cache[key]
            return ent.copy() if ent is not None else None
        ent, version = self.engine._dt_read(self, key, in_lt)
        known = key in cache.version_cache
        if known and cache.version_cache[key] != version:
            # a version once cached never changes for this DT
            self._abort(f"version of {key} changed during the transaction")
        if key in self.pinned and self.pinned[key] != version:
            self._abort(f"read lock on {key} was not respected")
        if not known:
            cache.version_cache[key] = version
            self.engine.log("READ", self.key, key, version or "none")
        if not dont_cache:
            cache.object_cache[key] = ent
            cache.operation_cache[key] = GET
        return ent.copy() if ent is not None else None

    def put(self, entity: Entity) -> None:
        self._require_running()
        key = entity.key
        if is_reserved(key.kind) or any(is_reserved(k) for k, _ in key.path):
            raise FlavorViolation(f"{key} uses a reserved kind")
        for name in entity.props:
            if is_reserved(name):
                raise FlavorViolation(f"property {name!r} uses a reserved prefix")
        if not key.is_complete:
            if key.parent is None:
                raise ValueError("generated-id creates need a parent key (its entity group)")
            self.creates.append(Entity(key, entity.copy().props))
            return
        cache = self.cache
        if key.is_numeric and cache.operation_cache.get(key) == DELETE:
            raise DeleteThenPutNumericId(f"{key} was deleted earlier in this transaction")
        cache.object_cache[key] = Entity(key, entity.copy().props)
        cache.operation_cache[key] = PUT

    def delete(self, key: Key) -> None:
        self._require_running()
        if not key.is_complete:
            raise ValueError("cannot delete an incomplete key")
        if is_reserved(key.kind):
            raise FlavorViolation(f"{key} uses a reserved kind")
        self.cache.object_cache[key] = None
        self.cache.operation_cache[key] = DELETE

    def allocate_ids(self, prototype: Key, count: int = 1) -> range:
        return self.engine.store.allocate_ids(prototype, count)


class Engine:
    def __init__(self, store: Store, runtime: Any, history: Optional[History] = None,
                 config: Optional[EngineConfig] = None):
        self.store = store
        self.rt = runtime
        self.history = history if history is not None else History()
        self.config = config or EngineConfig()

    # -- plumbing ----------------------------------------------------------

    def log(self, event: str, dt: Any, obj: Any = None, detail: Any = None) -> None:
        self.history.record(self.rt.worker, event, dt, obj, detail)

    def log_mode(self, dt_key: Key, old: Any, new: Any) -> None:
        self.log("MODE", dt_key, None, f"{old}->{new}")

    def lt(self, group: Key, body: Callable[[LTContext], Any], label: str) -> Any:
        """Run an idempotent LT body until it is acknowledged."""
        failures = 0
        while True:
            try:
                return self.store.run_in_lt(group, body, label=label)
            except TransientFailure:
                failures += 1
                if failures >= self.store.config.lt_retry_limit:
                    self.rt.point(label + ":backoff")
                    failures = 0

    def read_record(self, dt_key: Key) -> Optional[DTRecord]:
        ent = self.store.get(dt_key, STRONG, label="dt:record:read")
        return DTRecord.from_entity(ent) if ent is not None else None

    def user_records(self, ukey: Key) -> list[DTRecord]:
        return [DTRecord.from_entity(e)
                for e in self.store.ancestor_query(ukey, kind=TXN_KIND, label="dt:user:scan")]

    # -- creation ------------------------------------------------------------

    def _create_record(self, rec: DTRecord, label: str) -> DTRecord:
        """Write-guarded creation: the pre-allocated key makes retries harmless."""
        ukey = rec.key.root
        cfg = self.config

        def body(lt: LTContext) -> DTRecord:
            existing = lt.get(rec.key)
            if existing is not None:
                return DTRecord.from_entity(existing)
            user = user_queues.load_user(lt, ukey, cfg.sync_mode)
            if (cfg.user_queues and rec.mode == Mode.INIT0 and user.get("sync_mode")
                    and user_queues.occupancy(user) >= 1):
                raise QueueFull(f"user {ukey} has an unfinished or unacknowledged DT")
            if lt.get(ukey) is None:
                lt.put(user)
            lt.put(rec.to_entity())
            lt.on_commit(lambda: self.log_mode(rec.key, NEW, rec.mode))
            return rec

        return self.lt(ukey, body, label)

    def begin_dt(self, user: str, desc: str = "") -> DistributedTransaction:
        ukey = user_key(user)
        dt_id = self.store.allocate_ids(Key.incomplete(TXN_KIND, ukey))[0]
        rec = DTRecord(ukey.child(TXN_KIND, dt_id), Mode.INIT0, modified=self.rt.now(), client_desc=desc)
        rec = self._create_record(rec, "dt:begin")
        if rec.mode != Mode.INIT0:
            raise ProtocolError(f"fresh DT {rec.key} found in mode {rec.mode}")
        return DistributedTransaction(self, rec.key, desc)

    def activate_read_lock(self, dt_key: Key, desc: str) -> DistributedTransaction:
        """NONE -> INIT0 for a read-lock DT that has not expired yet."""
        now = self.rt.now()

        def body(lt: LTContext) -> DTRecord:
            ent = lt.get(dt_key)
            if ent is None:
                raise ReadLockExpired(f"{dt_key} no longer exists")
            rec = DTRecord.from_entity(ent)
            if rec.mode == Mode.INIT0 and rec.client_desc == desc:
                return rec  # our own earlier, unacknowledged activation
            if rec.mode != Mode.NONE or not rec.read_lock:
                raise ReadLockExpired(f"{dt_key} is in mode {rec.mode}")
            if rec.read_lock_timeout is None or rec.read_lock_timeout <= now:
                raise ReadLockExpired(f"read lock {dt_key} expired")
            rec.mode = Mode.INIT0
            rec.modified = now
            rec.client_desc = desc
            lt.put(rec.to_entity())
            lt.on_commit(lambda: self.log_mode(dt_key, Mode.NONE, Mode.INIT0))
            return rec

        rec = self.lt(dt_key.root, body, "dt:readlock:activate")
        return DistributedTransaction(self, dt_key, desc, pinned=rec.reads())

    # -- Run and Record --------------------------------------------------------

    def _dt_read(self, ctx: DistributedTransaction, key: Key, in_lt: bool) -> tuple[Optional[Entity], Optional[str]]:
        retries = 0
        while True:
            if in_lt:
                def body(lt: LTContext) -> tuple:
                    ent = lt.get(key)
                    pmd = lt.get(pmd_key(key)) if ent is None and key.is_named else None
                    return ent, pmd

                ent, pmd = self.lt(key.root, body, "dt:get:lt")
            else:
                ent = self.store.get(key, EVENTUAL, label="dt:get:read")
                pmd = None
                if ent is None and key.is_named:
                    pmd = self.store.get(pmd_key(key), EVENTUAL, label="dt:get:pmd")
            carrier = ent if ent is not None else pmd
            if carrier is None:
                return None, None
            if not carrier.is_dt_flavored:
                ctx._abort(f"{key} is not DT-flavored", FlavorViolation)
            holder = carrier.write_lock
            if holder is None or holder == ctx.key:
                return (ent.copy() if ent is not None else None), carrier.version
            # someone is committing this object: help it finish, then reread
            holder_rec = self.read_record(holder)
            if holder_rec is None or holder_rec.mode in TERMINAL:
                retries += 1
                if retries > self.config.phantom_lock_retries:
                    ctx._abort(f"lock on {key} held by finished DT {holder}")
                continue
            self.log("WAIT_ON", ctx.key, key, version_of(holder))
            self.roll_forward(holder)

    def flush(self, ctx: DistributedTransaction) -> tuple[list, list]:
        """Write one shadow per pending write; returns (get list, put list)."""
        cache = ctx.cache
        reads = sorted(cache.version_cache.items(), key=lambda kv: kv[0])
        entries: list[tuple[Optional[Key], Key, Optional[dict]]] = []
        for key in sorted(k for k, op in cache.operation_cache.items() if op in (PUT, DELETE)):
            ent = cache.object_cache[key]
            entries.append((key, key, ent.props if ent is not None else None))
        creates = sorted(enumerate(ctx.creates), key=lambda ie: (ie[1].key.root, ie[0]))
        for _, ent in creates:
            entries.append((None, ent.key, ent.props))
        now = self.rt.now()
        writes = []
        for obj, target, props in entries:
            shadow = self._write_shadow(ctx, target, props, now)
            ctx.shadows_written.append((obj, shadow))
            writes.append((obj, shadow))
        return reads, writes

    def _write_shadow(self, ctx: DistributedTransaction, target: Key, props: Optional[dict], now: int) -> Key:
        kind = SHADOW_DELETE_KIND if props is None else SHADOW_KIND
        payload, empty = shadow_payload(props or {})
        payload.update({DIST_TXN: ctx.key, CREATED: now, TARGET: target})
        if empty:
            payload[EMPTY_LISTS] = empty
        group = target.root
        failures = 0
        while True:
            # a fresh id per attempt; an unacknowledged attempt may still
            # exist and is left for garbage collection
            sid = self.store.allocate_ids(Key.incomplete(kind, group))[0]
            shadow = group.child(kind, sid)
            try:
                self.store.put(Entity(shadow, dict(payload)), label="dt:flush:shadow")
                return shadow
            except TransientFailure:
                failures += 1
                if failures >= self.store.config.lt_retry_limit:
                    self.rt.point("dt:flush:shadow:backoff")
                    failures = 0

    def go_ready(self, ctx: DistributedTransaction, reads: list, writes: list, result: Optional[str]) -> Any:
        now = self.rt.now()
        cfg = self.config

        def body(lt: LTContext) -> Any:
            ent = lt.get(ctx.key)
            if ent is None:
                return DELETED
            rec = DTRecord.from_entity(ent)
            if rec.mode == Mode.ABORTING3:
                # someone gave up on us; hand over our shadows for cleanup
                known = set(rec.put_list_shadow)
                extra = [(o, s) for o, s in writes if s not in known]
                if extra:
                    rec.put_list_obj += [o for o, _ in extra]
                    rec.put_list_shadow += [s for _, s in extra]
                    lt.put(rec.to_entity())
                return rec.mode
            if rec.mode != Mode.INIT0:
                return rec.mode
            old = rec.mode
            rec.put_list_obj = [o for o, _ in writes]
            rec.put_list_shadow = [s for _, s in writes]
            rec.modified = now
            rec.half_timed_out = False
            if cfg.user_queues:
                user = user_queues.load_user(lt, rec.user, cfg.sync_mode)
                if user.get("sync_mode") and user_queues.occupancy(user) >= 1:
                    rec.mode = Mode.ABORTING3
                    rec.result = canonical_json({"aborted": "queue full"})
                    lt.put(rec.to_entity())
                    lt.on_commit(lambda: self.log_mode(ctx.key, old, Mode.ABORTING3))
                    return rec.mode
            rec.get_list_obj = [k for k, _ in reads]
            rec.get_list_version = [v for _, v in reads]
            rec.result = result
            rec.mode = Mode.READY1
            lt.put(rec.to_entity())
            if cfg.user_queues:
                user_queues.apply_transition(lt, ctx.key, old, Mode.READY1)
            lt.on_commit(lambda: self.log_mode(ctx.key, old, Mode.READY1))
            return rec.mode

        return self.lt(ctx.key.root, body, "dt:ready")

    # -- mode transitions ----------------------------------------------------

    def transition_mode(self, dt_key: Key, current: Any, new: Any,
                        update: Optional[Callable[[DTRecord], None]] = None,
                        label: str = "dt:mode") -> Any:
        """Move ``dt_key`` from ``current`` to ``new`` unless someone already moved it.

        Returns the mode stored after the LT; the caller re-dispatches on it.
        """
        if not is_edge(current, new):
            raise IllegalTransition(f"{current} -> {new}")
        now = self.rt.now()
        queues = self.config.user_queues

        def body(lt: LTContext) -> Any:
            ent = lt.get(dt_key)
            if ent is None:
                return DELETED
            rec = DTRecord.from_entity(ent)
            if rec.mode != current:
                return rec.mode
            if new == DELETED:
                lt.delete(dt_key)
            else:
                rec.mode = new
                rec.modified = now
                if update is not None:
                    update(rec)
                lt.put(rec.to_entity())
            if queues:
                user_queues.apply_transition(lt, dt_key, current, new)
            lt.on_commit(lambda: self._after_transition(rec, current, new))
            return new

        return self.lt(dt_key.root, body, label)

    def _after_transition(self, rec: DTRecord, old: Any, new: Any) -> None:
        self.log_mode(rec.key, old, new)
        if new == Mode.LOCKED2:
            self.log("ENTER_2LOCKED", rec.key)
        elif new == Mode.DONE4:
            detail = json.loads(rec.client_desc) if rec.client_desc else {}
            detail = {"desc": detail, "puts": len(rec.put_list_shadow)}
            self.log("COMMIT", rec.key, None, json.dumps(detail, sort_keys=True, separators=(",", ":")))
        elif new == Mode.ABORTED4:
            self.log("ABORT", rec.key, None, rec.result)

    # -- commit passes -----------------------------------------------------------

    def lock_written_objects(self, rec: DTRecord) -> Any:
        """Lock put targets in key order; returns the next mode to dispatch on."""
        dt = rec.key
        for obj, shadow in rec.writes():
            if obj is None:
                continue  # nothing to lock for generated-id creates
            if self.config.respect_read_locks:
                from .read_locks import writer_respect_read_locks
                writer_respect_read_locks(self, obj, exclude=dt)
            while True:
                outcome = self.lt(obj.root, self._lock_body(dt, obj, shadow), "dt:lock")
                if outcome == "behind":
                    return None  # a faster worker already applied this DT
                if outcome in ("locked", "skip"):
                    break
                holder = outcome
                self.log("WAIT_ON", dt, obj, version_of(holder))
                self.roll_forward(holder)
        return self.transition_mode(dt, Mode.READY1, Mode.LOCKED2, label="dt:mode:locked")

    def _lock_body(self, dt: Key, obj: Key, shadow: Key) -> Callable[[LTContext], Any]:
        def body(lt: LTContext) -> Any:
            if lt.get(shadow) is None:
                return "behind"
            target = lt.get(obj)
            if target is None:
                if not obj.is_named:
                    return "skip"  # the check pass turns this into an abort
                target = lt.get(pmd_key(obj))
                if target is None:
                    target = Entity(pmd_key(obj))
                    target.set_dt_meta(None, None)
            elif not target.is_dt_flavored:
                return "skip"
            holder = target.write_lock
            if holder == dt:
                return "locked"
            if holder is not None:
                return holder
            target.set_dt_meta(target.version, dt)
            lt.put(target)
            lt.on_commit(lambda: self.log("LOCK", dt, obj))
            return "locked"

        return body

    def check_read_objects(self, rec: DTRecord) -> Any:
        dt = rec.key
        groups: dict[Key, tuple[list, list]] = {}
        for key, version in rec.reads():
            groups.setdefault(key.root, ([], []))[0].append((key, version))
        for obj in rec.put_list_obj:
            if obj is not None:
                groups.setdefault(obj.root, ([], []))[1].append(obj)
        for group in sorted(groups):
            reads, targets = groups[group]
            failure = self.lt(group, self._check_body(dt, reads, targets), "dt:check")
            if failure is not None:
                reason = canonical_json({"aborted": failure})

                def set_reason(r: DTRecord) -> None:
                    r.result = reason

                return self.transition_mode(dt, Mode.LOCKED2, Mode.ABORTING3, set_reason,
                                            label="dt:mode:abort")
        return self.transition_mode(dt, Mode.LOCKED2, Mode.CHECKED3, label="dt:mode:checked")

    def _check_body(self, dt: Key, reads: list, targets: list) -> Callable[[LTContext], Optional[str]]:
        def body(lt: LTContext) -> Optional[str]:
            failure = None
            for key, version in reads:
                ent = lt.get(key)
                carrier = ent if ent is not None else (lt.get(pmd_key(key)) if key.is_named else None)
                if carrier is not None and not carrier.is_dt_flavored:
                    failure = f"{key} is not DT-flavored"
                elif carrier is not None and carrier.write_lock not in (None, dt):
                    failure = f"{key} is locked by {carrier.write_lock}"
                else:
                    stored = carrier.version if carrier is not None else None
                    if stored != version:
                        failure = f"{key} changed from {version} to {stored}"
                if failure:
                    break
            if failure is None:
                for obj in targets:
                    ent = lt.get(obj)
                    if ent is None and obj.is_numeric:
                        failure = f"{obj} does not exist"
                    elif ent is not None and not ent.is_dt_flavored:
                        failure = f"{obj} is not DT-flavored"
                    if failure:
                        break
            event, detail = ("CHECK_FAIL", failure) if failure else ("CHECK_PASS", None)
            lt.on_commit(lambda: self.log(event, dt, group_of(reads, targets), detail))
            return failure

        return body

    def complete_writes(self, rec: DTRecord) -> Any:
        dt = rec.key
        committing = rec.mode == Mode.CHECKED3
        groups: dict[Key, list] = {}
        for obj, shadow in rec.writes():
            groups.setdefault(shadow.root, []).append((obj, shadow))
        for group in sorted(groups):
            body = self._apply_body(dt, groups[group]) if committing else self._release_body(dt, groups[group])
            self.lt(group, body, "dt:apply" if committing else "dt:release")
        if committing:
            return self.transition_mode(dt, Mode.CHECKED3, Mode.DONE4, label="dt:mode:done")
        return self.transition_mode(dt, Mode.ABORTING3, Mode.ABORTED4, label="dt:mode:aborted")

    def _apply_body(self, dt: Key, pairs: list) -> Callable[[LTContext], None]:
        version = version_of(dt)

        def body(lt: LTContext) -> None:
            applied = []
            for obj, shadow in pairs:
                sh = lt.get(shadow)
                if sh is None:
                    continue  # applied by an earlier run of this step
                lt.delete(shadow)
                if obj is None:
                    proto = sh[TARGET]
                    new_id = lt.allocate_ids(proto)[0]
                    ent = Entity(proto.parent.child(proto.kind, new_id), materialize(sh))
                    ent.set_dt_meta(version, None)
                    lt.put(ent)
                    applied.append((ent.key, "create"))
                    continue
                current = lt.get(obj)
                if sh.key.kind == SHADOW_DELETE_KIND:
                    if obj.is_named:
                        marker = Entity(pmd_key(obj))
                        marker.set_dt_meta(version, None)
                        lt.put(marker)
                    if current is not None:
                        lt.delete(obj)
                    applied.append((obj, "delete"))
                    continue
                if current is None:
                    if obj.is_named:
                        lt.delete(pmd_key(obj))
                    op = "create"
                else:
                    op = "update"
                ent = Entity(obj, materialize(sh))
                ent.set_dt_meta(version, None)
                lt.put(ent)
                applied.append((obj, op))
            for key, op in applied:
                lt.on_commit(lambda key=key, op=op: self.log("APPLY", dt, key, op))

        return body

    def _release_body(self, dt: Key, pairs: list) -> Callable[[LTContext], None]:
        def body(lt: LTContext) -> None:
            released = []
            for obj, shadow in pairs:
                if lt.get(shadow) is None:
                    continue
                lt.delete(shadow)
                if obj is None:
                    continue
                if release_lock(lt, obj, dt):
                    released.append(obj)
            for key in released:
                lt.on_commit(lambda key=key: self.log("RELEASE", dt, key))

        return body

    # -- driving DTs to completion -------------------------------------------

    def dispatch(self, dt_key: Key) -> Any:
        behind = 0
        while True:
            rec = self.read_record(dt_key)
            if rec is None:
                return DELETED
            mode = rec.mode
            if mode in TERMINAL or mode in (Mode.NONE, Mode.INIT0):
                return mode
            if mode == Mode.READY1:
                if self.lock_written_objects(rec) is None:
                    behind += 1
                    if behind > 2:
                        raise ProtocolError(f"{dt_key} lost shadows while still in READY1")
            elif mode == Mode.LOCKED2:
                self.check_read_objects(rec)
            else:
                self.complete_writes(rec)

    def roll_forward(self, dt_key: Key) -> Any:
        if self.config.user_queues:
            for ahead in user_queues.pending_ahead(self, dt_key):
                self.log("WAIT_ON", dt_key, None, version_of(ahead))
                self.dispatch(ahead)
        return self.dispatch(dt_key)

    def abort_init(self, dt_key: Key, reason: str, shadows: list = ()) -> Any:
        """INIT0 -> ABORTING3, adopting any shadows we know were written."""
        extra = list(shadows)

        def update(rec: DTRecord) -> None:
            known = set(rec.put_list_shadow)
            for obj, shadow in extra:
                if shadow not in known:
                    rec.put_list_obj.append(obj)
                    rec.put_list_shadow.append(shadow)
            rec.result = canonical_json({"aborted": reason})

        return self.transition_mode(dt_key, Mode.INIT0, Mode.ABORTING3, update, label="dt:mode:abort")

    def handle_soft_timeout(self, ctx: DistributedTransaction) -> None:
        """Abort a DT still running its client function; later modes are left to GC."""
        self.abort_init(ctx.key, "soft timeout", ctx.shadows_written)

    # -- entry point ---------------------------------------------------------

    def distributed_run_in_transaction(self, user: str, fn: Callable, args: Any = (),
                                       fn_name: Optional[str] = None, async_: bool = False,
                                       read_lock_dt: Optional[Key] = None) -> DTRecord:
        desc = client_desc(fn_name or getattr(fn, "__name__", "fn"), args)
        if read_lock_dt is not None:
            ctx = self.activate_read_lock(read_lock_dt, desc)
        else:
            ctx = self.begin_dt(user, desc)
        try:
            return self._run(ctx, fn, args, async_)
        except SoftTimeout:
            self.handle_soft_timeout(ctx)
            raise

    def _run(self, ctx: DistributedTransaction, fn: Callable, args: Any, async_: bool) -> DTRecord:
        value = None
        try:
            value = fn(ctx, *args)
        except AbortRequested:
            pass
        except Exception as exc:  # client failure aborts the DT
            if ctx.abort_reason is None:
                ctx.abort_reason = f"{type(exc).__name__}: {exc}"
        return self.commit(ctx, value, async_)

    def commit(self, ctx: DistributedTransaction, value: Any = None, async_: bool = False) -> DTRecord:
        """End Run and Record for ``ctx`` and drive the DT to a terminal mode."""
        ctx.running = False
        if ctx.abort_reason is not None:
            mode = self.abort_init(ctx.key, ctx.abort_reason)
        else:
            reads, writes = self.flush(ctx)
            result = canonical_json({"value": value})
            mode = self.go_ready(ctx, reads, writes, result)
        if mode == Mode.INIT0:
            raise ProtocolError(f"{ctx.key} still in INIT0 after leaving Run and Record")
        if not async_ and mode != DELETED:
            self.roll_forward(ctx.key)
        rec = self.read_record(ctx.key)
        if rec is None:
            raise DTError(f"{ctx.key} was deleted before its outcome was read")
        return rec

    # -- LT API for applications -----------------------------------------------

    def guarded_lt_write(self, group: Key, body: Callable[["GuardedLT"], Any], label: str = "app:lt") -> Any:
        """Run ``body`` in an LT that may not write DT-flavored state.

        The one exception is deleting a finished (or expired read-lock)
        DT record, which also maintains the owner's completed queue.
        """
        def wrapped(lt: LTContext) -> Any:
            return body(GuardedLT(self, lt))

        return self.store.run_in_lt(group, wrapped, label=label)


def group_of(reads: list, targets: list) -> Optional[Key]:
    keys = [k for k, _ in reads] + list(targets)
    return keys[0].root if keys else None


def release_lock(lt: LTContext, obj: Key, dt: Key) -> bool:
    """Clear ``dt``'s write lock on ``obj`` (or its pure meta-data), if held."""
    target = lt.get(obj)
    if target is None and obj.is_named:
        target = lt.get(pmd_key(obj))
    if target is None or target.write_lock != dt:
        return False
    target.set_dt_meta(target.version, None)
    lt.put(target)
    return True


class GuardedLT:
    def __init__(self, engine: Engine, lt: LTContext):
        self.engine = engine
        self.lt = lt
        self.group = lt.group

    def get(self, key: Key) -> Optional[Entity]:
        return self.lt.get(key)

    def ancestor_query(self, ancestor: Key, kind: Optional[str] = None) -> list[Entity]:
        return self.lt.ancestor_query(ancestor, kind)

    def _guard(self, key: Key) -> None:
        if any(is_reserved(kind) for kind, _ in key.path) or (key.is_named and is_reserved(key.id_or_name)):
            raise FlavorViolation(f"{key} is in the reserved namespace")
        current = self.lt.get(key)
        if current is not None and current.is_dt_flavored:
            raise FlavorViolation(f"{key} is DT-flavored")
        if current is None and key.is_named and self.lt.get(pmd_key(key)) is not None:
            raise FlavorViolation(f"the name {key} belongs to DTs")

    def put(self, entity: Entity) -> None:
        if entity.is_dt_flavored or any(is_reserved(m) for m in entity.meta):
            raise FlavorViolation(f"{entity.key} carries DT meta-data")
        for name in entity.props:
            if is_reserved(name):
                raise FlavorViolation(f"property {name!r} uses a reserved prefix")
        self._guard(entity.key)
        self.lt.put(entity)

    def delete(self, key: Key) -> None:
        if key.kind == TXN_KIND and len(key.path) == 2:
            self._delete_record(key)
            return
        self._guard(key)
        self.lt.delete(key)

    def _delete_record(self, key: Key) -> None:
        ent = self.lt.get(key)
        if ent is None:
            return
        rec = DTRecord.from_entity(ent)
        now = self.engine.rt.now()
        expired = rec.mode == Mode.NONE and (
            not rec.read_lock or (rec.read_lock_timeout or 0) + self.engine.config.read_lock_pad < now)
        if rec.mode not in TERMINAL and not expired:
            raise FlavorViolation(f"{key} is in mode {rec.mode} and may not be deleted")
        self.lt.delete(key)
        if self.engine.config.user_queues:
            user_queues.apply_transition(self.lt, key, rec.mode, DELETED)
        self.lt.on_commit(lambda: self.engine.log_mode(key, rec.mode, DELETED))

    def allocate_ids(self, prototype: Key, count: int = 1) -> range:
        return self.lt.allocate_ids(prototype, count)

    def on_commit(self, callback: Callable[[], None]) -> None:
        self.lt.on_commit(callback)
