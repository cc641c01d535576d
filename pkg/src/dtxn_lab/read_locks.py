"""Best-effort temporary read locks.

A read lock is a DT parked in mode NONE whose get list pins the versions
of some keys.  Writers that notice it wait until it expires.  Nothing
relies on them for correctness: a writer that misses one only causes the
reader's later DT to fail its version check.
"""
from __future__ import annotations

from typing import Any, Iterable, Optional

from .egstore import STRONG, Key
from .schema import TXN_KIND, DTRecord, FlavorViolation, Mode, pmd_key, user_key


def acquire_read_lock(engine: Any, user: str, keys: Iterable[Key], duration: int) -> DTRecord:
    keys = sorted(set(keys))
    if not keys:
        raise ValueError("a read lock needs at least one key")
    if duration < 1:
        raise ValueError("duration must be positive")
    versions = []
    for key in keys:
        ent = engine.store.get(key, STRONG, label="readlock:read")
        if ent is None and key.is_named:
            ent = engine.store.get(pmd_key(key), STRONG, label="readlock:read")
        if ent is not None and not ent.is_dt_flavored:
            raise FlavorViolation(f"{key} is not DT-flavored")
        versions.append(ent.version if ent is not None else None)
    ukey = user_key(user)
    dt_id = engine.store.allocate_ids(Key.incomplete(TXN_KIND, ukey))[0]
    now = engine.rt.now()
    rec = DTRecord(
        ukey.child(TXN_KIND, dt_id), Mode.NONE,
        get_list_obj=keys, get_list_version=versions, modified=now,
        read_lock=True, read_lock_timeout=now + duration,
    )
    return engine._create_record(rec, "readlock:create")


def active_read_locks(engine: Any, key: Key, now: int, exclude: Optional[Key] = None) -> list[DTRecord]:
    pad = engine.config.read_lock_pad

    def holds(ent: Any) -> bool:
        p = ent.props
        return (p.get("mode") == Mode.NONE.value and p.get("read_lock")
                and key in p.get("get_list_obj", [])
                and (p.get("read_lock_timeout") or 0) + pad > now
                and ent.key != exclude)

    found = engine.store.general_query(TXN_KIND, holds, label="readlock:query")
    return [DTRecord.from_entity(e) for e in found]


def writer_respect_read_locks(engine: Any, key: Key, exclude: Optional[Key] = None) -> Optional[int]:
    """Wait out read locks on ``key``; returns the time waited until, if any.

    After the first wait the locks are looked up once more (new ones may
    have appeared), and after that the writer proceeds regardless.
    """
    waited = None
    for _ in range(2):
        now = engine.rt.now()
        locks = active_read_locks(engine, key, now, exclude)
        if not locks:
            break
        waited = min(r.read_lock_timeout for r in locks) + engine.config.read_lock_pad
        engine.rt.sleep_until(waited)
    return waited
