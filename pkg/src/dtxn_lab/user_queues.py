"""Per-user pending and completed queues.

Queue state lives on the user's DT__User root entity and is only ever
changed inside the LT that changes the mode of one of the user's DTs,
so queue contents and DT modes can never disagree.
"""
from __future__ import annotations

from typing import Any, Optional

from .egstore import STRONG, Entity, Key, LTContext
from .schema import (
    DELETED, Mode, NotHead, NotTerminal, TERMINAL, DTRecord, user_key,
)


def load_user(lt: LTContext, ukey: Key, sync_mode: bool = False) -> Entity:
    ent = lt.get(ukey)
    if ent is None:
        ent = Entity(ukey, {"pending": [], "completed": [], "sync_mode": sync_mode})
    return ent


def occupancy(user: Entity) -> int:
    return len(user.get("pending", [])) + len(user.get("completed", []))


def apply_transition(lt: LTContext, dt_key: Key, old: Any, new: Any) -> None:
    """Keep the owning user's queues in step with one mode change."""
    user = load_user(lt, dt_key.root)
    pending = list(user.get("pending", []))
    completed = list(user.get("completed", []))
    if new == Mode.READY1:
        if dt_key not in pending:
            pending.append(dt_key)
    elif new in TERMINAL:
        if dt_key in pending:
            pending.remove(dt_key)
        if dt_key not in completed:
            completed.append(dt_key)
    elif new == DELETED:
        if dt_key in completed:
            completed.remove(dt_key)
    else:
        return
    user["pending"] = pending
    user["completed"] = completed
    lt.put(user)


def pending_ahead(engine: Any, dt_key: Key) -> list[Key]:
    user = engine.store.get(dt_key.root, STRONG, label="queues:pending:read")
    if user is None:
        return []
    pending = user.get("pending", [])
    if dt_key not in pending:
        return []
    return list(pending[: pending.index(dt_key)])


def acknowledge(engine: Any, user: str, dt_key: Key) -> Optional[str]:
    """Delete a terminal DT at the head of the completed queue.

    Returns the DT's result.  A replayed acknowledgment of an already
    deleted DT returns None and changes nothing.
    """
    ukey = user_key(user)
    if dt_key.root != ukey:
        raise NotHead(f"{dt_key} does not belong to user {user}")

    def body(lt: LTContext) -> Optional[str]:
        ent = lt.get(dt_key)
        if ent is None:
            return None
        rec = DTRecord.from_entity(ent)
        if rec.mode not in TERMINAL:
            raise NotTerminal(f"{dt_key} is in mode {rec.mode}")
        if engine.config.user_queues:
            u = load_user(lt, ukey)
            completed = u.get("completed", [])
            if not completed or completed[0] != dt_key:
                raise NotHead(f"{dt_key} is not at the head of the completed queue")
        lt.delete(dt_key)
        if engine.config.user_queues:
            apply_transition(lt, dt_key, rec.mode, DELETED)
        lt.on_commit(lambda: engine.log_mode(dt_key, rec.mode, DELETED))
        return rec.result

    return engine.lt(ukey, body, "queues:ack")


def settle_user(engine: Any, user: str) -> list[tuple[Key, Optional[str]]]:
    """Drive the user's pending DTs to completion and acknowledge every terminal one."""
    ukey = user_key(user)
    out = []
    u = engine.store.get(ukey, STRONG, label="queues:settle:read")
    if u is None:
        return out
    if engine.config.user_queues:
        for dt_key in list(u.get("pending", [])):
            engine.roll_forward(dt_key)
        u = engine.store.get(ukey, STRONG, label="queues:settle:read")
        for dt_key in list(u.get("completed", [])):
            out.append((dt_key, acknowledge(engine, user, dt_key)))
    else:
        for rec in engine.user_records(ukey):
            if rec.mode in TERMINAL:
                out.append((rec.key, acknowledge(engine, user, rec.key)))
    return out
