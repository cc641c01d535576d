"""Client functions and the per-worker operation streams that drive them.

Client functions only touch data through the DT handle and take
JSON-friendly arguments (keys as canonical strings), so a committed DT
can be replayed from its logged description alone.
"""
from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Any, Callable

from ..egstore import Entity, Key

INITIAL_BALANCE = 100


def create_entity(ctx: Any, key: str, props: dict) -> None:
    ctx.put(Entity(Key.parse(key), dict(props)))


def transfer(ctx: Any, src: str, dst: str, amount: int) -> list:
    """Move up to ``amount``; never overdraws."""
    a = ctx.get(Key.parse(src))
    b = ctx.get(Key.parse(dst))
    amount = min(amount, a["balance"])
    a["balance"] -= amount
    b["balance"] += amount
    ctx.put(a)
    ctx.put(b)
    return [a["balance"], b["balance"]]


def audit(ctx: Any, keys: list) -> int:
    return sum(ctx.get(Key.parse(k))["balance"] for k in keys)


def read_write(ctx: Any, reads: list, writes: list, salt: int) -> int:
    """Read some keys, then put/delete/append under others.

    writes holds [key, op] pairs with op one of put, delete, append.
    Written values depend on what was read so replays expose stale reads.
    """
    total = salt
    for k in reads:
        ent = ctx.get(Key.parse(k))
        if ent is not None:
            total += ent.get("v", 0)
    for k, op in writes:
        key = Key.parse(k)
        if op == "delete":
            ctx.delete(key)
        elif op == "append":
            ctx.put(Entity(Key.incomplete("Note", key), {"v": total, "tags": []}))
        else:
            cur = ctx.get(key)
            hist = list(cur.get("hist", [])) if cur is not None else []
            ctx.put(Entity(key, {"v": total, "hist": (hist + [salt])[-3:]}))
    return total


def churn(ctx: Any, key: str, action: str, salt: int) -> str:
    """Create, delete or bump one client-named key."""
    k = Key.parse(key)
    cur = ctx.get(k)
    if action == "delete":
        if cur is not None:
            ctx.delete(k)
        return "deleted" if cur is not None else "absent"
    if cur is None:
        ctx.put(Entity(k, {"v": salt, "n": 1}))
        return "created"
    cur["v"] = cur["v"] + salt
    cur["n"] = cur["n"] + 1
    ctx.put(cur)
    return "bumped"


def write_all(ctx: Any, keys: list, salt: int) -> int:
    """Increment every key in the given (client) order."""
    total = 0
    for k in keys:
        ent = ctx.get(Key.parse(k))
        ent["v"] += salt
        total += ent["v"]
        ctx.put(ent)
    return total


REGISTRY: dict[str, Callable] = {
    "create_entity": create_entity,
    "transfer": transfer,
    "audit": audit,
    "read_write": read_write,
    "churn": churn,
    "write_all": write_all,
}


@dataclass
class Op:
    fn: str
    args: list
    # keys a read lock would cover
    touches: list


@dataclass
class Workload:
    setup: list[Op]
    per_worker: list[list[Op]]
    # (kind, field) whose sum must be conserved, if any
    conserved: tuple | None = None


def account_key(i: int) -> str:
    return f"/Account:a{i:02d}"


def bank_workload(rng: random.Random, workers: int, ops: int, accounts: int,
                  audit_every: int = 0) -> Workload:
    keys = [account_key(i) for i in range(accounts)]
    setup = [Op("create_entity", [k, {"balance": INITIAL_BALANCE}], [k]) for k in keys]
    streams: list[list[Op]] = [[] for _ in range(workers)]
    for n in range(ops):
        if audit_every and n % audit_every == audit_every - 1:
            picked = sorted(rng.sample(keys, min(3, len(keys))))
            op = Op("audit", [picked], picked)
        else:
            src, dst = rng.sample(keys, 2)
            op = Op("transfer", [src, dst, rng.randint(1, 60)], [src, dst])
        streams[n % workers].append(op)
    return Workload(setup, streams, ("Account", "balance"))


def readwrite_workload(rng: random.Random, workers: int, ops: int, keys: int) -> Workload:
    names = [f"/Item:k{i:02d}" for i in range(keys)]
    setup = [Op("create_entity", [k, {"v": i, "hist": []}], [k]) for i, k in enumerate(names)]
    streams: list[list[Op]] = [[] for _ in range(workers)]
    for n in range(ops):
        reads = sorted(rng.sample(names, rng.randint(0, min(3, keys))))
        writes = []
        for k in rng.sample(names, rng.randint(1, min(2, keys))):
            writes.append([k, rng.choices(["put", "delete", "append"], [6, 1, 2])[0]])
        touched = sorted({*reads, *(k for k, _ in writes)})
        streams[n % workers].append(Op("read_write", [reads, writes, rng.randint(1, 9)], touched))
    return Workload(setup, streams)


def churn_workload(rng: random.Random, workers: int, ops: int, keys: int) -> Workload:
    names = [f"/Name:n{i:02d}" for i in range(keys)]
    streams: list[list[Op]] = [[] for _ in range(workers)]
    for n in range(ops):
        k = rng.choice(names)
        action = rng.choice(["create", "delete", "bump"])
        streams[n % workers].append(Op("churn", [k, action, rng.randint(1, 9)], [k]))
    return Workload([], streams)


def contended_workload(workers: int, keys: int) -> Workload:
    """Every worker increments the same keys, each in a different rotation."""
    names = [f"/Item:c{i}" for i in range(keys)]
    setup = [Op("create_entity", [k, {"v": 0}], [k]) for k in names]
    streams = []
    for w in range(workers):
        order = names[w % keys:] + names[: w % keys]
        if w % 2:
            order = order[::-1]
        streams.append([Op("write_all", [order, w + 1], sorted(order))])
    return Workload(setup, streams)


def build_workload(name: str, rng: random.Random, workers: int, ops: int, size: int) -> Workload:
    if name == "bank":
        return bank_workload(rng, workers, ops, size)
    if name == "random-readwrite":
        return readwrite_workload(rng, workers, ops, size)
    if name == "named-key-churn":
        return churn_workload(rng, workers, ops, size)
    if name == "contended":
        return contended_workload(workers, size)
    raise ValueError(f"unknown workload {name!r}")
