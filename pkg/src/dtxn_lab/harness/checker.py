"""Predicates over (history, initial dump, final dump).

None of these look at engine internals.  The serializability check
replays committed client functions one after another on a fresh,
fault-free store with a deliberately simple model of DT semantics
(no cache machinery, no shadows, no locks) and compares the outcome
with what the concurrent run produced.
"""
from __future__ import annotations

import itertools
import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Optional

from ..egstore import Entity, Key, Store, format_entity, load_entities
from ..history import Event, History, MalformedHistory
from ..schema import (
    DELETED, NEW, PMD_KIND, SHADOW_DELETE_KIND, SHADOW_KIND, TERMINAL, TXN_KIND, USER_KIND,
    DTRecord, is_edge, parse_mode, pmd_key,
)
from .workloads import REGISTRY

BRUTE_FORCE_LIMIT = 4


@dataclass
class Committed:
    dt: str
    fn: str
    args: list
    puts: int


@dataclass
class Verdict:
    ok: bool
    witness: list[str] = field(default_factory=list)
    reason: str = ""
    # None when the permutation oracle did not run
    oracle_agrees: Optional[bool] = None
    satisfying: int = 0

    def __bool__(self) -> bool:
        return self.ok and self.oracle_agrees is not False


# ---------------------------------------------------------------------------
# serializability
# ---------------------------------------------------------------------------


def committed_dts(history: History) -> list[Committed]:
    """Committed DTs in the order they entered LOCKED2 (the witness order)."""
    commits = {}
    for ev in history.of("COMMIT"):
        try:
            detail = json.loads(ev.detail or "")
            desc = detail["desc"]
            commits[ev.dt] = Committed(ev.dt, desc["fn"], desc["args"], detail["puts"])
        except (ValueError, KeyError, TypeError):
            raise MalformedHistory(f"bad COMMIT detail at time {ev.time}") from None
    order = []
    for ev in history.of("ENTER_2LOCKED"):
        if ev.dt in commits and commits[ev.dt] not in order:
            order.append(commits[ev.dt])
    if len(order) != len(commits):
        missing = set(commits) - {c.dt for c in order}
        raise MalformedHistory(f"committed without entering LOCKED2: {sorted(missing)}")
    return order


def logged_reads(history: History) -> dict[str, dict[str, Optional[str]]]:
    reads: dict[str, dict[str, Optional[str]]] = {}
    for ev in history.of("READ"):
        seen = reads.setdefault(ev.dt, {})
        version = None if ev.detail == "none" else ev.detail
        if ev.obj in seen and seen[ev.obj] != version:
            raise MalformedHistory(f"{ev.dt} read two versions of {ev.obj}")
        seen.setdefault(ev.obj, version)
    return reads


class ReplayTxn:
    """Sequential stand-in for a DT handle: read the store, buffer writes."""

    def __init__(self, store: Store, dt: str):
        self.store = store
        self.version = dt
        self.writes: dict[Key, Optional[dict]] = {}
        self.creates: list[Entity] = []
        self.reads: dict[str, Optional[str]] = {}

    def get(self, key: Key, **flags: Any) -> Optional[Entity]:
        if key in self.writes:
            props = self.writes[key]
            return Entity(key, props).copy() if props is not None else None
        ent = self.store.peek(key)
        carrier = ent if ent is not None else (self.store.peek(pmd_key(key)) if key.is_named else None)
        self.reads.setdefault(key.canonical(), carrier.version if carrier is not None else None)
        if ent is None:
            return None
        return Entity(key, ent.copy().props)

    def put(self, entity: Entity) -> None:
        if entity.key.is_complete:
            self.writes[entity.key] = entity.copy().props
        else:
            self.creates.append(entity.copy())

    def delete(self, key: Key) -> None:
        self.writes[key] = None

    def allocate_ids(self, prototype: Key, count: int = 1) -> range:
        return self.store.allocate_ids(prototype, count)

    def apply(self) -> None:
        for key, props in self.writes.items():
            if props is None:
                if key.is_named:
                    self.store.put(_flavored(pmd_key(key), {}, self.version))
                if self.store.peek(key) is not None:
                    self.store.delete(key)
            else:
                if key.is_named and self.store.peek(pmd_key(key)) is not None:
                    self.store.delete(pmd_key(key))
                self.store.put(_flavored(key, props, self.version))
        for ent in self.creates:
            new_id = self.store.allocate_ids(ent.key)[0]
            self.store.put(_flavored(ent.key.parent.child(ent.key.kind, new_id), ent.props, self.version))


def _flavored(key: Key, props: dict, version: str) -> Entity:
    ent = Entity(key, props)
    ent.set_dt_meta(version, None)
    return ent


def normalize(dump: str, initial_keys: set[Key]) -> Counter:
    """Client-visible state: client entities and pure meta-data with a version.

    Generated ids differ between runs, so entities with numeric ids that
    were not present initially are compared without their id.
    """
    out: Counter = Counter()
    for ent in load_entities(dump):
        kinds = {k for k, _ in ent.key.path}
        if kinds & {TXN_KIND, SHADOW_KIND, SHADOW_DELETE_KIND} or ent.key.kind == USER_KIND:
            continue
        if ent.key.kind == PMD_KIND and ent.version is None and ent.write_lock is None:
            continue  # equivalent to absence
        if ent.key.is_numeric and ent.key not in initial_keys:
            ent = Entity(Key(*ent.key.path[:-1], (ent.key.kind, None)), ent.props, ent.meta)
        out[format_entity(ent)] += 1
    return out


def replay(order: list[Committed], initial: str, reads: dict, registry: dict) -> tuple[bool, str, Counter]:
    store = Store()
    store.load(initial)
    initial_keys = {e.key for e in load_entities(initial)}
    for c in order:
        fn = registry.get(c.fn)
        if fn is None:
            return False, f"unknown client function {c.fn!r}", Counter()
        txn = ReplayTxn(store, c.dt)
        try:
            fn(txn, *c.args)
        except Exception as exc:
            return False, f"{c.dt} raised {type(exc).__name__} on replay: {exc}", Counter()
        logged = reads.get(c.dt, {})
        if txn.reads != logged:
            diff = sorted(set(txn.reads.items()) ^ set(logged.items()), key=str)
            return False, f"{c.dt} read mismatch: {diff[:4]}", Counter()
        txn.apply()
    return True, "", normalize(store.dump(), initial_keys)


def check_serializable(history: History, final: str, initial: str,
                       registry: Optional[dict] = None) -> Verdict:
    registry = registry or REGISTRY
    order = committed_dts(history)
    reads = logged_reads(history)
    initial_keys = {e.key for e in load_entities(initial)}
    expected = normalize(final, initial_keys)

    def satisfies(seq: list[Committed]) -> tuple[bool, str]:
        ok, why, state = replay(seq, initial, reads, registry)
        if ok and state != expected:
            diff = sorted((state - expected) + (expected - state))
            return False, f"final state differs: {diff[:4]}"
        return ok, why

    ok, reason = satisfies(order)
    verdict = Verdict(ok, [c.dt for c in order], reason)
    if len(order) <= BRUTE_FORCE_LIMIT:
        good = [p for p in itertools.permutations(order) if satisfies(list(p))[0]]
        verdict.satisfying = len(good)
        in_good = tuple(order) in good
        verdict.oracle_agrees = (in_good == ok) and (not ok or bool(good))
    return verdict


# ---------------------------------------------------------------------------
# history predicates
# ---------------------------------------------------------------------------


def mode_violations(history: History) -> list[str]:
    """Every logged mode change must be a DAG edge continuing the DT's last mode."""
    last: dict[str, Any] = {}
    bad = []
    for ev in history.of("MODE"):
        try:
            old_s, new_s = (ev.detail or "").split("->")
            old, new = parse_mode(old_s), parse_mode(new_s)
        except ValueError:
            bad.append(f"{ev.time}: unparsable mode change {ev.detail!r}")
            continue
        if not is_edge(old, new):
            bad.append(f"{ev.time}: {ev.dt} {old}->{new} is not an edge")
        prev = last.get(ev.dt)
        if prev is not None and prev != old:
            bad.append(f"{ev.time}: {ev.dt} left {old} but was in {prev}")
        if prev is None and old != NEW:
            bad.append(f"{ev.time}: {ev.dt} changes mode before being created")
        last[ev.dt] = new
    return bad


def unfinished_dts(history: History) -> list[str]:
    """DTs whose last logged mode is neither terminal nor deleted."""
    last: dict[str, Any] = {}
    for ev in history.of("MODE"):
        last[ev.dt] = parse_mode((ev.detail or "->").split("->")[1])
    return sorted(dt for dt, m in last.items() if m not in TERMINAL and m != DELETED)


def _is_finished(ev: Event) -> bool:
    if ev.event in ("COMMIT", "ABORT"):
        return True
    return ev.event == "MODE" and (ev.detail or "").endswith(("DONE4", "ABORTED4", "DELETED"))


def wait_cycle(history: History) -> Optional[tuple[int, list[str]]]:
    """First moment the wait-for graph has a directed cycle, as (time, cycle)."""
    # edges are owned by the worker doing the waiting
    edges: dict[tuple[str, str], str] = {}
    for ev in history:
        if ev.event == "WAIT_ON":
            edges[(ev.worker, ev.dt)] = ev.detail or ""
            cycle = _find_cycle(edges)
            if cycle:
                return ev.time, cycle
            continue
        if ev.event == "GC":
            continue
        if (ev.worker, ev.dt) in edges:
            del edges[(ev.worker, ev.dt)]
        if _is_finished(ev):
            for k in [k for k, v in edges.items() if v == ev.dt]:
                del edges[k]
    return None


def _find_cycle(edges: dict[tuple[str, str], str]) -> list[str]:
    graph: dict[str, set[str]] = {}
    for (_, waiter), blocker in edges.items():
        graph.setdefault(waiter, set()).add(blocker)
    state: dict[str, int] = {}
    stack: list[str] = []

    def visit(n: str) -> list[str]:
        state[n] = 1
        stack.append(n)
        for m in sorted(graph.get(n, ())):
            if state.get(m) == 1:
                return stack[stack.index(m):] + [m]
            if m not in state:
                found = visit(m)
                if found:
                    return found
        stack.pop()
        state[n] = 2
        return []

    for node in sorted(graph):
        if node not in state:
            found = visit(node)
            if found:
                return found
    return []


def _user_of(dt: str) -> str:
    return dt.split("/")[1]


def queue_order_violations(history: History) -> list[str]:
    """Per user, committed DTs must enter LOCKED2 in READY1-entry order."""
    ready: dict[str, list[str]] = {}
    for ev in history.of("MODE"):
        if (ev.detail or "").endswith("->READY1"):
            ready.setdefault(_user_of(ev.dt), []).append(ev.dt)
    committed = {c.dt for c in committed_dts(history)}
    locked: dict[str, list[str]] = {}
    for ev in history.of("ENTER_2LOCKED"):
        if ev.dt in committed:
            locked.setdefault(_user_of(ev.dt), []).append(ev.dt)
    bad = []
    for user, seq in locked.items():
        issued = [d for d in ready.get(user, []) if d in committed]
        if seq != issued:
            bad.append(f"{user}: witness {seq} != issue order {issued}")
    return bad


def lock_outside_head(history: History) -> list[str]:
    """LOCK events by a DT while an earlier DT of the same user is unfinished."""
    ready_order: dict[str, list[str]] = {}
    finished: set[str] = set()
    bad = []
    for ev in history:
        if ev.event == "MODE" and (ev.detail or "").endswith("->READY1"):
            ready_order.setdefault(_user_of(ev.dt), []).append(ev.dt)
        elif _is_finished(ev):
            finished.add(ev.dt)
        elif ev.event == "LOCK":
            queue = ready_order.get(_user_of(ev.dt), [])
            if ev.dt in queue:
                ahead = [d for d in queue[: queue.index(ev.dt)] if d not in finished]
                if ahead:
                    bad.append(f"{ev.time}: {ev.dt} locked {ev.obj} behind {ahead}")
    return bad


def atomicity_violations(history: History) -> list[str]:
    applies = Counter(ev.dt for ev in history.of("APPLY"))
    bad = []
    for c in committed_dts(history):
        if applies[c.dt] != c.puts:
            bad.append(f"{c.dt} applied {applies[c.dt]} of {c.puts} writes")
        if c.puts == 0 and any(ev.dt == c.dt for ev in history.of("LOCK")):
            bad.append(f"read-only {c.dt} took a write lock")
    for ev in history.of("ABORT"):
        if applies[ev.dt]:
            bad.append(f"aborted {ev.dt} applied {applies[ev.dt]} writes")
    return bad


def residue_in_dump(dump: str) -> list[str]:
    problems = []
    for ent in load_entities(dump):
        kind = ent.key.kind
        if kind in (SHADOW_KIND, SHADOW_DELETE_KIND):
            problems.append(f"shadow {ent.key}")
        elif kind == TXN_KIND and DTRecord.from_entity(ent).mode not in TERMINAL:
            problems.append(f"unfinished DT {ent.key}")
        if ent.write_lock is not None:
            problems.append(f"lock on {ent.key}")
    return problems


def conserved_sum(dump: str, kind: str, field_name: str) -> int:
    return sum(e.props.get(field_name, 0) for e in load_entities(dump) if e.key.kind == kind)


@dataclass
class CheckReport:
    results: dict[str, tuple[bool, str]] = field(default_factory=dict)

    def add(self, name: str, ok: bool, detail: str = "") -> None:
        self.results[name] = (bool(ok), detail)

    @property
    def ok(self) -> bool:
        return all(ok for ok, _ in self.results.values())

    def lines(self) -> list[str]:
        return [f"{'PASS' if ok else 'FAIL'} {name}{': ' + d if d and not ok else ''}"
                for name, (ok, d) in self.results.items()]


def check_all(history: History, initial: str, final: str, registry: Optional[dict] = None,
              conserved: Optional[tuple[str, str]] = None, queues: bool = False) -> CheckReport:
    """Run every history/dump predicate; raises MalformedHistory on unusable input."""
    rep = CheckReport()
    verdict = check_serializable(history, final, initial, registry)
    detail = verdict.reason
    if verdict.oracle_agrees is False:
        detail = f"permutation oracle disagrees ({verdict.satisfying} satisfying orders)"
    rep.add("serializable", bool(verdict), detail)
    bad = mode_violations(history)
    rep.add("mode-dag", not bad, "; ".join(bad[:3]))
    cyc = wait_cycle(history)
    rep.add("wait-for-acyclic", cyc is None, f"cycle at {cyc[0]}: {cyc[1]}" if cyc else "")
    bad = atomicity_violations(history)
    rep.add("atomicity", not bad, "; ".join(bad[:3]))
    bad = residue_in_dump(final) + [f"unfinished {d}" for d in unfinished_dts(history)]
    rep.add("no-residue", not bad, "; ".join(bad[:3]))
    if conserved is not None:
        before, after = conserved_sum(initial, *conserved), conserved_sum(final, *conserved)
        rep.add("conservation", before == after, f"{before} -> {after}")
    if queues:
        bad = queue_order_violations(history)
        rep.add("queue-order", not bad, "; ".join(bad[:3]))
        bad = lock_outside_head(history)
        rep.add("locks-at-head", not bad, "; ".join(bad[:3]))
    return rep
