"""Simulated entity-group datastore.

The store offers serializable local transactions (LTs) confined to one
entity group, object-consistent strong and eventual reads, submarine
writes, stale query indices and id allocation.  Every group keeps its
full list of committed snapshots so stale reads always return some
historical whole-entity state.
"""
from __future__ import annotations

import json
import random
import threading
from dataclasses import dataclass, field
from functools import total_ordering
from typing import Any, Callable, Iterable, Iterator, Optional

RESERVED_PREFIXES = ("DT__", "dt__")
VERSION_FIELD = "dt__version"
LOCK_FIELD = "dt__write_lock"

STRONG = "strong"
EVENTUAL = "eventual"


class StoreError(Exception):
    pass


class CrossGroupAccess(StoreError):
    pass


class TransientFailure(StoreError):
    """The operation may or may not have committed."""


class QueryInsideLT(StoreError):
    pass


class InvalidKey(ValueError):
    pass


# ---------------------------------------------------------------------------
# Keys
# ---------------------------------------------------------------------------

_BAD_CHARS = set("/:\t\n\r ")


def _check_kind(kind: str) -> None:
    if not isinstance(kind, str) or not kind or _BAD_CHARS & set(kind):
        raise InvalidKey(f"bad kind {kind!r}")


def _check_id(id_or_name: Any) -> None:
    if isinstance(id_or_name, bool):
        raise InvalidKey("boolean ids are not allowed")
    if isinstance(id_or_name, int):
        if id_or_name < 1:
            raise InvalidKey(f"numeric ids start at 1, got {id_or_name}")
        return
    if not isinstance(id_or_name, str) or not id_or_name:
        raise InvalidKey(f"bad id or name {id_or_name!r}")
    if _BAD_CHARS & set(id_or_name):
        raise InvalidKey(f"name {id_or_name!r} contains a separator")
    if id_or_name.isdigit():
        # canonical strings must round-trip; all-digit names would read back as ids
        raise InvalidKey(f"name {id_or_name!r} is all digits")
    if len(id_or_name) >= 4 and id_or_name.startswith("__") and id_or_name.endswith("__"):
        raise InvalidKey(f"name {id_or_name!r} both starts and ends with '__'")


def _element_order(elem: tuple[str, Any]) -> tuple:
    kind, ident = elem
    if ident is None:
        return (kind.encode(), 2, b"")
    if isinstance(ident, int):
        return (kind.encode(), 0, ident)
    return (kind.encode(), 1, ident.encode())


@total_ordering
class Key:
    """Hierarchical key; the first path element names the entity group.

    A key whose last element has id ``None`` is *incomplete*: it names a
    kind and parent for an entity whose numeric id is not yet allocated.
    """

    __slots__ = ("path", "_order", "_hash")

    def __init__(self, *path: tuple[str, Any]):
        if not path:
            raise InvalidKey("empty key path")
        for i, (kind, ident) in enumerate(path):
            _check_kind(kind)
            if ident is None:
                if i != len(path) - 1:
                    raise InvalidKey("only the last element may be incomplete")
            else:
                _check_id(ident)
        self.path: tuple[tuple[str, Any], ...] = tuple((k, i) for k, i in path)
        self._order = tuple(_element_order(e) for e in self.path)
        self._hash = hash(self.path)

    @classmethod
    def of(cls, kind: str, ident: Any, parent: Optional["Key"] = None) -> "Key":
        prefix = parent.path if parent is not None else ()
        return cls(*prefix, (kind, ident))

    @classmethod
    def incomplete(cls, kind: str, parent: Optional["Key"] = None) -> "Key":
        return cls.of(kind, None, parent)

    def child(self, kind: str, ident: Any) -> "Key":
        return Key(*self.path, (kind, ident))

    @property
    def kind(self) -> str:
        return self.path[-1][0]

    @property
    def id_or_name(self) -> Any:
        return self.path[-1][1]

    @property
    def parent(self) -> Optional["Key"]:
        return Key(*self.path[:-1]) if len(self.path) > 1 else None

    @property
    def root(self) -> "Key":
        return self if len(self.path) == 1 else Key(self.path[0])

    @property
    def is_complete(self) -> bool:
        return self.path[-1][1] is not None

    @property
    def is_named(self) -> bool:
        return isinstance(self.path[-1][1], str)

    @property
    def is_numeric(self) -> bool:
        return isinstance(self.path[-1][1], int)

    def is_ancestor_or_self(self, other: "Key") -> bool:
        return other.path[: len(self.path)] == self.path

    def canonical(self) -> str:
        return "".join(
            f"/{kind}:{'' if ident is None else ident}" for kind, ident in self.path
        )

    @classmethod
    def parse(cls, text: str) -> "Key":
        if not text.startswith("/"):
            raise InvalidKey(f"not a canonical key: {text!r}")
        path = []
        for part in text[1:].split("/"):
            kind, sep, ident = part.partition(":")
            if not sep:
                raise InvalidKey(f"not a canonical key: {text!r}")
            if ident == "":
                path.append((kind, None))
            elif ident.isdigit():
                path.append((kind, int(ident)))
            else:
                path.append((kind, ident))
        return cls(*path)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Key) and self.path == other.path

    def __lt__(self, other: "Key") -> bool:
        if not isinstance(other, Key):
            return NotImplemented
        return self._order < other._order

    def __hash__(self) -> int:
        return self._hash

    def __repr__(self) -> str:
        return f"Key({self.canonical()!r})"

    __str__ = canonical


def is_reserved(name: str) -> bool:
    return name.startswith(RESERVED_PREFIXES)


# ---------------------------------------------------------------------------
# Entities
# ---------------------------------------------------------------------------


def _copy_value(value: Any) -> Any:
    return list(value) if isinstance(value, list) else value


@dataclass
class Entity:
    key: Key
    props: dict[str, Any] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def is_dt_flavored(self) -> bool:
        return VERSION_FIELD in self.meta

    @property
    def version(self) -> Optional[str]:
        return self.meta.get(VERSION_FIELD)

    @property
    def write_lock(self) -> Optional[Key]:
        return self.meta.get(LOCK_FIELD)

    def set_dt_meta(self, version: Optional[str], write_lock: Optional[Key]) -> None:
        self.meta[VERSION_FIELD] = version
        self.meta[LOCK_FIELD] = write_lock

    def copy(self) -> "Entity":
        return Entity(
            self.key,
            {k: _copy_value(v) for k, v in self.props.items()},
            dict(self.meta),
        )

    def __getitem__(self, name: str) -> Any:
        return self.props[name]

    def __setitem__(self, name: str, value: Any) -> None:
        self.props[name] = value

    def get(self, name: str, default: Any = None) -> Any:
        return self.props.get(name, default)


# ---------------------------------------------------------------------------
# Canonical text encoding (dumps and history details)
# ---------------------------------------------------------------------------


def _encode(value: Any) -> Any:
    if isinstance(value, Key):
        return {"$key": value.canonical()}
    if isinstance(value, list):
        return [_encode(v) for v in value]
    if isinstance(value, dict):
        return {k: _encode(v) for k, v in value.items()}
    return value


def _decode(value: Any) -> Any:
    if isinstance(value, dict):
        if set(value) == {"$key"}:
            return Key.parse(value["$key"])
        return {k: _decode(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_decode(v) for v in value]
    return value


def canonical_json(value: Any) -> str:
    return json.dumps(_encode(value), sort_keys=True, separators=(",", ":"))


def parse_canonical_json(text: str) -> Any:
    return _decode(json.loads(text))


def format_entity(entity: Entity) -> str:
    if not entity.is_dt_flavored:
        version = "-"
    else:
        version = entity.version if entity.version is not None else "none"
    lock = entity.write_lock.canonical() if entity.write_lock is not None else "-"
    return "\t".join((entity.key.canonical(), version, lock, canonical_json(entity.props)))


def parse_entity(line: str) -> Entity:
    key_text, version, lock, props = line.rstrip("\n").split("\t", 3)
    entity = Entity(Key.parse(key_text), parse_canonical_json(props))
    if version != "-":
        entity.set_dt_meta(
            None if version == "none" else version,
            None if lock == "-" else Key.parse(lock),
        )
    elif lock != "-":
        raise ValueError(f"write lock without version field: {line!r}")
    return entity


def dump_entities(entities: Iterable[Entity]) -> str:
    return "".join(format_entity(e) + "\n" for e in sorted(entities, key=lambda e: e.key))


def load_entities(text: str) -> list[Entity]:
    return [parse_entity(line) for line in text.splitlines() if line.strip()]


# ---------------------------------------------------------------------------
# Store
# ---------------------------------------------------------------------------


@dataclass
class StoreConfig:
    p_submarine: float = 0.0
    p_stale_eventual: float = 0.0
    p_stale_index: float = 0.0
    lt_retry_limit: int = 3
    rng_seed: int = 0
    # how many distinct earlier states of an entity a stale read may fall back to
    stale_depth: int = 3

    def __post_init__(self) -> None:
        for name in ("p_submarine", "p_stale_eventual", "p_stale_index"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        if self.lt_retry_limit < 1:
            raise ValueError("lt_retry_limit must be >= 1")
        if self.stale_depth < 1:
            raise ValueError("stale_depth must be >= 1")


class _NullRuntime:
    def point(self, label: str) -> None:
        pass


class _Group:
    __slots__ = ("version", "entities", "snapshots", "log")

    def __init__(self) -> None:
        self.version = 0
        self.entities: dict[Key, Entity] = {}
        # snapshots[i] is the group state after its i-th committed LT
        self.snapshots: list[dict[Key, Entity]] = [self.entities]
        self.log: list[tuple[int, dict[Key, Optional[Entity]]]] = []


class LTContext:
    """Handle passed to the body of a local transaction."""

    def __init__(self, store: "Store", group: Key):
        self.store = store
        self.group = group.root
        self.read_set: dict[Key, None] = {}
        self.write_set: dict[Key, Optional[Entity]] = {}
        self.active = True
        self._on_commit: list[Callable[[], None]] = []

    def _check(self, key: Key) -> None:
        if not self.active:
            raise StoreError("LT is no longer active")
        if not key.is_complete:
            raise StoreError(f"incomplete key {key}")
        if key.root != self.group:
            raise CrossGroupAccess(f"{key} is outside entity group {self.group}")

    def get(self, key: Key) -> Optional[Entity]:
        self._check(key)
        self.read_set[key] = None
        if key in self.write_set:
            ent = self.write_set[key]
        else:
            ent = self.store._group(self.group).entities.get(key)
        return ent.copy() if ent is not None else None

    def put(self, entity: Entity) -> None:
        self._check(entity.key)
        self.write_set[entity.key] = entity.copy()

    def delete(self, key: Key) -> None:
        self._check(key)
        self.write_set[key] = None

    def ancestor_query(self, ancestor: Key, kind: Optional[str] = None) -> list[Entity]:
        self._check(ancestor)
        current = dict(self.store._group(self.group).entities)
        for key, ent in self.write_set.items():
            if ent is None:
                current.pop(key, None)
            else:
                current[key] = ent
        return [
            ent.copy()
            for key, ent in sorted(current.items())
            if ancestor.is_ancestor_or_self(key) and (kind is None or key.kind == kind)
        ]

    def allocate_ids(self, prototype: Key, count: int = 1) -> range:
        return self.store.allocate_ids(prototype, count)

    def on_commit(self, callback: Callable[[], None]) -> None:
        """Run ``callback`` when (and only when) this LT commits."""
        self._on_commit.append(callback)


class Store:
    def __init__(self, config: Optional[StoreConfig] = None, runtime: Any = None):
        self.config = config or StoreConfig()
        self.runtime = runtime or _NullRuntime()
        self.rng = random.Random(self.config.rng_seed)
        self._groups: dict[Key, _Group] = {}
        self._by_kind: dict[str, dict[Key, None]] = {}
        self._id_counters: dict[tuple[Optional[Key], str], int] = {}
        self._lock = threading.RLock()
        self._in_lt = threading.local()

    # -- internals -----------------------------------------------------------

    def _group(self, root: Key) -> _Group:
        g = self._groups.get(root)
        if g is None:
            g = self._groups[root] = _Group()
        return g

    def _draw(self, p: float) -> bool:
        return p > 0.0 and self.rng.random() < p

    def _commit(self, group: Key, writes: dict[Key, Optional[Entity]]) -> None:
        g = self._group(group)
        if not writes:
            return
        entities = dict(g.entities)
        for key, ent in writes.items():
            if ent is None:
                if entities.pop(key, None) is not None:
                    self._by_kind.get(key.kind, {}).pop(key, None)
            else:
                entities[key] = ent
                self._by_kind.setdefault(key.kind, {})[key] = None
        g.version += 1
        g.entities = entities
        g.snapshots.append(entities)
        g.log.append((g.version, dict(writes)))

    def _inside_lt(self) -> bool:
        return getattr(self._in_lt, "depth", 0) > 0

    # -- public API ----------------------------------------------------------

    def allocate_ids(self, prototype: Key, count: int = 1) -> range:
        if count < 1:
            raise ValueError("count must be >= 1")
        parent = prototype.parent
        scope = (parent.root if parent is not None else None, prototype.kind)
        with self._lock:
            start = self._id_counters.get(scope, 0) + 1
            self._id_counters[scope] = start + count - 1
        return range(start, start + count)

    def run_in_lt(self, group: Key, body: Callable[[LTContext], Any], label: str = "egstore:lt") -> Any:
        """Run ``body`` as one serializable LT on ``group``.

        Raises TransientFailure when the LT is reported failed; with
        probability ``p_submarine`` that happens even though it committed.
        """
        self.runtime.point(label + ":pre")
        with self._lock:
            ctx = LTContext(self, group)
            self._in_lt.depth = getattr(self._in_lt, "depth", 0) + 1
            try:
                result = body(ctx)
            finally:
                ctx.active = False
                self._in_lt.depth -= 1
            self._commit(ctx.group, ctx.write_set)
            for cb in ctx._on_commit:
                cb()
            submarine = self._draw(self.config.p_submarine)
        self.runtime.point(label + ":post")
        if submarine:
            raise TransientFailure(f"LT on {ctx.group} reported failure (committed)")
        return result

    def get(self, key: Key, mode: str = STRONG, label: str = "egstore:get") -> Optional[Entity]:
        if mode not in (STRONG, EVENTUAL):
            raise ValueError(f"unknown read mode {mode!r}")
        self.runtime.point(label)
        with self._lock:
            g = self._groups.get(key.root)
            if g is None:
                return None
            ent = g.entities.get(key)
            if mode == EVENTUAL and self._draw(self.config.p_stale_eventual):
                ent = self._stale_state(g, key, ent)
            return ent.copy() if ent is not None else None

    def _stale_state(self, g: _Group, key: Key, current: Optional[Entity]) -> Optional[Entity]:
        earlier: list[Optional[Entity]] = []
        last = current
        for snap in reversed(g.snapshots):
            ent = snap.get(key)
            if ent is not last:
                earlier.append(ent)
                last = ent
                if len(earlier) >= self.config.stale_depth:
                    break
        if not earlier:
            return current
        return self.rng.choice(earlier)

    def put(self, entity: Entity, label: str = "egstore:put") -> None:
        def body(lt: LTContext) -> None:
            lt.put(entity)

        self.run_in_lt(entity.key.root, body, label=label)

    def delete(self, key: Key, label: str = "egstore:delete") -> None:
        def body(lt: LTContext) -> None:
            lt.delete(key)

        self.run_in_lt(key.root, body, label=label)

    def ancestor_query(
        self,
        ancestor: Key,
        inside: Optional[LTContext] = None,
        kind: Optional[str] = None,
        label: str = "egstore:ancestor_query",
    ) -> list[Entity]:
        if inside is not None:
            if ancestor.root != inside.group:
                raise CrossGroupAccess(f"{ancestor} is outside entity group {inside.group}")
            return inside.ancestor_query(ancestor, kind)
        self.runtime.point(label)
        with self._lock:
            g = self._groups.get(ancestor.root)
            if g is None:
                return []
            return [
                ent.copy()
                for key, ent in sorted(g.entities.items())
                if ancestor.is_ancestor_or_self(key)
                and (kind is None or key.kind == kind)
                and not self._draw(self.config.p_stale_index)
            ]

    def general_query(
        self,
        kind: str,
        predicate: Optional[Callable[[Entity], bool]] = None,
        label: str = "egstore:general_query",
    ) -> list[Entity]:
        """Scan all entities of ``kind``; each match may be dropped (stale index)."""
        if self._inside_lt():
            raise QueryInsideLT("general queries cannot run inside a local transaction")
        self.runtime.point(label)
        with self._lock:
            out = []
            for key in sorted(self._by_kind.get(kind, ())):
                ent = self._groups[key.root].entities[key]
                if predicate is not None and not predicate(ent):
                    continue
                if self._draw(self.config.p_stale_index):
                    continue
                out.append(ent.copy())
            return out

    # -- inspection ------------------------------------------------------------

    def entities(self) -> Iterator[Entity]:
        """All current entities, in key order (no faults, no instrumentation)."""
        with self._lock:
            items = [e for g in self._groups.values() for e in g.entities.values()]
        for ent in sorted(items, key=lambda e: e.key):
            yield ent.copy()

    def peek(self, key: Key) -> Optional[Entity]:
        g = self._groups.get(key.root)
        ent = g.entities.get(key) if g is not None else None
        return ent.copy() if ent is not None else None

    def group_version(self, root: Key) -> int:
        g = self._groups.get(root.root)
        return g.version if g is not None else 0

    def group_log(self, root: Key) -> list[tuple[int, dict[Key, Optional[Entity]]]]:
        g = self._groups.get(root.root)
        return list(g.log) if g is not None else []

    def groups(self) -> list[Key]:
        return sorted(self._groups)

    def group_snapshots(self, root: Key) -> list[dict[Key, Entity]]:
        g = self._groups.get(root.root)
        return list(g.snapshots) if g is not None else [{}]

    def dump(self) -> str:
        return dump_entities(self.entities())

    def load(self, text: str) -> None:
        """Install entities from a dump, one LT per entity group, no faults."""
        by_group: dict[Key, dict[Key, Optional[Entity]]] = {}
        for ent in load_entities(text):
            by_group.setdefault(ent.key.root, {})[ent.key] = ent
        with self._lock:
            for root, writes in by_group.items():
                self._commit(root, writes)
                for key in writes:
                    parent = key.parent
                    if key.is_numeric:
                        scope = (parent.root if parent is not None else None, key.kind)
                        self._id_counters[scope] = max(self._id_counters.get(scope, 0), key.id_or_name)
