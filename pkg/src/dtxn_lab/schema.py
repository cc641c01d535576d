"""Durable layout of the transaction layer: reserved names, modes, records."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Optional

from .egstore import Entity, Key, LOCK_FIELD, VERSION_FIELD

USER_KIND = "DT__User"
TXN_KIND = "DT__Txn"
SHADOW_KIND = "DT__Shadow"
SHADOW_DELETE_KIND = "DT__ShadowDelete"
PMD_KIND = "DT__PureMetaData"
PMD_NAME = "pmd"

DIST_TXN = "dt__dist_txn"
CREATED = "dt__created"
TARGET = "dt__target"
EMPTY_LISTS = "dt__empty_lists"

__all__ = [
    "USER_KIND", "TXN_KIND", "SHADOW_KIND", "SHADOW_DELETE_KIND", "PMD_KIND",
    "VERSION_FIELD", "LOCK_FIELD", "Mode", "DELETED", "EDGES", "TERMINAL",
    "DTRecord", "pmd_key", "user_key", "version_of", "DTError", "FlavorViolation",
    "DeleteThenPutNumericId", "IllegalTransition", "QueueFull", "NotHead",
    "NotTerminal", "ReadLockExpired", "ProtocolError",
]


class Mode(str, enum.Enum):
    NONE = "NONE"
    INIT0 = "INIT0"
    READY1 = "READY1"
    LOCKED2 = "LOCKED2"
    CHECKED3 = "CHECKED3"
    ABORTING3 = "ABORTING3"
    DONE4 = "DONE4"
    ABORTED4 = "ABORTED4"

    def __str__(self) -> str:
        return self.value


# pseudo-modes: before creation and after deletion of the record
NEW = "NEW"
DELETED = "DELETED"

EDGES: dict[Any, frozenset] = {
    NEW: frozenset({Mode.NONE, Mode.INIT0}),
    Mode.NONE: frozenset({Mode.INIT0, Mode.ABORTING3, DELETED}),
    Mode.INIT0: frozenset({Mode.READY1, Mode.ABORTING3}),
    Mode.READY1: frozenset({Mode.LOCKED2}),
    Mode.LOCKED2: frozenset({Mode.CHECKED3, Mode.ABORTING3}),
    Mode.CHECKED3: frozenset({Mode.DONE4}),
    Mode.ABORTING3: frozenset({Mode.ABORTED4}),
    Mode.DONE4: frozenset({DELETED}),
    Mode.ABORTED4: frozenset({DELETED}),
}

TERMINAL = frozenset({Mode.DONE4, Mode.ABORTED4})
# modes in which a DT sits in its user's pending queue
PENDING_MODES = frozenset({Mode.READY1, Mode.LOCKED2, Mode.CHECKED3, Mode.ABORTING3})


def is_edge(old: Any, new: Any) -> bool:
    return new in EDGES.get(old, ())


def parse_mode(text: str) -> Any:
    if text in (NEW, DELETED):
        return text
    return Mode(text)


class DTError(Exception):
    pass


class FlavorViolation(DTError):
    pass


class DeleteThenPutNumericId(DTError):
    pass


class IllegalTransition(DTError):
    pass


class QueueFull(DTError):
    pass


class NotHead(DTError):
    pass


class NotTerminal(DTError):
    pass


class ReadLockExpired(DTError):
    pass


class ProtocolError(DTError):
    """Internal inconsistency; indicates a bug, never a normal outcome."""


def user_key(user: str) -> Key:
    return Key.of(USER_KIND, user)


def pmd_key(key: Key) -> Key:
    return key.child(PMD_KIND, PMD_NAME)


def version_of(dt_key: Key) -> str:
    return dt_key.canonical()


@dataclass
class DTRecord:
    key: Key
    mode: Mode
    get_list_obj: list = field(default_factory=list)
    get_list_version: list = field(default_factory=list)
    put_list_obj: list = field(default_factory=list)
    put_list_shadow: list = field(default_factory=list)
    modified: int = 0
    half_timed_out: bool = False
    read_lock: bool = False
    read_lock_timeout: Optional[int] = None
    client_desc: str = ""
    result: Optional[str] = None

    @property
    def user(self) -> Key:
        return self.key.root

    @property
    def version(self) -> str:
        return version_of(self.key)

    def reads(self) -> list[tuple[Key, Optional[str]]]:
        return list(zip(self.get_list_obj, self.get_list_version))

    def writes(self) -> list[tuple[Optional[Key], Key]]:
        return list(zip(self.put_list_obj, self.put_list_shadow))

    def to_entity(self) -> Entity:
        props: dict[str, Any] = {
            "mode": self.mode.value,
            "get_list_obj": list(self.get_list_obj),
            "get_list_version": list(self.get_list_version),
            "put_list_obj": list(self.put_list_obj),
            "put_list_shadow": list(self.put_list_shadow),
            "modified": self.modified,
            "client_desc": self.client_desc,
            "result": self.result,
        }
        if self.half_timed_out:
            props["half_timed_out"] = True
        if self.read_lock:
            props["read_lock"] = True
            props["read_lock_timeout"] = self.read_lock_timeout
        return Entity(self.key, props)

    @classmethod
    def from_entity(cls, ent: Entity) -> "DTRecord":
        p = ent.props
        return cls(
            key=ent.key,
            mode=Mode(p["mode"]),
            get_list_obj=list(p.get("get_list_obj", [])),
            get_list_version=list(p.get("get_list_version", [])),
            put_list_obj=list(p.get("put_list_obj", [])),
            put_list_shadow=list(p.get("put_list_shadow", [])),
            modified=p.get("modified", 0),
            half_timed_out=bool(p.get("half_timed_out", False)),
            read_lock=bool(p.get("read_lock", False)),
            read_lock_timeout=p.get("read_lock_timeout"),
            client_desc=p.get("client_desc", ""),
            result=p.get("result"),
        )
