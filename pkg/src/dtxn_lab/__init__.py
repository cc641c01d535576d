"""Optimistic distributed transactions over an entity-group store, plus a test lab."""
from .egstore import (
    EVENTUAL, STRONG, CrossGroupAccess, Entity, Key, LTContext, QueryInsideLT, Store,
    StoreConfig, StoreError, TransientFailure,
)
from .dt_engine import DistributedTransaction, Engine, EngineConfig
from .gc import GarbageCollector, GCConfig
from .history import Event, History
from .runtime import DirectRuntime, SoftTimeout, ThreadedRuntime, WorkerCrash
from .schema import DTRecord, Mode

__all__ = [
    "EVENTUAL", "STRONG", "CrossGroupAccess", "Entity", "Key", "LTContext", "QueryInsideLT",
    "Store", "StoreConfig", "StoreError", "TransientFailure", "DistributedTransaction",
    "Engine", "EngineConfig", "GarbageCollector", "GCConfig", "Event", "History",
    "DirectRuntime", "ThreadedRuntime", "SoftTimeout", "WorkerCrash", "DTRecord", "Mode",
]
