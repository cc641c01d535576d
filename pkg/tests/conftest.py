import pytest

from dtxn_lab import DirectRuntime, Engine, EngineConfig, Entity, History, Key, Store, StoreConfig
from dtxn_lab.gc import GarbageCollector, GCConfig
from dtxn_lab.runtime import WorkerCrash


class Lab:
    """A single-worker engine on a manual clock."""

    def __init__(self, store_cfg=None, engine_cfg=None, gc_cfg=None, worker="w0"):
        self.rt = CrashAt(worker=worker)
        self.store = Store(store_cfg or StoreConfig(), self.rt)
        self.history = History()
        self.engine = Engine(self.store, self.rt, self.history, engine_cfg or EngineConfig())
        self.gc = GarbageCollector(self.engine, gc_cfg or GCConfig())

    def run(self, fn, *args, user="u1", **kw):
        return self.engine.distributed_run_in_transaction(user, fn, args, **kw)

    def create(self, key, user="setup", **props):
        def fn(ctx):
            ctx.put(Entity(key, dict(props)))

        rec = self.run(fn, user=user)
        assert rec.mode.value == "DONE4", rec.result
        return rec

    def events(self, kind):
        return self.history.of(kind)

    def use_store(self, store):
        self.store = self.engine.store = self.gc.store = store
        return store


@pytest.fixture
def lab():
    return Lab()


def acct(name):
    return Key.of("Account", name)


class CrashAt(DirectRuntime):
    """Direct runtime that can raise at chosen points.

    ``arm(label)`` fires the first time ``label`` is reached; ``crash_index``
    fires at the n-th point overall.  Every point label reached is recorded.
    """

    def __init__(self, worker="w0", start=0):
        super().__init__(worker, start)
        self.armed = {}
        self.crash_index = None
        self.seen = []

    def arm(self, label, exc=WorkerCrash):
        self.armed[label] = exc

    def point(self, label):
        self.seen.append(label)
        if self.crash_index is not None and len(self.seen) - 1 == self.crash_index:
            self.crash_index = None
            raise WorkerCrash(label)
        exc = self.armed.pop(label, None)
        if exc is not None:
            raise exc(label)


class SubmarineOnce(Store):
    """Reports failure once (after committing) for LTs carrying ``label``."""

    def __init__(self, label, *args, **kw):
        super().__init__(*args, **kw)
        self.label = label
        self.fired = 0

    def run_in_lt(self, group, body, label="egstore:lt"):
        from dtxn_lab.egstore import TransientFailure

        result = super().run_in_lt(group, body, label)
        if label == self.label and not self.fired:
            self.fired += 1
            raise TransientFailure("forced")
        return result


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
