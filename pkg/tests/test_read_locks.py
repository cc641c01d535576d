import pytest

from conftest import Lab, acct
from dtxn_lab import Mode, StoreConfig
from dtxn_lab.dt_engine import EngineConfig
from dtxn_lab.read_locks import acquire_read_lock, active_read_locks, writer_respect_read_locks
from dtxn_lab.schema import ReadLockExpired

A, B = acct("a"), acct("b")


def move(ctx, src, dst, amount):
    a, b = ctx.get(src), ctx.get(dst)
    a["balance"] -= amount
    b["balance"] += amount
    ctx.put(a)
    ctx.put(b)


def make(pad=1, **store):
    lab = Lab(StoreConfig(**store), EngineConfig(respect_read_locks=True, read_lock_pad=pad))
    lab.create(A, balance=100)
    lab.create(B, balance=50)
    return lab


def test_acquire_records_versions():
    lab = make()
    lab.rt.advance(5)
    rl = acquire_read_lock(lab.engine, "r", [B, A], 300)
    assert rl.mode == Mode.NONE and rl.read_lock and rl.read_lock_timeout == 305
    assert rl.get_list_obj == [A, B]
    assert rl.get_list_version == [lab.store.get(A).version, lab.store.get(B).version]
    assert all(e.dt != rl.version for e in lab.history.of("READ"))


def test_acquire_rejects_bad_input():
    lab = make()
    with pytest.raises(ValueError):
        acquire_read_lock(lab.engine, "r", [], 10)
    with pytest.raises(ValueError):
        acquire_read_lock(lab.engine, "r", [A], 0)


def test_use_before_expiry():
    lab = make()
    rl = acquire_read_lock(lab.engine, "r", [A, B], 300)
    lab.rt.advance(100)
    rec = lab.run(move, A, B, 10, user="r", read_lock_dt=rl.key)
    assert rec.key == rl.key and rec.mode == Mode.DONE4
    assert lab.store.get(A)["balance"] == 90


def test_use_after_change_aborts():
    lab = make()
    rl = acquire_read_lock(lab.engine, "r", [A, B], 300)
    lab.engine.config.respect_read_locks = False
    lab.run(move, A, B, 1, user="w")
    rec = lab.run(move, A, B, 10, user="r", read_lock_dt=rl.key)
    assert rec.mode == Mode.ABORTED4
    assert lab.store.get(A)["balance"] == 99


def test_expired_lock_refused_and_swept():
    lab = make()
    rl = acquire_read_lock(lab.engine, "r", [A], 300)
    lab.rt.advance(301)
    with pytest.raises(ReadLockExpired):
        lab.run(move, A, B, 10, user="r", read_lock_dt=rl.key)
    lab.rt.advance(1)
    assert lab.gc.sweep().read_locks_expired == 1
    assert lab.engine.read_record(rl.key).mode == Mode.ABORTED4
    with pytest.raises(ReadLockExpired):
        lab.engine.activate_read_lock(rl.key, "x")


def test_writer_waits_for_expiry():
    lab = make(pad=0)
    acquire_read_lock(lab.engine, "r", [A], 10)
    rec = lab.run(move, A, B, 5, user="w")
    assert rec.mode == Mode.DONE4
    assert lab.rt.now() == 10
    assert lab.store.get(A)["balance"] == 95


def test_writer_rechecks_once():
    lab = make(pad=0)
    acquire_read_lock(lab.engine, "r", [A], 10)
    sleep = lab.rt.sleep_until
    renewed = []

    def another_reader_arrives(t):
        sleep(t)
        if not renewed:
            renewed.append(acquire_read_lock(lab.engine, "r2", [A], 10))

    lab.rt.sleep_until = another_reader_arrives
    assert writer_respect_read_locks(lab.engine, A) == 20
    # only one re-check: the third lock is not waited for
    acquire_read_lock(lab.engine, "r3", [A], 50)
    lab.rt.sleep_until = sleep
    assert active_read_locks(lab.engine, A, lab.rt.now())


def test_unrelated_keys_do_not_wait():
    lab = make()
    acquire_read_lock(lab.engine, "r", [B], 500)
    assert writer_respect_read_locks(lab.engine, A) is None
    assert lab.rt.now() == 0


def test_missed_lock_only_costs_the_reader():
    lab = make(p_stale_index=1.0)
    rl = acquire_read_lock(lab.engine, "r", [A, B], 300)
    assert lab.run(move, A, B, 1, user="w").mode == Mode.DONE4
    assert lab.rt.now() == 0  # the writer never saw the lock
    assert lab.run(move, A, B, 10, user="r", read_lock_dt=rl.key).mode == Mode.ABORTED4
    assert (lab.store.get(A)["balance"], lab.store.get(B)["balance"]) == (99, 51)
