import pytest
from hypothesis import given, settings, strategies as st

from dtxn_lab.egstore import (
    EVENTUAL, STRONG, CrossGroupAccess, Entity, InvalidKey, Key, QueryInsideLT, Store,
    StoreConfig, TransientFailure, dump_entities, load_entities,
)
from dtxn_lab.harness.scheduler import Scheduler


def K(*path):
    return Key(*path)


# -- keys ---------------------------------------------------------------------

def test_numeric_ids_sort_before_names():
    assert Key.of("A", 5) < Key.of("A", "a") < Key.of("A", "b")
    assert Key.of("A", 2) < Key.of("A", 10)


def test_names_compare_bytewise():
    assert Key.of("A", "Z") < Key.of("A", "a")
    assert Key.of("A", "a") < Key.of("A", "ab")


def test_sorting_groups_by_root():
    keys = [Key.of("G", "b").child("X", 1), Key.of("G", "a").child("X", 9), Key.of("G", "b"),
            Key.of("G", "a")]
    roots = [k.root for k in sorted(keys)]
    assert roots == sorted(roots)
    assert roots[0] == roots[1] == Key.of("G", "a")


@pytest.mark.parametrize("name", ["__x__", "____", "__pmd__"])
def test_dunder_names_rejected(name):
    with pytest.raises(InvalidKey):
        Key.of("A", name)


@pytest.mark.parametrize("bad", ["12", "a/b", "a:b", "a b", "", 0, -3, True])
def test_ambiguous_ids_rejected(bad):
    with pytest.raises(InvalidKey):
        Key.of("A", bad)


def test_canonical_form():
    k = Key.of("DT__User", "u1").child("DT__Txn", 7)
    assert k.canonical() == "/DT__User:u1/DT__Txn:7"
    assert Key.parse(k.canonical()) == k
    assert Key.parse("/A:x/B:").is_complete is False


names = st.text(alphabet="abcxyzAZ_-.", min_size=1, max_size=6).filter(
    lambda s: not (len(s) >= 4 and s.startswith("__") and s.endswith("__")))
idents = st.one_of(st.integers(min_value=1, max_value=10**6), names)
keys = st.lists(st.tuples(st.sampled_from(["A", "B", "Acct"]), idents), min_size=1, max_size=3).map(
    lambda p: Key(*p))


@given(keys)
def test_canonical_roundtrip(k):
    assert Key.parse(k.canonical()) == k


@given(st.lists(keys, min_size=2, max_size=8))
def test_order_is_total_and_consistent(ks):
    s = sorted(ks)
    for a, b in zip(s, s[1:]):
        assert a < b or a == b
        assert not b < a


# -- allocate_ids ---------------------------------------------------------------

def test_allocate_ids_examples():
    s = Store()
    proto = Key.incomplete("Item", Key.of("G", "r"))
    assert list(s.allocate_ids(proto)) == [1]
    s2 = Store()
    s2.allocate_ids(proto, 1000)
    assert list(s2.allocate_ids(proto, 3)) == [1001, 1002, 1003]


def test_allocate_ids_per_root():
    s = Store()
    a = s.allocate_ids(Key.incomplete("Item", Key.of("G", "r1")), 2)
    b = s.allocate_ids(Key.incomplete("Item", Key.of("G", "r2")), 2)
    assert list(a) == list(b) == [1, 2]


@given(st.lists(st.tuples(st.sampled_from(["r1", "r2"]), st.sampled_from(["X", "Y"]),
                          st.integers(1, 5)), max_size=30))
def test_allocate_ids_never_repeat(calls):
    s = Store()
    seen = set()
    for root, kind, count in calls:
        ids = s.allocate_ids(Key.incomplete(kind, Key.of("G", root)), count)
        assert len(ids) == count
        for i in ids:
            assert (root, kind, i) not in seen
            seen.add((root, kind, i))


# -- local transactions -------------------------------------------------------------

G = Key.of("G", "g")
X = G.child("X", "x")
Y = G.child("X", "y")


def test_concurrent_increments_serialize():
    for seed in range(20):
        sched = Scheduler(seed)
        store = Store(runtime=sched)
        store.put(Entity(X, {"n": 0}))

        def inc(lt):
            ent = lt.get(X)
            ent["n"] += 1
            lt.put(ent)

        for w in ("a", "b"):
            sched.spawn(w, lambda: store.run_in_lt(G, inc))
        sched.run()
        assert store.get(X)["n"] == 2


def test_cross_group_access_has_no_effect():
    store = Store()
    other = Key.of("G", "h")

    def body(lt):
        lt.put(Entity(X, {"n": 1}))
        lt.put(Entity(other, {"n": 1}))

    with pytest.raises(CrossGroupAccess):
        store.run_in_lt(G, body)
    assert store.get(X) is None and store.get(other) is None
    assert store.group_version(G) == 0


def test_submarine_write_commits():
    store = Store(StoreConfig(p_submarine=1.0))
    with pytest.raises(TransientFailure):
        store.run_in_lt(G, lambda lt: lt.put(Entity(X, {"x": 1})))
    assert store.get(X, STRONG)["x"] == 1


def test_put_delete_are_implicit_lts():
    store = Store()
    store.put(Entity(X, {"v": 1}))
    store.delete(X)
    assert store.get(X) is None
    assert store.group_version(G) == 2
    sub = Store(StoreConfig(p_submarine=1.0))
    with pytest.raises(TransientFailure):
        sub.put(Entity(X, {"v": 1}))
    assert sub.get(X)["v"] == 1


def test_on_commit_runs_only_on_commit():
    store = Store()
    seen = []

    def body(lt):
        lt.on_commit(lambda: seen.append(1))
        raise RuntimeError("boom")

    with pytest.raises(RuntimeError):
        store.run_in_lt(G, body)
    assert seen == []
    store.run_in_lt(G, lambda lt: lt.on_commit(lambda: seen.append(2)))
    assert seen == [2]


# -- reads --------------------------------------------------------------------------

def test_get_absent_and_latest():
    store = Store()
    assert store.get(X) is None
    store.put(Entity(X, {"a": 1, "b": 1}))
    store.put(Entity(X, {"a": 2, "b": 2}))
    assert store.get(X, STRONG).props == {"a": 2, "b": 2}


def test_forced_stale_read_returns_whole_previous_snapshot():
    store = Store(StoreConfig(p_stale_eventual=1.0, stale_depth=1))
    store.put(Entity(X, {"a": 1, "b": 1}))
    store.put(Entity(X, {"a": 2, "b": 2}))
    assert store.get(X, EVENTUAL).props == {"a": 1, "b": 1}
    assert store.get(X, STRONG).props == {"a": 2, "b": 2}


@settings(max_examples=50)
@given(st.lists(st.integers(0, 3), min_size=1, max_size=12), st.integers(0, 10**6))
def test_stale_reads_are_historical(writes, seed):
    store = Store(StoreConfig(p_stale_eventual=0.7, stale_depth=3, rng_seed=seed))
    states = [None]
    for i, w in enumerate(writes):
        if w == 0:
            store.delete(X)
            states.append(None)
        else:
            store.put(Entity(X, {"a": i, "b": i, "w": w}))
            states.append({"a": i, "b": i, "w": w})
    for _ in range(10):
        got = store.get(X, EVENTUAL)
        assert (got.props if got else None) in states


def test_ancestor_query_inside_and_outside():
    store = Store()
    assert store.ancestor_query(G) == []
    for name in ("a", "b", "c"):
        store.put(Entity(G.child("X", name), {}))
    assert len(store.run_in_lt(G, lambda lt: store.ancestor_query(G, inside=lt))) == 3
    stale = Store(StoreConfig(p_stale_index=1.0))
    stale.put(Entity(X, {}))
    assert stale.ancestor_query(G) == []
    with pytest.raises(CrossGroupAccess):
        store.run_in_lt(G, lambda lt: store.ancestor_query(Key.of("G", "h"), inside=lt))


def test_general_query():
    store = Store()
    for i in range(5):
        store.put(Entity(Key.of("Q", f"q{i}"), {"i": i}))
    assert len(store.general_query("Q")) == 5
    assert [e["i"] for e in store.general_query("Q", lambda e: e["i"] > 2)] == [3, 4]
    lossy = Store(StoreConfig(p_stale_index=0.5, rng_seed=4))
    for i in range(20):
        lossy.put(Entity(Key.of("Q", f"q{i}"), {"i": i}))
    got = lossy.general_query("Q")
    assert 0 < len(got) < 20
    with pytest.raises(QueryInsideLT):
        store.run_in_lt(G, lambda lt: store.general_query("Q"))


# -- linearization and dumps --------------------------------------------------

ops = st.lists(st.tuples(st.sampled_from(["g1", "g2"]), st.sampled_from(["a", "b"]),
                         st.one_of(st.none(), st.integers(0, 9))), max_size=25)


@given(ops)
def test_group_log_replay_reproduces_snapshots(seq):
    store = Store(StoreConfig(p_submarine=0.3, rng_seed=1))
    for g, name, v in seq:
        key = Key.of("G", g).child("X", name)

        def body(lt, key=key, v=v):
            if v is None:
                lt.delete(key)
            else:
                lt.put(Entity(key, {"v": v}))

        try:
            store.run_in_lt(key.root, body)
        except TransientFailure:
            pass
    for g in ("g1", "g2"):
        root = Key.of("G", g)
        snaps = store.group_snapshots(root)
        state: dict = {}
        assert snaps[0] == {}
        for i, (version, writes) in enumerate(store.group_log(root), 1):
            assert version == i
            for k, ent in writes.items():
                if ent is None:
                    state.pop(k, None)
                else:
                    state[k] = ent
            assert state == snaps[i]


def test_dump_format_and_roundtrip():
    a = Entity(Key.of("Account", "a"), {"balance": 5, "tags": []})
    a.set_dt_meta("/DT__User:u1/DT__Txn:3", None)
    p = Entity(Key.of("Name", "n").child("DT__PureMetaData", "pmd"))
    p.set_dt_meta(None, Key.parse("/DT__User:u2/DT__Txn:1"))
    plain = Entity(Key.of("Plain", 4), {"ref": Key.of("Account", "a")})
    text = dump_entities([plain, p, a])
    lines = text.splitlines()
    assert lines[0] == '/Account:a\t/DT__User:u1/DT__Txn:3\t-\t{"balance":5,"tags":[]}'
    assert lines[1] == "/Name:n/DT__PureMetaData:pmd\tnone\t/DT__User:u2/DT__Txn:1\t{}"
    assert lines[2] == '/Plain:4\t-\t-\t{"ref":{"$key":"/Account:a"}}'
    assert dump_entities(load_entities(text)) == text
    store = Store()
    store.load(text)
    assert store.dump() == text
    # ids loaded from a dump are never handed out again
    assert list(store.allocate_ids(Key.incomplete("Plain"))) == [5]
