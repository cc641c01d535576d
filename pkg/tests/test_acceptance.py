"""Acceptance criteria, each run at its stated tolerance.

Every test appends one PASS/FAIL line to the acceptance summary printed at
the end of the pytest run (and prints it directly, visible with -s).
"""
import random
import time
from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from conftest import ACCEPTANCE_LINES, Lab
from dtxn_lab import Entity, Key, Mode
from dtxn_lab.harness.checker import (
    check_all, check_serializable, committed_dts, mode_violations, queue_order_violations,
    residue_in_dump, wait_cycle,
)
from dtxn_lab.harness.scenario import NonQuiescent, Scenario, crash_sweep, run_scenario
from dtxn_lab.harness.scheduler import Scheduler

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"
BANK = Scenario.parse((SCENARIOS / "bank.txt").read_text())
CONTENDED_2DT = Scenario.parse((SCENARIOS / "contended-2dt.txt").read_text())
SEEDS = range(1, 51)
CONSERVE = ("Account", "balance")


def report(n, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def _timed_check(sc, queues=False):
    t0 = time.perf_counter()
    res = run_scenario(sc)
    rep = check_all(res.history, res.initial, res.final, conserved=CONSERVE if sc.workload == "bank" else None,
                    queues=queues)
    return res, rep, time.perf_counter() - t0


def _random_timing(rng, workers):
    durations = {f: rng.randint(1, 10**4) for f in (
        "timeout_gae", "timeout_roll_forward_dt", "timeout_garbage_collect_dt",
        "timeout_garbage_collect_shadow", "timeout_read_lock_dt", "epsilon")}
    return dict(durations, skews=[rng.randint(1, 10**4) for _ in range(workers)])


class Suite:
    """Runs the criterion 1-6 workloads once per configuration and keeps the verdicts."""

    def __init__(self, **overrides):
        self.overrides = overrides
        self.randomize = overrides.pop("randomize_timing", False)
        self.bank_runs = []
        self._sweep = None
        self.contended_runs = []

    def _sc(self, base, seed, **kw):
        sc = base.replace(seed=seed, **self.overrides, **kw)
        if self.randomize:
            sc = sc.replace(**_random_timing(random.Random(f"timing-{seed}-{base.workload}"), sc.workers))
        return sc

    def bank(self):
        if not self.bank_runs:
            for seed in SEEDS:
                self.bank_runs.append((seed, *_timed_check(self._sc(BANK, seed))))
        return self.bank_runs

    def sweep(self):
        if self._sweep is None:
            sc = self._sc(CONTENDED_2DT, CONTENDED_2DT.seed)
            self._sweep = crash_sweep(sc)
        return self._sweep

    def contended(self):
        if not self.contended_runs:
            for seed in range(1, 26):
                sc = self._sc(Scenario(workers=4, workload="contended", size=4, ops=4, gc_interval=50), seed)
                res = run_scenario(sc)
                self.contended_runs.append((seed, res, check_all(res.history, res.initial, res.final)))
        return self.contended_runs

    # -- verdicts ------------------------------------------------------------------

    def c1(self):
        bad = [s for s, _, rep, _ in self.bank() if not rep.results["conservation"][0]]
        slow = [(s, round(t, 2)) for s, _, _, t in self.bank() if t >= 5.0]
        worst = max(t for *_, t in self.bank())
        return not bad and not slow, f"sum conserved on {50 - len(bad)}/50 seeds, slowest {worst:.2f}s" + (
            f"; not conserved {bad}" if bad else "") + (f"; over 5s {slow}" if slow else "")

    def c2(self):
        bad = [s for s, _, rep, _ in self.bank() if not rep.results["serializable"][0]]
        oracle_runs, disagree = 0, []
        small = [(f"bank seed {s}", res) for s, res, _, _ in self.bank()]
        small += [(f"sweep point {o.index}", o.result) for o in self.sweep() if o.result is not None]
        small += [(f"contended seed {s}", res) for s, res, _ in self.contended()]
        for name, res in small:
            if len(committed_dts(res.history)) <= 4:
                oracle_runs += 1
                v = check_serializable(res.history, res.final, res.initial)
                if not (v.oracle_agrees and v.ok):
                    disagree.append(name)
        ok = not bad and not disagree
        return ok, (f"witness replay PASS on {50 - len(bad)}/50 seeds; permutation oracle agrees on "
                    f"{oracle_runs - len(disagree)}/{oracle_runs} runs with <=4 commits") + (
            f"; failing seeds {bad}" if bad else "") + (f"; oracle disagrees {disagree[:5]}" if disagree else "")

    def c3(self):
        outcomes = self.sweep()
        problems = []
        for o in outcomes:
            if o.error:
                problems.append(f"{o.index}:{o.error}")
                continue
            residue = residue_in_dump(o.result.final)
            rep = check_all(o.result.history, o.result.initial, o.result.final, conserved=CONSERVE)
            if residue or not rep.ok:
                problems.append(f"{o.index}:{residue[:2] or [l for l in rep.lines() if l.startswith('FAIL')]}")
        n = len(outcomes)
        return not problems and 0 < n < 200, f"{n} crash points, {n - len(problems)} recovered with zero residue" + (
            f"; {problems[:3]}" if problems else "")

    def c4(self):
        histories = [res.history for _, res, _, _ in self.bank()]
        histories += [o.result.history for o in self.sweep() if o.result is not None]
        histories += [res.history for _, res, _ in self.contended()]
        histories.append(named_key_transcript(self.randomize)[1])
        bad = [v for h in histories for v in mode_violations(h)]
        transitions = sum(len(h.of("MODE")) for h in histories)
        return not bad, f"{transitions} mode changes in {len(histories)} histories, {len(bad)} off-DAG" + (
            f"; {bad[:3]}" if bad else "")

    def c5(self):
        cycles = [(s, wait_cycle(res.history)) for s, res, _ in self.contended()]
        cycles = [c for c in cycles if c[1] is not None]
        failed = [s for s, _, rep in self.contended() if not rep.ok]
        waits = sum(len(res.history.of("WAIT_ON")) for _, res, _ in self.contended())
        return not cycles and not failed, (f"{len(self.contended())} runs of 4 DTs x 4 keys completed, "
                                           f"{waits} WAIT_ON edges, no cycle") if not cycles and not failed else (
            f"cycles {cycles[:2]}; failed checks {failed}")

    def c6(self):
        rec, history = named_key_transcript(self.randomize)
        return rec.mode == Mode.ABORTED4, f"DT1 ended {rec.mode.value}"

    def verdicts(self):
        return [self.c1()[0], self.c2()[0], self.c3()[0], self.c4()[0], self.c5()[0], self.c6()[0]]


def named_key_transcript(randomize=False):
    """Read-absent / write / (suspend) / create+commit / delete+commit / commit, forced by the scheduler."""
    sched = Scheduler(seed=0)
    lab = Lab()
    lab.engine.rt = sched
    lab.store.runtime = sched
    if randomize:
        from dtxn_lab.gc import GCConfig
        rng = random.Random("named-key")
        t = _random_timing(rng, 1)
        t.pop("skews")
        lab.gc.config = GCConfig(**t)
    foo = Key.of("Name", "foo")
    out = {}

    def dt1():
        ctx = lab.engine.begin_dt("u1")
        assert ctx.get(foo) is None            # 1. reads foo, finds it absent
        ctx.put(Entity(foo, {"by": "dt1"}))    # 2. writes foo, then is suspended
        sched.sleep_until(sched.now() + 1000)
        out["dt1"] = lab.engine.commit(ctx)    # 5. wakes up and commits

    def dt2():
        out["dt2"] = lab.run(lambda c: c.put(Entity(foo, {"by": "dt2"})), user="u2")  # 3. creates foo

    def dt3():
        sched.sleep_until(sched.now() + 500)
        out["dt3"] = lab.run(lambda c: c.delete(foo), user="u3")  # 4. deletes foo

    sched.spawn("w1", dt1, crashable=False)
    sched.spawn("w2", lambda: (sched.sleep_until(100), dt2()), crashable=False)
    sched.spawn("w3", dt3, crashable=False)
    sched.run()
    assert out["dt2"].mode == Mode.DONE4 and out["dt3"].mode == Mode.DONE4
    order = [e.dt for e in lab.history.of("COMMIT")]
    assert order == [out["dt2"].key.canonical(), out["dt3"].key.canonical()]
    assert lab.store.get(foo) is None
    return out["dt1"], lab.history


# -- the criteria ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def base():
    return Suite()


def test_criterion_1_conservation(base):
    assert report(1, *base.c1())


def test_criterion_2_serializability(base):
    assert report(2, *base.c2())


def test_criterion_3_crash_everywhere(base):
    assert report(3, *base.c3())


def test_criterion_4_mode_dag(base):
    assert report(4, *base.c4())


def test_criterion_5_deadlock_freedom(base):
    assert report(5, *base.c5())


def test_criterion_6_named_key_transcript(base):
    assert report(6, *base.c6())


_ryw_stats = {"cases": 0, "violations": 0}
# named keys only, so any put may follow a delete
KEYS = [Key.of("Acc", n) for n in ("a", "b", "c")] + [Key.of("Name", "n")]

op = st.one_of(
    st.tuples(st.just("get"), st.sampled_from(KEYS)),
    st.tuples(st.just("put"), st.sampled_from(KEYS), st.integers(0, 99)),
    st.tuples(st.just("delete"), st.sampled_from(KEYS)),
    st.tuples(st.just("outside"), st.sampled_from(KEYS), st.integers(100, 199)),
)


@settings(max_examples=1000, deadline=None)
@given(st.lists(op, max_size=25), st.sets(st.sampled_from(KEYS)))
def test_criterion_7_read_your_writes(ops, present):
    lab = Lab()
    for k in sorted(present):
        lab.create(k, v=-1)
    ctx = lab.engine.begin_dt("u1")
    # what this DT must see: its own writes, else its first observation
    view = {}
    violated = False
    for o in ops:
        kind, key = o[0], o[1]
        if kind == "put":
            ctx.put(Entity(key, {"v": o[2]}))
            view[key] = o[2]
        elif kind == "delete":
            ctx.delete(key)
            view[key] = None
        elif kind == "outside":
            # another DT changes the key between our operations
            lab.engine.rt.worker = "w9"
            lab.run(lambda c, k=key, v=o[2]: c.put(Entity(k, {"v": v})), user="u9")
            lab.engine.rt.worker = "w0"
        else:
            got = ctx.get(key)
            seen = got["v"] if got is not None else None
            if key not in view:
                view[key] = seen
            elif view[key] != seen:
                violated = True
    versions = {}
    for e in lab.history.of("READ"):
        if e.dt == ctx.key.canonical():
            if versions.setdefault(e.obj, e.detail) != e.detail:
                violated = True
    _ryw_stats["cases"] += 1
    _ryw_stats["violations"] += violated
    assert not violated


def test_criterion_7_report():
    # runs after the property above in file order
    ok = _ryw_stats["cases"] >= 1000 and _ryw_stats["violations"] == 0
    assert report(7, ok, f"{_ryw_stats['cases']} random op sequences, {_ryw_stats['violations']} violations")


def test_criterion_8_heuristic_independence(base):
    randomized = Suite(randomize_timing=True)
    got, want = randomized.verdicts(), base.verdicts()
    details = [f"c{i + 1}={'PASS' if v else 'FAIL'}" for i, v in enumerate(got)]
    ok = got == want and all(got)
    if not ok:
        details += [f"c{i + 1}: {getattr(randomized, f'c{i + 1}')()[1]}" for i, v in enumerate(got) if not v]
    assert report(8, ok, "durations and skews drawn from [1, 10^4]: " + " ".join(details))


def test_criterion_9_queues_and_read_locks(base):
    order_bad, other_bad = [], []
    for seed in SEEDS:
        res, rep, _ = _timed_check(BANK.replace(seed=seed, queues=True, sync_mode=True), queues=True)
        if queue_order_violations(res.history):
            order_bad.append(seed)
        if not rep.ok:
            other_bad.append(seed)
    locked = Suite(read_locks=True)
    with_locks = [locked.c1()[0], locked.c2()[0], locked.c3()[0], locked.c4()[0]]
    without = [base.c1()[0], base.c2()[0], base.c3()[0], base.c4()[0]]
    ok = not order_bad and not other_bad and with_locks == without
    detail = (f"queues+sync_mode witness order = issue order on {50 - len(order_bad)}/50 seeds; "
              f"criteria 1-4 with read locks {with_locks} vs without {without}")
    if order_bad or other_bad:
        detail += f"; order violations {order_bad[:5]}, failed checks {other_bad[:5]}"
    assert report(9, ok, detail)
