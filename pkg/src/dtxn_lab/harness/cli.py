"""dtxn-lab command line: run scenarios and check recorded histories."""
from __future__ import annotations

import argparse
import random
import sys
from pathlib import Path
from typing import Optional

from ..history import History, MalformedHistory
from .checker import check_all
from .scenario import NonQuiescent, RunResult, Scenario, ScenarioError, crash_sweep, run_scenario
from .workloads import build_workload


def _conserved(sc: Scenario) -> Optional[tuple]:
    wl = build_workload(sc.workload, random.Random(0), sc.workers, 0, sc.size)
    return wl.conserved


def _check(res: RunResult) -> tuple[bool, list[str]]:
    sc = res.scenario
    rep = check_all(res.history, res.initial, res.final, conserved=_conserved(sc), queues=sc.queues)
    return rep.ok, rep.lines()


def _summary(res: RunResult) -> str:
    r = res.report
    return (f"seed={res.scenario.seed} commits={len(res.history.of('COMMIT'))} "
            f"aborts={len(res.history.of('ABORT'))} crashes={r['crashes']} "
            f"events={len(res.history)} steps={r['steps']} seconds={r['seconds']:.3f}")


def cmd_run(args: argparse.Namespace) -> int:
    try:
        sc = Scenario.parse(Path(args.scenario).read_text())
        if args.seed is not None:
            sc = sc.replace(seed=args.seed)
    except (OSError, ScenarioError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.crash_sweep:
        outcomes = crash_sweep(sc)
        failed = 0
        for o in outcomes:
            problems = [o.error] if o.error else []
            if not problems and args.check:
                ok, lines = _check(o.result)
                problems = [line for line in lines if line.startswith("FAIL")]
            if problems:
                failed += 1
                print(f"FAIL crash at point {o.index} ({o.worker} {o.label}): {'; '.join(problems)}")
        print(f"crash sweep: {len(outcomes)} points, {failed} failed")
        return 1 if failed else 0
    try:
        res = run_scenario(sc)
    except NonQuiescent as exc:
        print(f"FAIL quiescence: {exc}")
        return 1
    print(_summary(res))
    for name, path in (("history", args.dump_history), ("initial", args.dump_initial),
                       ("final", args.dump_final)):
        if path:
            text = res.history.dump() if name == "history" else getattr(res, name)
            Path(path).write_text(text)
    if args.check:
        ok, lines = _check(res)
        print("\n".join(lines))
        return 0 if ok else 1
    return 0


def cmd_check(args: argparse.Namespace) -> int:
    try:
        history = History.parse(Path(args.history).read_text())
        initial = Path(args.initial).read_text()
        final = Path(args.final).read_text()
    except (OSError, MalformedHistory, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    conserved = tuple(args.conserve.split(".", 1)) if args.conserve else None
    try:
        rep = check_all(history, initial, final, conserved=conserved, queues=args.queues)
    except (MalformedHistory, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print("\n".join(rep.lines()))
    return 0 if rep.ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dtxn-lab", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario file")
    run.add_argument("--scenario", required=True, help="flat key=value scenario file")
    run.add_argument("--seed", type=int, help="override the scenario seed")
    run.add_argument("--crash-sweep", action="store_true",
                     help="rerun once per instrumented point with a crash there")
    run.add_argument("--check", action="store_true", help="run all history/dump checks")
    run.add_argument("--dump-history", metavar="PATH")
    run.add_argument("--dump-initial", metavar="PATH")
    run.add_argument("--dump-final", metavar="PATH")
    run.set_defaults(func=cmd_run)

    chk = sub.add_parser("check", help="check a recorded history against store dumps")
    chk.add_argument("--history", required=True)
    chk.add_argument("--initial", required=True)
    chk.add_argument("--final", required=True)
    chk.add_argument("--conserve", metavar="KIND.FIELD", help="also require this sum to be unchanged")
    chk.add_argument("--queues", action="store_true", help="also check per-user queue order")
    chk.set_defaults(func=cmd_check)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
