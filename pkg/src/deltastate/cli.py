"""Command-line front end.

Subcommands::

    deltastate replay --trace t.jsonl [--mode both] [--report out.json]
    deltastate gen    --out t.jsonl [--length 120] [--seed 7]
    deltastate bench  {mcts,bon,fanout,war} [options]
    deltastate fsck   [--trace t.jsonl]

Exit codes: 0 success; 1 invariant or oracle violation; 2 malformed
input; 3 unknown snapshot id; 4 injected fault surfaced. Reports are
written atomically (temp file + rename) and are byte-stable for a given
seed apart from the ``generated_at`` stamp.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
import time

from . import integrity
from .config import SEED_ENV, Settings
from .errors import (DeltaStateError, DumpFailure, TraceError,
                     UnknownSnapshotId)
from .searchsim import (MctsConfig, MctsRunner, RunConfig, TraceRunner,
                        dump_trace, generate_trace, load_trace,
                        run_best_of_n, run_rl_fanout, run_war_sweep)
from .statemanager import GcPolicy

EXIT_OK = 0
EXIT_VIOLATION = 1
EXIT_BAD_INPUT = 2
EXIT_UNKNOWN_ID = 3
EXIT_FAULT = 4


def write_report(path: str, payload: dict) -> None:
    """Atomic write: the report is either absent or complete."""
    payload = dict(payload)
    payload["generated_at"] = time.strftime("%Y-%m-%dT%H:%M:%SZ",
                                            time.gmtime())
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(prefix=".report-", dir=directory)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _settings(args: argparse.Namespace) -> Settings:
    flags = {}
    for attr, key in (("seed", "seed"), ("mode", "mode"), ("gc", "gc"),
                      ("pool", "pool"), ("warm", "warm"),
                      ("fault_dump_at", "fault.dump_at")):
        if getattr(args, attr, None) is not None:
            flags[key] = getattr(args, attr)
    return Settings.resolve(flags=flags,
                            config_path=getattr(args, "config", None))


def _run_config(s: Settings) -> RunConfig:
    return RunConfig(seed=s.seed, mode=s.mode, base_files=s.base_files,
                     base_file_size=s.base_file_size,
                     initial_pages=s.initial_pages,
                     pool_capacity=s.pool_capacity, gc=s.gc,
                     warm_mode=s.warm_mode, fault_dump_at=s.fault_dump_at,
                     verify_lightweight=s.verify_lightweight,
                     cost_model=s.cost_model, classifier=s.classifier)


def cmd_replay(args: argparse.Namespace) -> int:
    try:
        settings = _settings(args)
        events = load_trace(args.trace)
    except (TraceError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    runner = TraceRunner(events, _run_config(settings))
    result = runner.run()
    leaked = runner.close()
    payload = {"kind": "replay", "trace": args.trace,
               "config": runner.config.as_dict(),
               "result": result.as_dict(), "leaked_blocks": leaked}
    if args.report:
        write_report(args.report, payload)
    else:
        print(json.dumps(payload["result"], indent=2, sort_keys=True))
    if result.error:
        etype = result.error["type"]
        msg = (f"{etype} at event {result.error['event_index']}: "
               f"{result.error['message']}")
        print(f"error: {msg}", file=sys.stderr)
        if etype == "UnknownSnapshotId":
            return EXIT_UNKNOWN_ID
        if etype == "DumpFailure":
            return EXIT_FAULT
        if etype == "TraceError":
            return EXIT_BAD_INPUT
        return EXIT_VIOLATION
    if result.mismatches or leaked:
        first = result.mismatches[0] if result.mismatches else None
        print(f"oracle mismatches: {len(result.mismatches)} "
              f"(first at event {first['event_index'] if first else '-'}), "
              f"leaked blocks: {leaked}", file=sys.stderr)
        return EXIT_VIOLATION
    return EXIT_OK


def cmd_gen(args: argparse.Namespace) -> int:
    settings = _settings(args)
    exact = None
    if args.exact_ro is not None:
        exact = tuple(int(x) for x in args.exact_ro.split(":"))
        if len(exact) != 2:
            print("error: --exact-ro expects RO:MUT", file=sys.stderr)
            return EXIT_BAD_INPUT
    events = generate_trace(settings.seed, length=args.length,
                            base_files=settings.base_files,
                            initial_pages=settings.initial_pages,
                            ro_fraction=args.ro_fraction,
                            exact_segments=exact)
    dump_trace(events, args.out)
    print(f"wrote {len(events)} events to {args.out}")
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    settings = _settings(args)
    if args.workload == "mcts":
        cfg = MctsConfig(seed=settings.seed, budget=args.budget,
                         branching=args.branching,
                         depth_limit=args.depth_limit, gc=settings.gc,
                         pool_capacity=settings.pool_capacity)
        runner = MctsRunner(cfg)
        result = runner.run()
        leaked = runner.close()
        payload = {"kind": "mcts", "config": cfg.as_dict(),
                   "result": result.as_dict(), "leaked_blocks": leaked}
    elif args.workload == "bon":
        result, summary = run_best_of_n(args.n, settings.seed,
                                        config=_run_config(settings))
        payload = {"kind": "bon", "result": result.as_dict(),
                   "summary": summary}
        if result.mismatches:
            if args.report:
                write_report(args.report, payload)
            print(f"oracle mismatches: {len(result.mismatches)}",
                  file=sys.stderr)
            return EXIT_VIOLATION
    elif args.workload == "fanout":
        result = run_rl_fanout(args.n, dirty_pages=args.dirty_pages,
                               template_pages=args.template_pages,
                               steps=args.steps, seed=settings.seed)
        payload = {"kind": "fanout", "result": result.as_dict()}
    elif args.workload == "war":
        points = run_war_sweep(seed=settings.seed)
        payload = {"kind": "war",
                   "result": [p.as_dict() for p in points]}
    else:
        print(f"error: unknown workload {args.workload!r}", file=sys.stderr)
        return EXIT_BAD_INPUT
    if args.report:
        write_report(args.report, payload)
    else:
        print(json.dumps(payload, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_fsck(args: argparse.Namespace) -> int:
    """Replay a trace (or a built-in workout), then scan refcounts and
    frozen digests. ``--corrupt-block`` deliberately breaks a refcount
    first, to prove the scan can fail."""
    settings = _settings(args)
    if args.trace:
        try:
            events = load_trace(args.trace)
        except (TraceError, OSError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_BAD_INPUT
    else:
        events = generate_trace(settings.seed, length=60)
    config = _run_config(settings)
    config.mode = "delta"
    runner = TraceRunner(events, config)
    result = runner.run()
    if result.error:
        print(f"error: {result.error['type']}: {result.error['message']}",
              file=sys.stderr)
        return EXIT_VIOLATION
    manager = runner.manager
    if args.corrupt_block:
        for bid, _ in manager.store.iter_blocks():
            manager.store.ref_block(bid)    # now one holder too many
            break
    violations = integrity.scan(manager)
    for v in violations:
        print(f"fsck: {v}", file=sys.stderr)
    if violations:
        return EXIT_VIOLATION
    leaked = runner.close()
    if leaked and not args.corrupt_block:
        print(f"fsck: {leaked} blocks leaked at teardown", file=sys.stderr)
        return EXIT_VIOLATION
    print("fsck: clean")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="flat key=value config file")
    shared.add_argument("--seed", type=int,
                        help=f"run seed (overrides ${SEED_ENV} and config)")
    shared.add_argument("--gc", help="gc policy: keepall | recency:K | "
                                     "reachability")
    shared.add_argument("--pool", type=int, help="template pool capacity")
    shared.add_argument("--warm", choices=("off", "eager"),
                        help="post-restore page warming")
    ap = argparse.ArgumentParser(
        prog="deltastate",
        description="Coupled checkpoint/rollback engine and workload "
                    "simulator")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("replay", parents=[shared],
                       help="replay a JSON-lines trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--mode", choices=("delta", "oracle", "both"))
    p.add_argument("--fault-dump-at", dest="fault_dump_at", type=int,
                   help="inject one DumpFailure at the first standard "
                        "checkpoint at/after this ordinal")
    p.add_argument("--report", help="write JSON report here (atomic)")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("gen", parents=[shared],
                       help="generate a seeded trace")
    p.add_argument("--out", required=True)
    p.add_argument("--length", type=int, default=120)
    p.add_argument("--ro-fraction", type=float, default=0.35)
    p.add_argument("--exact-ro", help="exact RO:MUT segment counts")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("bench", parents=[shared],
                       help="run a search workload")
    p.add_argument("workload", choices=("mcts", "bon", "fanout", "war"))
    p.add_argument("--budget", type=int, default=200)
    p.add_argument("--branching", type=int, default=3)
    p.add_argument("--depth-limit", type=int, default=8)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--dirty-pages", type=int, default=0)
    p.add_argument("--template-pages", type=int, default=256)
    p.add_argument("--steps", type=int, default=1)
    p.add_argument("--report")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("fsck", parents=[shared],
                       help="run, then verify refcounts and digests")
    p.add_argument("--trace")
    p.add_argument("--corrupt-block", action="store_true",
                   help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_fsck)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:      # bad config / unreadable file
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except UnknownSnapshotId as exc:
        print(f"error: unknown snapshot: {exc}", file=sys.stderr)
        return EXIT_UNKNOWN_ID
    except DumpFailure as exc:
        print(f"error: dump fault: {exc}", file=sys.stderr)
        return EXIT_FAULT
    except TraceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except DeltaStateError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_VIOLATION


if __name__ == "__main__":
    sys.exit(main())
