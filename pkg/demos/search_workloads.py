#!/usr/bin/env python3
"""Search workloads driving the checkpoint/rollback engine.

Four scenarios, all deterministic for a seed:

  1. MCTS over snapshots — the same search under keepall, recency:2
     (livelocks on restores into pruned ancestors), and reachability GC.
  2. Best-of-N — N branches re-forked from one root, then the winner kept.
  3. RL-style fan-out — N sandbox clones sharing one template's blocks.
  4. Write-amplification — bytes copied per edit, block-sharing vs
     full-copy, plus the storage plateau over 50 same-file checkpoints.

Run:  python3 demos/search_workloads.py
"""
from __future__ import annotations

from deltastate import GcPolicy
from deltastate.searchsim.drivers import (
    reflink_plateau,
    run_best_of_n,
    run_rl_fanout,
    run_war_sweep,
)
from deltastate.searchsim.mcts import MctsConfig, MctsRunner


def banner(title: str) -> None:
    print(f"\n=== {title} " + "=" * max(0, 60 - len(title)))


def run_tree_search() -> None:
    banner("MCTS: one search, three GC policies")
    for policy in ("keepall", "recency:2", "reachability"):
        runner = MctsRunner(MctsConfig(seed=7, budget=120,
                                       gc=GcPolicy.parse(policy)))
        res = runner.run()
        runner.close()
        note = (f"LIVELOCK after {res.iterations} iterations "
                f"(restore streak into pruned ancestors at "
                f"{res.livelock_node})" if res.livelock else
                f"{res.iterations} iterations, {res.terminals} terminals")
        print(f"{policy:13s} {note}")
        print(f"              nodes {res.nodes_created}, failed restores "
              f"{res.failed_restores}, gc prunes {res.gc_prunes}, "
              f"peak-free store: {res.store_stats['physical_block_count']} "
              f"blocks live at finish")
        skip = res.skip
        print(f"              checkpoint mix: {skip['lightweight']} "
              f"lightweight / {skip['standard']} standard "
              f"(skip ratio {skip['skip_ratio']:.2f})")


def run_best_of_n_demo() -> None:
    banner("best-of-N: fork N branches, keep the winner")
    result, summary = run_best_of_n(6, seed=42, steps=4)
    print(f"{summary['branches']} branches x {summary['steps']} steps: "
          f"winner {summary['best_label']}")
    print(f"  root restores {summary['root_restores']} "
          f"({summary['restore_paths']['fast']} fast / "
          f"{summary['restore_paths']['slow']} slow, "
          f"{summary['restore_cost_ms']} ms perceived total), "
          f"leaked blocks {summary['leaked_blocks']}")
    print(f"  events replayed {result.events}, "
          f"checkpoints {result.checkpoints}")


def run_fanout_demo() -> None:
    banner("RL fan-out: clones share the template until they write")
    idle = run_rl_fanout(16, dirty_pages=0, template_pages=256)
    print(f"16 zero-write clones of a 256-page template: "
          f"{idle.zero_write_physical_blocks} physical blocks total "
          f"(the template's own {idle.template_physical_blocks})")
    busy = run_rl_fanout(4, dirty_pages=32, template_pages=256, steps=3)
    mb = [round(b / 1e6, 3) for b in busy.private_bytes_per_child]
    print(f"4 clones x 3 steps x 32 dirty pages: private MB per clone "
          f"{mb[:4]}..., aggregate {busy.aggregate_private_bytes / 1e6:.3f} MB")
    timed = run_rl_fanout(8, template_pages=256, sandbox_seconds=0.1)
    print(f"rollout accounting at 0.1 s sandbox resets: "
          f"gpu_util {timed.gpu_util} "
          f"(generate {timed.sandbox_seconds} s resets folded into the "
          f"serving window)")


def run_war_demo() -> None:
    banner("write amplification: bytes copied per edit")
    points = run_war_sweep(seed=11, offsets_per_point=3)
    print(f"{'mode':9s} {'file':>9s} {'edit':>6s} {'copied':>9s}")
    seen = set()
    for pt in points:                     # one offset sample per size combo
        combo = (pt.mode, pt.file_size, pt.edit_size)
        if combo in seen:
            continue
        seen.add(combo)
        print(f"{pt.mode:9s} {pt.file_size:9d} {pt.edit_size:6d} "
              f"{pt.bytes_copied:9d}")
    plateau = reflink_plateau(seed=11)
    print(f"\nplateau: {plateau['checkpoints']} checkpoints editing one "
          f"{plateau['file_size']}-byte file with block sharing: "
          f"{plateau['base_blocks']} base blocks -> "
          f"{plateau['final_blocks']} final "
          f"(+1 block per checkpoint, not +{plateau['file_size'] // 4096})")


def main() -> None:
    run_tree_search()
    run_best_of_n_demo()
    run_fanout_demo()
    run_war_demo()


if __name__ == "__main__":
    main()
