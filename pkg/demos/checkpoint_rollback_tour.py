#!/usr/bin/env python3
"""Guided tour of the coupled checkpoint/rollback engine.

Walks one StateManager through the whole lifecycle — change-proportional
checkpoints, free lightweight aliases, fast and slow restores, probe
rollback, abort-and-retry under an injected dump fault, recency garbage
collection, and a final integrity audit down to zero live blocks.

Run:  python3 demos/checkpoint_rollback_tour.py
"""
from __future__ import annotations

from deltastate import BLOCK_SIZE, PAGE_SIZE, DumpFailure, GcPolicy, StateManager
from deltastate.integrity import scan


def banner(title: str) -> None:
    print(f"\n=== {title} " + "=" * max(0, 60 - len(title)))


def main() -> None:
    base = {
        "/src/app.py": b"def main():\n    return 1\n" + b"#" * 400,
        "/src/util.py": b"HELP = 'util'\n" + b"." * 9000,   # spans 3 blocks
        "/data/corpus.txt": b"x" * (4 * BLOCK_SIZE),
    }
    memory = {page: bytes([page]) * PAGE_SIZE for page in range(8)}

    banner("setup")
    mgr = StateManager(base_image=base, initial_memory=memory,
                       pool_capacity=2, gc_policy=GcPolicy.parse("keepall"))
    m0 = mgr.storage_metrics()
    print(f"base image: {len(base)} files + {len(memory)} pages -> "
          f"{m0['physical_block_count']} physical blocks, "
          f"{m0['data_bytes_copied']} bytes copied so far")

    banner("change-proportional standard checkpoint")
    mgr.write_file("/src/app.py", 4, b"edit")           # dirties 1 block
    mgr.mem_write(3, b"\xAB" * PAGE_SIZE)               # dirties 1 page
    before = mgr.storage_metrics()["data_bytes_copied"]
    s1, rep = mgr.delta_checkpoint("apply patch")
    after = mgr.storage_metrics()["data_bytes_copied"]
    print(f"{s1}: captured 1 dirty block + 1 dirty page")
    print(f"  bytes copied by the checkpoint itself: {after - before} "
          f"(layer switch + dump are metadata, not copies)")
    print(f"  perceived blocking: {rep.perceived_ms} ms "
          f"(masked by the default 2000 ms overlap window)")

    banner("lightweight checkpoint after read-only commands")
    before = mgr.storage_metrics()["data_bytes_copied"]
    s2, rep = mgr.delta_checkpoint("grep -rn return /src")
    after = mgr.storage_metrics()["data_bytes_copied"]
    print(f"{s2}: read-only exec -> aliased to {s1}, "
          f"{after - before} bytes copied, {rep.perceived_ms} ms perceived")
    print(f"  skip stats so far: {mgr.skip_stats()}")

    banner("fast restore from the template pool")
    mgr.write_file("/src/app.py", 4, b"oops")
    mgr.mem_write(3, b"\xCD" * PAGE_SIZE)
    rep, path = mgr.delta_restore(s1)
    print(f"restore -> {s1} took the {path} path: {rep.perceived_ms} ms")
    print(f"  file back to checkpointed bytes: "
          f"{mgr.read_file('/src/app.py')[:8]!r}")
    print(f"  page 3 back to checkpointed fill: "
          f"0x{mgr.read_page(3)[:1].hex()}")

    banner("slow restore after pool eviction")
    labels = [s1]
    for i in range(3):                  # pool holds 2 -> s1's template evicts
        mgr.write_file("/data/corpus.txt", i * BLOCK_SIZE, b"v2")
        sid, _ = mgr.delta_checkpoint(f"round {i}")
        labels.append(sid)
    rep, path = mgr.delta_restore(s1)
    print(f"after 3 newer checkpoints, restore -> {s1} fell back to the "
          f"{path} path: {rep.perceived_ms} ms (dump-chain replay)")

    banner("value-time probe, rolled back")
    def probe() -> bytes:
        mgr.write_file("/src/app.py", 0, b"PROBE!")
        mgr.mem_write(0, b"\xFF" * PAGE_SIZE)
        return mgr.read_file("/src/app.py")[:6]
    seen = mgr.value_time_test(probe)
    print(f"probe observed {seen!r}; live file is still "
          f"{mgr.read_file('/src/app.py')[:8]!r} and page 0 is "
          f"0x{mgr.read_page(0)[:1].hex()}")

    banner("aborted checkpoint leaves no trace")
    faulty = StateManager(base_image={"/a": b"A" * 100},
                          initial_memory={0: b"\x00" * PAGE_SIZE},
                          fault_dump_at=1)
    faulty.write_file("/a", 0, b"B")
    fs_before = faulty.materialize_fs()
    mem_before = faulty.materialize_memory()
    try:
        faulty.delta_checkpoint("will fault")
    except DumpFailure as exc:
        print(f"injected fault surfaced: {exc}")
    assert faulty.materialize_fs() == fs_before
    assert faulty.materialize_memory() == mem_before
    assert scan(faulty) == []
    sid, _ = faulty.delta_checkpoint("retry")
    print(f"state byte-identical after the abort; retry produced {sid}")
    faulty.close()

    banner("garbage collection (recency keeps the last 1 branch point)")
    mgr.gc_policy = GcPolicy.parse("recency:1")
    for i in range(3):                  # siblings off s1 become prunable
        mgr.delta_restore(s1)
        mgr.write_file("/src/util.py", 0, b"branch%d" % i)
        mgr.delta_checkpoint(f"branch {i}")
    before = mgr.storage_metrics()
    report = mgr.gc()
    after = mgr.storage_metrics()
    print(f"pruned {len(report.pruned)} snapshots: {sorted(report.pruned)}")
    print(f"  physical blocks {before['physical_block_count']} -> "
          f"{after['physical_block_count']} (file blocks freed; dump "
          f"storage stays {after['dump_storage_bytes']} because the pruned "
          f"branches dirtied no memory pages)")
    rep, path = mgr.delta_restore(s1)   # kept ancestors stay restorable
    print(f"  {s1} still restores ({path} path) after the sweep")

    banner("teardown")
    violations = scan(mgr)
    print(f"integrity scan: {len(violations)} violations")
    buckets = sorted(mgr.blocking_breakdown())
    mgr.close()
    print(f"closed; live blocks now "
          f"{mgr.store.stats.physical_block_count} and perceived-cost "
          f"buckets seen this run: {buckets}")


if __name__ == "__main__":
    main()
