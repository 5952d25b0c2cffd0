"""Coupled checkpoint/restore coordination: costs, classification,
transactionality, value-time brackets, and garbage collection."""

from __future__ import annotations

import pytest

from deltastate.errors import (DumpFailure, LightweightUnsound,
                               UnknownSnapshotId)
from deltastate.statemanager import (CostModel, ExecAction, GcPolicy,
                                     NodeFlags, StateManager,
                                     StructuralAction)

FAST_MS = 5.14
SLOW_MS = 8.04
CKPT_CRITICAL_MS = 14.57


def make(**kw):
    return StateManager(base_image={"/src/app.py": b"print(1)\n"},
                        initial_memory={0: b"h" * 4096}, **kw)


# -- cost composition --------------------------------------------------------

def test_cost_model_lane_composition():
    m = CostModel()
    assert m.checkpoint_blocking(0.0) == pytest.approx(CKPT_CRITICAL_MS)
    assert m.checkpoint_blocking(4.57) == pytest.approx(10.0)
    assert m.checkpoint_blocking(2000.0) == 0.0
    assert m.checkpoint_blocking(1e9) == 0.0          # never negative
    assert m.restore_fast_blocking() == pytest.approx(FAST_MS)
    assert m.restore_slow_blocking() == pytest.approx(SLOW_MS)
    # the perceived stall is parallel-lane max plus the dispatch tail
    assert m.restore_fast_blocking() == pytest.approx(
        max(m.t_ioctl_rs, m.t_tpl_fork) + m.t_dispatch_fast)
    assert m.restore_slow_blocking() == pytest.approx(
        max(m.t_ioctl_rs, m.t_criu_rs) + m.t_dispatch_slow)
    assert m.checkpoint_blocking(None) == pytest.approx(
        max(0.0, m.t_ioctl_ck + m.t_dump_plus_fork - m.llm_window))


def test_report_costs_match_model():
    mgr = make()
    try:
        mgr.write_file("/a", 0, b"x")
        _, ck = mgr.delta_checkpoint("edit")
        assert ck.perceived_ms == 0.0        # default 2000 ms window masks it
        mgr.set_llm_window(0.0)
        mgr.write_file("/a", 1, b"y")
        sid, ck2 = mgr.delta_checkpoint("edit")
        assert ck2.perceived_ms == pytest.approx(CKPT_CRITICAL_MS)
        rs, path = mgr.delta_restore(sid)
        assert (path, rs.perceived_ms) == ("fast", pytest.approx(FAST_MS))
        _, lw = mgr.delta_checkpoint("ls -la")
        assert lw.perceived_ms == 0.0 and lw.tag == "lightweight"
    finally:
        mgr.close()
    assert mgr.store.stats.physical_block_count == 0


def test_window_is_sticky_until_changed():
    mgr = make()
    try:
        mgr.set_llm_window(10.0)
        mgr.write_file("/a", 0, b"x")
        _, r1 = mgr.delta_checkpoint("e")
        mgr.write_file("/a", 0, b"y")
        _, r2 = mgr.delta_checkpoint("e")
        assert r1.perceived_ms == r2.perceived_ms == pytest.approx(4.57)
    finally:
        mgr.close()


# -- classification ----------------------------------------------------------

def test_read_only_classification_word_boundaries():
    mgr = make()
    try:
        cls = mgr.classifier
        assert cls.is_read_only("grep -rn foo src/")
        assert cls.is_read_only("  ls   -la  ")            # normalized
        assert cls.is_read_only("git diff HEAD~1")
        assert cls.is_read_only("git diff")
        assert not cls.is_read_only("git difftool HEAD")   # no prefix bleed
        assert not cls.is_read_only("catalog rebuild")
        assert not cls.is_read_only("python -m pytest tests/")
        assert cls.is_read_only("python -m pytest --collect-only tests/")
        assert cls.matching_pattern("find . -name x") == "find"
    finally:
        mgr.close()


def test_lightweight_checkpoint_is_free_and_aliased():
    mgr = make()
    try:
        mgr.write_file("/a", 0, b"x")
        std, _ = mgr.delta_checkpoint("edit /a")
        before = mgr.store.stats.snapshot()
        layers_before = mgr.fs.layer_count()
        lw1, _ = mgr.delta_checkpoint(ExecAction(("grep foo /a",
                                                  "cat /a")))
        lw2, _ = mgr.delta_checkpoint("ls /")
        after = mgr.store.stats.snapshot()
        assert after.physical_block_count == before.physical_block_count
        assert after.data_bytes_copied == before.data_bytes_copied
        assert after.metadata_ops == before.metadata_ops
        assert mgr.fs.layer_count() == layers_before
        assert mgr.registry[lw1].alias_of == std
        assert mgr.registry[lw2].alias_of == std   # chains collapse
        # restoring the alias lands on the standard snapshot's content
        mgr.write_file("/a", 0, b"Z")
        report, path = mgr.delta_restore(lw2)
        assert path == "fast"
        assert mgr.read_file("/a") == b"x"
    finally:
        mgr.close()


def test_mixed_or_empty_actions_are_standard():
    mgr = make()
    try:
        sid, _ = mgr.delta_checkpoint(ExecAction(("grep a /x", "rm /x")))
        assert mgr.registry[sid].tag == "standard"
        sid2, _ = mgr.delta_checkpoint(ExecAction(()))
        assert mgr.registry[sid2].tag == "standard"
        sid3, _ = mgr.delta_checkpoint(StructuralAction("boundary"))
        assert mgr.registry[sid3].tag == "standard"
    finally:
        mgr.close()


def test_lightweight_verification_catches_hidden_writes():
    mgr = make()
    try:
        mgr.delta_checkpoint("seed")
        mgr.write_file("/sneaky", 0, b"oops")     # state changed anyway
        with pytest.raises(LightweightUnsound) as exc:
            mgr.delta_checkpoint("grep foo /src/app.py")
        assert exc.value.pattern == "grep"
        # memory-side divergence is caught too
        mgr.delta_checkpoint("fixup")
        mgr.mem_write(7, b"m" * 4096)
        with pytest.raises(LightweightUnsound):
            mgr.delta_checkpoint("cat /src/app.py")
    finally:
        mgr.close()


def test_verification_can_be_disabled():
    mgr = make(verify_lightweight=False)
    try:
        mgr.delta_checkpoint("seed")
        mgr.write_file("/sneaky", 0, b"oops")
        sid, _ = mgr.delta_checkpoint("grep foo /")   # trusted, not checked
        assert mgr.registry[sid].tag == "lightweight"
    finally:
        mgr.close()


# -- restore -----------------------------------------------------------------

def test_restore_roundtrip_restores_both_planes():
    mgr = make()
    try:
        mgr.write_file("/work/n.txt", 0, b"v1")
        mgr.mem_write(3, b"A" * 4096)
        sid, _ = mgr.delta_checkpoint("step1")
        fs_view = mgr.materialize_fs()
        mem_view = mgr.materialize_memory()
        mgr.write_file("/work/n.txt", 0, b"v2")
        mgr.write_file("/work/extra", 0, b"junk")
        mgr.unlink("/src/app.py")
        mgr.mem_write(3, b"B" * 4096)
        mgr.mem_write(9, b"C" * 4096)
        mgr.delta_restore(sid)
        assert mgr.materialize_fs() == fs_view
        assert mgr.materialize_memory() == mem_view
        # cached handles were refreshed: writes go to the new stack
        mgr.write_file("/work/n.txt", 0, b"v3")
        assert mgr.read_file("/work/n.txt") == b"v3"
    finally:
        mgr.close()


def test_restore_unknown_and_pruned_ids():
    mgr = make()
    try:
        with pytest.raises(UnknownSnapshotId):
            mgr.delta_restore("nope")
        mgr.write_file("/a", 0, b"1")
        s1, _ = mgr.delta_checkpoint("a")
        mgr.delta_restore(mgr.root_id)            # branch off the root
        mgr.write_file("/a", 0, b"2")
        s2, _ = mgr.delta_checkpoint("b")
        mgr.gc_policy = GcPolicy.recency(1)
        mgr.gc()
        # s1 sits on a dead sibling branch: pruned, then unrestorable
        assert mgr.registry[s1].status == "pruned"
        with pytest.raises(UnknownSnapshotId):
            mgr.delta_restore(s1)
        mgr.delta_restore(s2)        # survivor still works
    finally:
        mgr.close()


def test_evicted_snapshot_takes_slow_path_and_recovers():
    mgr = StateManager(pool_capacity=2)
    try:
        sids = []
        for k in range(4):
            mgr.write_file(f"/f{k}", 0, f"gen{k}".encode())
            sid, _ = mgr.delta_checkpoint("w")
            sids.append(sid)
        # root + 4 checkpoints through a 2-slot pool: early ones evicted
        assert mgr.registry[sids[0]].template_present is False
        assert mgr.registry[sids[-1]].template_present is True
        report, path = mgr.delta_restore(sids[0])
        assert path == "slow" and report.perceived_ms == pytest.approx(SLOW_MS)
        assert mgr.read_file("/f0") == b"gen0"
        with pytest.raises(Exception):
            mgr.read_file("/f1")                      # later files absent
        assert mgr.registry[sids[0]].template_present is True
        report2, path2 = mgr.delta_restore(sids[0])   # re-seeded: now fast
        assert path2 == "fast"
    finally:
        mgr.close()
    assert mgr.store.stats.physical_block_count == 0


def test_cursor_travels_with_restore():
    mgr = make()
    try:
        mgr.advance_cursor(5)
        mgr.write_file("/a", 0, b"x")
        sid, _ = mgr.delta_checkpoint("w")
        mgr.advance_cursor(10)
        assert mgr.space.continuation.cursor == 15
        mgr.delta_restore(sid)
        assert mgr.space.continuation.cursor == 5
    finally:
        mgr.close()


# -- abort transactionality --------------------------------------------------

def test_failed_dump_aborts_whole_checkpoint():
    mgr = make(fault_dump_at=2)
    try:
        mgr.write_file("/a", 0, b"one")
        mgr.delta_checkpoint("w")                     # ordinal 1
        mgr.write_file("/a", 0, b"two")
        mgr.mem_write(4, b"M" * 4096)
        fs_before = mgr.materialize_fs()
        mem_before = mgr.materialize_memory()
        registry_before = set(mgr.registry)
        gen_before = mgr.fs.checkpoint_gen
        with pytest.raises(DumpFailure):
            mgr.delta_checkpoint("w")                 # ordinal 2: injected
        assert mgr.materialize_fs() == fs_before
        assert mgr.materialize_memory() == mem_before
        assert set(mgr.registry) == registry_before
        assert not mgr.space.quiesced                 # workload resumed
        assert mgr.fs.checkpoint_gen > gen_before     # forward-only undo
        # the transaction machinery is unharmed: a retry works
        sid, _ = mgr.delta_checkpoint("w")
        assert mgr.registry[sid].tag == "standard"
        mgr.write_file("/a", 0, b"three")
        mgr.delta_restore(sid)
        assert mgr.read_file("/a") == b"two"
    finally:
        mgr.close()
    assert mgr.store.stats.physical_block_count == 0


# -- value-time bracket ------------------------------------------------------

def test_value_time_test_rolls_back_unconditionally():
    mgr = make()
    try:
        mgr.write_file("/code", 0, b"base")
        mgr.delta_checkpoint("w")
        snapshot = (mgr.materialize_fs(), mgr.materialize_memory())

        def probe():
            mgr.write_file("/tmp_result", 0, b"scratch" * 100)
            mgr.mem_write(50, b"S" * 4096)
            return {"passed": True, "score": 0.7}

        value = mgr.value_time_test(probe)
        assert value == {"passed": True, "score": 0.7}
        assert (mgr.materialize_fs(), mgr.materialize_memory()) == snapshot

        def boom():
            mgr.write_file("/junk", 0, b"x")
            raise RuntimeError("test crashed")

        with pytest.raises(RuntimeError):
            mgr.value_time_test(boom)
        assert (mgr.materialize_fs(), mgr.materialize_memory()) == snapshot
        # bracket nodes are internal + consumed: invisible to skip stats
        internals = [n for n in mgr.registry.values() if n.internal]
        assert len(internals) == 2
        assert all(n.consumed for n in internals)
        assert mgr.skip_stats()["standard"] == 1
        # while parked on post-bracket state they anchor the dump lineage,
        # but rolling back to a committed snapshot orphans them and the
        # next pruning sweep reclaims both
        committed = mgr.registry[internals[0].parent_id]
        assert committed.internal is False
        bracket_images = [n.dump_image_id for n in internals]
        mgr.delta_restore(committed.snapshot_id)
        mgr.gc_policy = GcPolicy.reachability()
        mgr.gc()
        assert all(mgr.registry[n.snapshot_id].status == "pruned"
                   for n in internals)
        assert all(img not in mgr.engine.images for img in bracket_images)
    finally:
        mgr.close()


def test_keepall_retains_consumed_brackets_until_gc():
    mgr = make()
    try:
        mgr.delta_checkpoint("w")
        mgr.value_time_test(lambda: 1)
        live = [n for n in mgr.registry.values() if n.status != "pruned"]
        assert any(n.internal for n in live)    # nothing auto-pruned
    finally:
        mgr.close()


# -- gc ----------------------------------------------------------------------

def build_chain(mgr, n):
    sids = []
    for k in range(n):
        mgr.write_file(f"/f{k}", 0, b"d")
        sid, _ = mgr.delta_checkpoint("w")
        sids.append(sid)
    return sids


def test_keepall_never_prunes():
    mgr = make()
    try:
        build_chain(mgr, 5)
        report = mgr.gc()
        assert report.pruned == []
        assert len(report.kept) == 6          # root + 5
    finally:
        mgr.close()


def test_recency_window_with_ancestry_closure():
    mgr = make(gc_policy=GcPolicy.parse("recency:2"))
    try:
        sids = build_chain(mgr, 5)
        report = mgr.gc()
        # base = newest two, but each dump image chains to its parent's,
        # so the whole ancestor line of the keepers must survive
        assert set(report.kept) >= {sids[-1], sids[-2]}
        for kept in report.kept:
            node = mgr.registry[kept]
            assert node.status != "pruned"
            img = node.dump_image_id
            while img is not None:
                assert img in mgr.engine.images
                img = mgr.engine.images[img].parent
        # every restore of a survivor must still work
        mgr.delta_restore(sids[-2])
        assert mgr.read_file("/f3") == b"d"
    finally:
        mgr.close()


def test_alias_closure_keeps_standard_target():
    mgr = make()
    try:
        mgr.write_file("/a", 0, b"x")
        std, _ = mgr.delta_checkpoint("w")
        lw, _ = mgr.delta_checkpoint("grep a /a")
        # a view that keeps only the lightweight node must drag in its target
        mgr.gc_policy = GcPolicy.reachability()
        view = {sid: NodeFlags(failed=True) for sid in mgr.registry
                if sid not in (lw, mgr.current_node_id)}
        report = mgr.gc(view)
        assert std in report.kept
        mgr.delta_restore(lw)
        assert mgr.read_file("/a") == b"x"
    finally:
        mgr.close()


def test_reachability_prunes_flagged_nodes():
    mgr = make(gc_policy=GcPolicy.reachability())
    try:
        sids = build_chain(mgr, 4)
        flags = {
            sids[0]: NodeFlags(failed=True),
            sids[1]: NodeFlags(duplicate=True),
            sids[2]: NodeFlags(terminal=True),
            sids[3]: NodeFlags(),                 # frontier: kept
        }
        report = mgr.gc(flags)
        assert sids[2] in report.kept and sids[3] in report.kept
        # failed/duplicate may only survive via someone's ancestry closure
        for sid in report.pruned:
            assert flags[sid].failed or flags[sid].duplicate
        storage = mgr.storage_metrics()
        assert storage["registered_snapshots"] == len(report.kept)
    finally:
        mgr.close()


def test_linear_chain_survives_recency_via_ancestry():
    """On an unbranched chain every older dump is an ancestor of the
    newest, so a recency window can't reclaim anything."""
    mgr = make(gc_policy=GcPolicy.recency(1))
    try:
        build_chain(mgr, 4)
        report = mgr.gc()
        assert report.pruned == []
    finally:
        mgr.close()


def test_gc_report_storage_delta():
    mgr = make(gc_policy=GcPolicy.recency(1))
    try:
        # sibling branches off the root: only the newest leaf's line survives
        for k in range(5):
            mgr.delta_restore(mgr.root_id)
            mgr.write_file(f"/branch{k}", 0, b"d" * 9000)
            mgr.delta_checkpoint("w")
        report = mgr.gc()
        assert report.after["dump_storage_bytes"] <= \
            report.before["dump_storage_bytes"]
        assert report.after["registered_snapshots"] < \
            report.before["registered_snapshots"]
        assert report.policy == "recency:1"
    finally:
        mgr.close()


# -- stats -------------------------------------------------------------------

def test_skip_stats_ratio():
    mgr = make()
    try:
        for cmd in ("edit a", "grep x", "ls", "edit b", "cat y", "find z"):
            if cmd.split()[0] in ("edit",):
                mgr.write_file("/" + cmd.split()[1], 0, b"1")
            mgr.delta_checkpoint(cmd)
        stats = mgr.skip_stats()
        assert stats == {"lightweight": 4, "standard": 2,
                         "skip_ratio": pytest.approx(4 / 6)}
    finally:
        mgr.close()


def test_blocking_breakdown_buckets():
    mgr = make()
    try:
        mgr.set_llm_window(0.0)
        mgr.write_file("/a", 0, b"1")
        s1, _ = mgr.delta_checkpoint("w")
        mgr.delta_checkpoint("ls /")
        mgr.delta_restore(s1)
        bb = mgr.blocking_breakdown()
        assert bb["std_ck"]["count"] == 2     # root + one explicit
        assert bb["std_ck"]["mean_ms"] > 0
        assert bb["lw_ck"] == {"count": 1, "mean_ms": 0.0, "p95_ms": 0.0}
        assert bb["std_rs"]["count"] == 1
        assert bb["std_rs"]["mean_ms"] == pytest.approx(FAST_MS)
        assert bb["lw_rs"]["count"] == 0
    finally:
        mgr.close()


def test_close_releases_every_block():
    mgr = make()
    sids = build_chain(mgr, 3)
    mgr.delta_restore(sids[0])
    mgr.value_time_test(lambda: None)
    mgr.close()
    assert mgr.store.stats.physical_block_count == 0
    mgr.close()                               # idempotent
