"""Trace format, workload generator, and dual-world replay."""

from __future__ import annotations

import io
import json

import pytest

from deltastate.errors import TraceError
from deltastate.searchsim import (Checkpoint, Exec, LlmCall, MemWrite, MkDir,
                                  OracleManager, ReadScan, Restore, RunConfig,
                                  RunTest, TraceRunner, Unlink, WriteFile,
                                  dump_trace, event_from_dict, event_to_dict,
                                  generate_trace, load_trace, parse_trace)
from deltastate.searchsim import test_verdict as verdict_oracle

SAMPLE = [
    WriteFile("/src/a.py", 0, 64, 101),
    MkDir("/data"),
    MemWrite(3, 2, 202),
    Exec("grep foo /src/a.py", ()),
    Exec("sed -i s/a/b/ /src/a.py", (WriteFile("/src/a.py", 0, 8, 303),)),
    LlmCall(125.5),
    Checkpoint("c1"),
    ReadScan("/src/a.py"),
    Restore("c1"),
    Unlink("/src/a.py"),
    RunTest(2, 3, 77),
    Checkpoint("c2"),
]


# -- format ------------------------------------------------------------------

def test_roundtrip_preserves_every_event():
    buf = io.StringIO()
    dump_trace(SAMPLE, buf)
    assert parse_trace(buf.getvalue()) == SAMPLE


def test_file_roundtrip(tmp_path):
    p = tmp_path / "t.jsonl"
    dump_trace(SAMPLE, str(p))
    assert load_trace(str(p)) == SAMPLE


def test_comments_and_blanks_skipped():
    text = ('# a comment\n\n{"op": "mkdir", "path": "/x"}\n'
            '   \n# another\n{"op": "checkpoint", "label": "a"}\n')
    assert parse_trace(text) == [MkDir("/x"), Checkpoint("a")]


def test_write_serializes_length_as_len():
    d = event_to_dict(WriteFile("/f", 4, 16, 9))
    assert d == {"op": "write", "path": "/f", "offset": 4,
                 "len": 16, "seed": 9}
    assert event_from_dict(d) == WriteFile("/f", 4, 16, 9)


@pytest.mark.parametrize("bad,frag", [
    ("not json", "invalid JSON"),
    ('{"path": "/x"}', "op"),
    ('{"op": "warp"}', "warp"),
    ('{"op": "write", "path": "/x"}', "offset"),
    ('{"op": "restore"}', "label"),
    ('{"op": "write", "path": "/x", "offset": "deep", "len": 1, "seed": 0}',
     "bad field"),
])
def test_parse_errors_carry_line_numbers(bad, frag):
    text = '{"op": "mkdir", "path": "/ok"}\n' + bad + "\n"
    with pytest.raises(TraceError) as exc:
        parse_trace(text)
    assert exc.value.lineno == 2
    assert frag in str(exc.value)


def test_exec_effects_nest():
    d = event_to_dict(SAMPLE[4])
    again = event_from_dict(json.loads(json.dumps(d)))
    assert again == SAMPLE[4]


# -- generator ---------------------------------------------------------------

def test_generator_is_deterministic():
    a = generate_trace(42)
    b = generate_trace(42)
    c = generate_trace(43)
    assert a == b
    assert a != c
    assert len(a) <= 120


def test_generator_restores_only_known_labels():
    for seed in range(12):
        events = generate_trace(seed, length=100)
        known = {"root"}
        for ev in events:
            if isinstance(ev, Checkpoint):
                known.add(ev.label)
            elif isinstance(ev, Restore):
                assert ev.label in known
        assert any(isinstance(ev, Checkpoint) for ev in events)


def test_generator_exact_segments():
    events = generate_trace(9, length=400, exact_segments=(6, 10))
    ckpts = [ev for ev in events if isinstance(ev, Checkpoint)]
    assert len(ckpts) == 16
    # replay and confirm the classification split lands exactly
    cfg = RunConfig(seed=9, mode="delta")
    runner = TraceRunner(events, cfg)
    result = runner.run()
    assert result.error is None
    assert result.skip["lightweight"] == 6
    assert result.skip["standard"] == 10
    assert runner.close() == 0


def test_generated_traces_replay_clean():
    for seed in (1, 7, 20):
        events = generate_trace(seed, length=80)
        runner = TraceRunner(events, RunConfig(seed=seed, mode="both"))
        result = runner.run()
        assert result.error is None, result.error
        assert result.mismatches == []
        assert runner.close() == 0


# -- replay ------------------------------------------------------------------

def test_divergence_is_reported_not_hidden():
    events = [WriteFile("/a", 0, 8, "x"), Checkpoint("c1")]
    runner = TraceRunner(events, RunConfig(seed=0, mode="both"))
    # sabotage the oracle after construction: replay must notice at the
    # next boundary comparison
    runner.oracle.fs["/a"] = b"DIFFERENT"
    result = runner.run()
    assert result.mismatches and result.mismatches[0]["kind"] == "fs"
    assert not result.ok
    runner.close()


def test_restore_unknown_label_surfaces_as_error():
    events = [Restore("ghost")]
    runner = TraceRunner(events, RunConfig(seed=0, mode="delta"))
    result = runner.run()
    assert result.error["type"] == "UnknownSnapshotId"
    assert result.error["event_index"] == 0
    runner.close()


def test_injected_dump_failure_surfaces():
    events = [WriteFile("/a", 0, 8, "x"), Checkpoint("c1"),
              WriteFile("/a", 8, 8, "y"), Checkpoint("c2")]
    runner = TraceRunner(events, RunConfig(seed=0, mode="delta",
                                           fault_dump_at=2))
    result = runner.run()
    assert result.error["type"] == "DumpFailure"
    runner.close()


def test_run_test_verdicts_match_seeded_oracle():
    events = [Checkpoint("c"), RunTest(2, 2, 5), RunTest(1, 1, 6),
              Checkpoint("d")]
    runner = TraceRunner(events, RunConfig(seed=3, mode="both"))
    result = runner.run()
    assert result.error is None and result.mismatches == []
    assert result.test_verdicts == [verdict_oracle(5), verdict_oracle(6)]
    # value-time side effects never leak into post-test state
    assert runner.close() == 0


def test_small_pool_forces_slow_restores():
    events = []
    for k in range(5):
        events.append(WriteFile(f"/f{k}", 0, 32, f"s{k}"))
        events.append(Checkpoint(f"c{k}"))
    events.append(Restore("c0"))          # evicted by then
    events.append(Restore("c4"))
    runner = TraceRunner(events, RunConfig(seed=0, mode="delta",
                                           pool_capacity=2))
    result = runner.run()
    assert result.error is None
    assert result.slow_restores >= 1
    assert result.fast_restores + result.slow_restores == 2
    assert runner.close() == 0


def test_result_dict_is_stable_across_reruns():
    events = generate_trace(5, length=60)

    def one():
        runner = TraceRunner(events, RunConfig(seed=5, mode="both"))
        d = runner.run().as_dict()
        runner.close()
        return d

    a, b = one(), one()
    assert "wall_seconds" not in a
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)


def test_oracle_only_mode_runs_standalone():
    events = generate_trace(11, length=60)
    runner = TraceRunner(events, RunConfig(seed=11, mode="oracle"))
    result = runner.run()
    assert result.error is None
    assert result.store_stats == {} and result.blocking == {}
    assert runner.close() == 0


# -- oracle internals --------------------------------------------------------

def test_oracle_write_zero_fills_gaps():
    o = OracleManager({}, {})
    o.write_file("/f", 10, b"xy")
    assert o.fs["/f"] == b"\x00" * 10 + b"xy"
    o.mem_write(2, b"ab")
    assert o.mem[2] == b"ab" + b"\x00" * 4094


def test_oracle_checkpoint_restore_independent_copies():
    o = OracleManager({"/f": b"v1"}, {0: b"m" * 4096})
    o.checkpoint("c")
    o.write_file("/f", 0, b"v2")
    o.restore("c")
    assert o.fs["/f"] == b"v1"
    o.write_file("/f", 0, b"v3")
    o.restore("c")
    assert o.fs["/f"] == b"v1"       # snapshot unaffected by later writes
