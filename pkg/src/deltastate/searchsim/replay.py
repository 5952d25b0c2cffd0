"""Trace replay with optional lockstep oracle validation.

``mode="delta"`` drives only the layered engine, ``mode="oracle"`` only
the full-copy shadow, ``mode="both"`` drives them in lockstep and compares
full (file, memory) materializations at every checkpoint, restore and
test boundary. Mismatches are collected with their event index.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from ..errors import UnknownSnapshotId
from ..statemanager import (Classifier, CostModel, ExecAction, GcPolicy,
                            StateManager, StructuralAction)
from ..util import seeded_bytes
from .oracle import OracleManager
from .trace import (Checkpoint, Event, Exec, LlmCall, MemWrite, MkDir,
                    ReadScan, Restore, RunTest, Unlink, WriteFile)


@dataclass
class RunConfig:
    """Everything needed to rebuild identical engine and oracle worlds."""

    seed: int = 0
    mode: str = "both"                    # delta | oracle | both
    base_files: int = 6
    base_file_size: int = 2048
    initial_pages: int = 8
    pool_capacity: int = 8
    gc: GcPolicy = field(default_factory=GcPolicy.keep_all)
    warm_mode: str = "off"
    fault_dump_at: int | None = None
    verify_lightweight: bool = True
    cost_model: CostModel = field(default_factory=CostModel)
    classifier: Classifier = field(default_factory=Classifier)
    recorder: object = None               # optional store op-log tap

    def base_image(self) -> dict[str, bytes]:
        return {f"/src/f{i}.py": seeded_bytes(f"base:{self.seed}:{i}",
                                              self.base_file_size)
                for i in range(self.base_files)}

    def initial_memory(self) -> dict[int, bytes]:
        return {p: seeded_bytes(f"page:{self.seed}:{p}", 4096)
                for p in range(self.initial_pages)}

    def as_dict(self) -> dict:
        return {
            "seed": self.seed, "mode": self.mode,
            "base_files": self.base_files,
            "base_file_size": self.base_file_size,
            "initial_pages": self.initial_pages,
            "pool_capacity": self.pool_capacity,
            "gc": self.gc.describe(), "warm_mode": self.warm_mode,
            "fault_dump_at": self.fault_dump_at,
            "verify_lightweight": self.verify_lightweight,
        }


@dataclass
class ReplayResult:
    events: int
    checkpoints: int
    restores: int
    mismatches: list[dict]
    blocking: dict
    skip: dict
    store_stats: dict
    storage: dict
    fast_restores: int
    slow_restores: int
    test_verdicts: list[str]
    wall_seconds: float
    error: dict | None = None

    @property
    def ok(self) -> bool:
        return not self.mismatches and self.error is None

    def as_dict(self) -> dict:
        # wall_seconds deliberately left out: reports must be byte-stable
        # across reruns of one seed, timestamp aside
        return {
            "events": self.events, "checkpoints": self.checkpoints,
            "restores": self.restores, "mismatches": self.mismatches,
            "blocking": self.blocking, "skip": self.skip,
            "store_stats": self.store_stats, "storage": self.storage,
            "fast_restores": self.fast_restores,
            "slow_restores": self.slow_restores,
            "test_verdicts": self.test_verdicts,
            "error": self.error, "ok": self.ok,
        }


def test_verdict(seed: int) -> str:
    """Seeded pass/fail oracle shared by engine and shadow."""
    import random
    return "pass" if random.Random(f"verdict:{seed}").random() < 0.5 \
        else "fail"


class TraceRunner:
    def __init__(self, events: Sequence[Event], config: RunConfig):
        self.events = list(events)
        self.config = config
        self.manager: StateManager | None = None
        self.oracle: OracleManager | None = None
        if config.mode not in ("delta", "oracle", "both"):
            raise ValueError(f"unknown mode {config.mode!r}")
        if config.mode in ("delta", "both"):
            self.manager = StateManager(
                config.base_image(), config.initial_memory(),
                pool_capacity=config.pool_capacity,
                cost_model=config.cost_model, classifier=config.classifier,
                gc_policy=config.gc, warm_mode=config.warm_mode,
                verify_lightweight=config.verify_lightweight,
                fault_dump_at=config.fault_dump_at,
                recorder=config.recorder)
        if config.mode in ("oracle", "both"):
            self.oracle = OracleManager(config.base_image(),
                                        config.initial_memory())
            self.oracle.checkpoint("root")
        self.labels: dict[str, str] = {}
        if self.manager is not None:
            self.labels["root"] = self.manager.root_id
        self.mismatches: list[dict] = []
        self.test_verdicts: list[str] = []
        self._pending_cmds: list[str] = []
        self._pending_mutation = False
        self._restores = 0
        self._fast = 0
        self._slow = 0

    # -- event application --------------------------------------------------

    def _apply_state_event(self, ev: Event) -> None:
        """Events that touch live state; same effect on both worlds."""
        m, o = self.manager, self.oracle
        if isinstance(ev, WriteFile):
            data = seeded_bytes(ev.seed, ev.length)
            if m:
                m.write_file(ev.path, ev.offset, data)
            if o:
                o.write_file(ev.path, ev.offset, data)
            self._pending_mutation = True
        elif isinstance(ev, MemWrite):
            for i in range(ev.count):
                data = seeded_bytes(f"{ev.seed}:{ev.page + i}", 4096)
                if m:
                    m.mem_write(ev.page + i, data)
                if o:
                    o.mem_write(ev.page + i, data)
            self._pending_mutation = True
        elif isinstance(ev, Unlink):
            if m:
                m.unlink(ev.path)
            if o:
                o.unlink(ev.path)
            self._pending_mutation = True
        elif isinstance(ev, MkDir):
            if m:
                m.mkdir(ev.path)
            if o:
                o.mkdir(ev.path)
            self._pending_mutation = True
        elif isinstance(ev, ReadScan):
            got = m.read_file(ev.path) if m else None
            want = o.read_file(ev.path) if o else None
            if m and o and got != want:
                self._note_mismatch("read", ev.path)
        elif isinstance(ev, Exec):
            for sub in ev.effects:
                self._apply_state_event(sub)
            self._pending_cmds.append(ev.cmd)
        else:
            raise AssertionError(type(ev))

    def _descriptor(self):
        if self._pending_mutation or not self._pending_cmds:
            return StructuralAction()
        return ExecAction(tuple(self._pending_cmds))

    def _reset_pending(self) -> None:
        self._pending_cmds = []
        self._pending_mutation = False

    def _note_mismatch(self, kind: str, detail, index: int | None = None):
        self.mismatches.append({"event_index": self._index if index is None
                                else index, "kind": kind, "detail": detail})

    def _compare_boundary(self, where: str) -> None:
        if not (self.manager and self.oracle):
            return
        got_fs = self.manager.materialize_fs()
        want_fs = dict(self.oracle.fs)
        if got_fs != want_fs:
            diff = sorted(set(got_fs) ^ set(want_fs)) or \
                sorted(p for p in got_fs if got_fs[p] != want_fs.get(p))
            self._note_mismatch("fs", {"where": where, "paths": diff[:8]})
        got_mem = self.manager.materialize_memory()
        want_mem = dict(self.oracle.mem)
        if got_mem != want_mem:
            diff = sorted(set(got_mem) ^ set(want_mem)) or \
                sorted(p for p in got_mem if got_mem[p] != want_mem.get(p))
            self._note_mismatch("memory", {"where": where, "pages": diff[:8]})

    def _run_test_body(self, ev: RunTest):
        m = self.manager
        for i in range(ev.files):
            m.write_file(f"/work/t{ev.seed % 97}_{i}.tmp", 0,
                         seeded_bytes(f"tf:{ev.seed}:{i}", 1024))
        for j in range(ev.pages):
            m.mem_write(900 + j, seeded_bytes(f"tp:{ev.seed}:{j}", 4096))
        return test_verdict(ev.seed)

    # -- main loop ----------------------------------------------------------

    def run(self) -> ReplayResult:
        start = time.monotonic()
        error = None
        checkpoints = 0
        try:
            for self._index, ev in enumerate(self.events):
                if isinstance(ev, (WriteFile, MemWrite, Unlink, MkDir,
                                   ReadScan, Exec)):
                    self._apply_state_event(ev)
                elif isinstance(ev, LlmCall):
                    if self.manager:
                        self.manager.set_llm_window(ev.window_ms)
                elif isinstance(ev, Checkpoint):
                    if self.manager:
                        sid, _ = self.manager.delta_checkpoint(
                            self._descriptor())
                        self.labels[ev.label] = sid
                    if self.oracle:
                        self.oracle.checkpoint(ev.label)
                    self._reset_pending()
                    checkpoints += 1
                    self._compare_boundary(f"checkpoint:{ev.label}")
                elif isinstance(ev, Restore):
                    if self.manager:
                        sid = self.labels.get(ev.label)
                        if sid is None:
                            raise UnknownSnapshotId(
                                f"label {ev.label!r} at event {self._index}")
                        _, path = self.manager.delta_restore(sid)
                        if path == "fast":
                            self._fast += 1
                        else:
                            self._slow += 1
                    if self.oracle:
                        self.oracle.restore(ev.label)
                    self._reset_pending()
                    self._restores += 1
                    self._compare_boundary(f"restore:{ev.label}")
                elif isinstance(ev, RunTest):
                    got = want = None
                    if self.manager:
                        got = self.manager.value_time_test(
                            lambda ev=ev: self._run_test_body(ev))
                        self.test_verdicts.append(got)
                    if self.oracle:
                        want = test_verdict(ev.seed)
                    if got is not None and want is not None and got != want:
                        self._note_mismatch("verdict", {"got": got,
                                                        "want": want})
                    self._compare_boundary("run_test")
                else:
                    raise AssertionError(type(ev))
        except Exception as exc:       # surfaced in the result, not lost
            error = {"type": type(exc).__name__, "message": str(exc),
                     "event_index": getattr(self, "_index", None)}
        m = self.manager
        result = ReplayResult(
            events=len(self.events), checkpoints=checkpoints,
            restores=self._restores, mismatches=self.mismatches,
            blocking=m.blocking_breakdown() if m else {},
            skip=m.skip_stats() if m else {},
            store_stats=m.store.stats.as_dict() if m else {},
            storage=m.storage_metrics() if m else {},
            fast_restores=self._fast, slow_restores=self._slow,
            test_verdicts=self.test_verdicts,
            wall_seconds=time.monotonic() - start, error=error)
        return result

    def close(self) -> int:
        """Tear down the engine; returns blocks left (0 when leak-free)."""
        if self.manager is None:
            return 0
        self.manager.close()
        return self.manager.store.stats.physical_block_count
