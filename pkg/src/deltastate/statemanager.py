"""Coupled checkpoint/restore coordination.

One :class:`StateManager` binds a layer stack and an address space over a
shared block store. ``delta_checkpoint`` performs the paired capture
(quiesce, layer switch, incremental dump, template fork) as a transaction:
a dump fault unwinds the switch and registers nothing. ``delta_restore``
flips both sides back and reports the logical blocking time of the path it
took. Action descriptors that are pure read-only commands collapse to
lightweight alias checkpoints with zero store delta.

Pruning is driven by :meth:`gc` under a pluggable policy; keep decisions
close over dump-chain ancestry so no retained snapshot ever references a
dropped delta.
"""

from __future__ import annotations

import itertools
import threading
from copy import deepcopy
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

from .blockstore import BLOCK_SIZE, BlockStore, ShareMode
from .errors import (DumpFailure, LightweightUnsound, NotFound,
                     UnknownSnapshotId)
from .layerfs import LayerConfig, LayerFs, OpenMode
from .procstate import PAGE_SIZE, ProcessEngine

DEFAULT_READ_ONLY_PATTERNS = (
    "grep",
    "cat",
    "find",
    "ls",
    "git diff",
    "python -m pytest --collect-only",
)


@dataclass(frozen=True)
class CostModel:
    """Logical per-operation latencies in milliseconds.

    Dispatch residuals are the measured end-to-end restore times minus
    their dominant lane, so composed totals land exactly on the measured
    figures: ``max(1.66, 3.75) + 1.39 = 5.14`` fast,
    ``max(1.66, 7.25) + 0.79 = 8.04`` slow.
    """

    t_ioctl_ck: float = 1.12        # checkpoint layer switch
    t_ioctl_rs: float = 1.66        # restore layer switch
    t_dump_plus_fork: float = 13.45  # incremental dump + template fork
    t_tpl_fork: float = 3.75        # clone from pooled template
    t_criu_rs: float = 7.25         # dump-chain replay restore
    t_dispatch_fast: float = 1.39
    t_dispatch_slow: float = 0.79
    llm_window: float = 2000.0      # default masking window

    def checkpoint_lanes(self) -> dict[str, float]:
        return {"ioctl_ck": self.t_ioctl_ck,
                "dump_plus_fork": self.t_dump_plus_fork}

    def checkpoint_blocking(self, window: float | None = None) -> float:
        """Perceived stall: overlappable work minus the masking window."""
        w = self.llm_window if window is None else window
        return max(0.0, self.t_ioctl_ck + self.t_dump_plus_fork - w)

    def restore_fast_lanes(self) -> dict[str, float]:
        return {"ioctl_rs": self.t_ioctl_rs, "tpl_fork": self.t_tpl_fork,
                "dispatch": self.t_dispatch_fast}

    def restore_fast_blocking(self) -> float:
        return max(self.t_ioctl_rs, self.t_tpl_fork) + self.t_dispatch_fast

    def restore_slow_lanes(self) -> dict[str, float]:
        return {"ioctl_rs": self.t_ioctl_rs, "chain_replay": self.t_criu_rs,
                "dispatch": self.t_dispatch_slow}

    def restore_slow_blocking(self) -> float:
        return max(self.t_ioctl_rs, self.t_criu_rs) + self.t_dispatch_slow


@dataclass(frozen=True)
class Classifier:
    """Prefix matcher deciding which commands cannot have changed state."""

    read_only_patterns: tuple[str, ...] = DEFAULT_READ_ONLY_PATTERNS

    def matching_pattern(self, cmd: str) -> str | None:
        norm = " ".join(cmd.split())
        for pat in self.read_only_patterns:
            p = " ".join(pat.split())
            if norm == p or norm.startswith(p + " "):
                return pat
        return None

    def is_read_only(self, cmd: str) -> bool:
        return self.matching_pattern(cmd) is not None


@dataclass(frozen=True)
class ExecAction:
    """Checkpoint descriptor: only these commands ran since the last one."""

    commands: tuple[str, ...]


@dataclass(frozen=True)
class StructuralAction:
    """Checkpoint descriptor: direct state mutation happened."""

    kind: str = "mutation"


ActionDescriptor = ExecAction | StructuralAction


@dataclass
class SnapshotNode:
    snapshot_id: str
    parent_id: str | None
    tag: str                              # "standard" | "lightweight"
    created_seq: int
    layer_config: LayerConfig | None = None
    dump_image_id: str | None = None
    template_present: bool = False
    alias_of: str | None = None           # lightweight -> standard ancestor
    status: str = "live"                  # live|terminal|failed|pruned
    internal: bool = False                # value-time bracket checkpoint
    consumed: bool = False
    hot_zone: tuple[int, ...] = ()
    resume_cursor: object = None


@dataclass(frozen=True)
class NodeFlags:
    """Search-side view of one node, consulted by reachability GC."""

    terminal: bool = False
    failed: bool = False
    duplicate: bool = False
    budget_exhausted: bool = False
    children_reward_reached: bool = False


@dataclass(frozen=True)
class GcPolicy:
    kind: str                             # keepall | recency | reachability
    window: int = 0

    @classmethod
    def keep_all(cls) -> "GcPolicy":
        return cls("keepall")

    @classmethod
    def recency(cls, window: int) -> "GcPolicy":
        return cls("recency", window)

    @classmethod
    def reachability(cls) -> "GcPolicy":
        return cls("reachability")

    @classmethod
    def parse(cls, text: str) -> "GcPolicy":
        text = text.strip().lower()
        if text in ("keepall", "keep-all", "none"):
            return cls.keep_all()
        if text.startswith("recency"):
            _, _, w = text.partition(":")
            return cls.recency(int(w or 5))
        if text == "reachability":
            return cls.reachability()
        raise ValueError(f"unknown gc policy {text!r}")

    def describe(self) -> str:
        return f"recency:{self.window}" if self.kind == "recency" else self.kind


@dataclass
class BlockingReport:
    """What one checkpoint or restore cost, by lane and as perceived."""

    phase: str                            # "checkpoint" | "restore"
    tag: str                              # "standard" | "lightweight"
    path: str                             # "switch+dump" | "fast" | "slow" | "alias"
    lanes: dict[str, float]
    perceived_ms: float

    def as_dict(self) -> dict:
        return {"phase": self.phase, "tag": self.tag, "path": self.path,
                "lanes": dict(self.lanes),
                "perceived_ms": round(self.perceived_ms, 6)}


@dataclass
class GcReport:
    policy: str
    pruned: list[str]
    kept: list[str]
    before: dict
    after: dict

    def as_dict(self) -> dict:
        return {"policy": self.policy, "pruned": self.pruned,
                "kept": self.kept, "before": self.before,
                "after": self.after}


def _percentile(values: Sequence[float], q: float) -> float:
    if not values:
        return 0.0
    ordered = sorted(values)
    idx = min(len(ordered) - 1, int(round(q * (len(ordered) - 1))))
    return ordered[idx]


class StateManager:
    """Couples one layer stack and one address space transactionally."""

    def __init__(self, base_image: Mapping[str, bytes] | None = None,
                 initial_memory: Mapping[int, bytes] | None = None, *,
                 share_mode: ShareMode = ShareMode.REFLINK,
                 pool_capacity: int = 8,
                 cost_model: CostModel | None = None,
                 classifier: Classifier | None = None,
                 gc_policy: GcPolicy | None = None,
                 verify_lightweight: bool = True,
                 fault_dump_at: int | None = None,
                 warm_mode: str = "off",
                 recorder: Callable[[tuple], None] | None = None):
        self.store = BlockStore(share_mode, recorder)
        self.fs = LayerFs(self.store, base_image or {})
        self.engine = ProcessEngine(self.store, pool_capacity)
        self.cost_model = cost_model or CostModel()
        self.classifier = classifier or Classifier()
        self.gc_policy = gc_policy or GcPolicy.keep_all()
        self.verify_lightweight = verify_lightweight
        self.fault_dump_at = fault_dump_at
        if warm_mode not in ("off", "eager"):
            raise ValueError(f"unknown warm mode {warm_mode!r}")
        self.warm_mode = warm_mode

        self.registry: dict[str, SnapshotNode] = {}
        self.reports: list[BlockingReport] = []
        self.gc_reports: list[GcReport] = []
        self.space = self.engine.new_space(initial_memory or {})
        self._lock = threading.RLock()
        self._seq = itertools.count(1)
        self._ckpt_ordinal = -1            # root checkpoint becomes 0
        self._fault_armed = fault_dump_at is not None
        self._llm_window = self.cost_model.llm_window
        self._image_owner: dict[str, str] = {}
        self._handles: dict[str, object] = {}
        self._closed = False

        self.current_node_id: str | None = None
        self._current_image_id: str | None = None
        self.root_id, _ = self.delta_checkpoint(StructuralAction("init"))

    # -- agent-facing state operations -------------------------------------

    def _handle(self, path: str, create: bool = False):
        h = self._handles.get(path)
        if h is None:
            h = self.fs.open(path, OpenMode.READ_WRITE, create=create)
            self._handles[path] = h
        return h

    def write_file(self, path: str, offset: int, data: bytes) -> None:
        self.fs.write(self._handle(path, create=True), offset, data)

    def read_file(self, path: str) -> bytes:
        return self.fs.read_file(path)

    def unlink(self, path: str) -> None:
        self.fs.unlink(path)
        self._handles.pop(path, None)

    def mkdir(self, path: str) -> None:
        self.fs.mkdir(path)

    def readdir(self, path: str) -> list[str]:
        return self.fs.readdir(path)

    def mem_write(self, page: int, data: bytes) -> None:
        self.engine.mem_write(self.space, page, data)

    def read_page(self, page: int) -> bytes:
        return self.engine.read_page(self.space, page)

    def set_llm_window(self, window_ms: float) -> None:
        """Sticky masking window used by subsequent checkpoints."""
        self._llm_window = window_ms

    def advance_cursor(self, n: int = 1) -> None:
        self.space.continuation.cursor += n

    # -- checkpoint --------------------------------------------------------

    def _classify(self, descriptor: ActionDescriptor) -> str:
        """Tag for a checkpoint: lightweight only when every command since
        the last boundary is a read-only-classified exec."""
        if isinstance(descriptor, ExecAction) and descriptor.commands and \
                all(self.classifier.is_read_only(c)
                    for c in descriptor.commands):
            return "lightweight"
        return "standard"

    def _nearest_standard(self, node_id: str | None) -> str | None:
        while node_id is not None:
            node = self.registry[node_id]
            if node.tag == "standard":
                return node_id
            node_id = node.alias_of
        return None

    def delta_checkpoint(self, descriptor: ActionDescriptor | str,
                         internal: bool = False
                         ) -> tuple[str, BlockingReport]:
        if isinstance(descriptor, str):
            descriptor = ExecAction((descriptor,))
        with self._lock:
            self._ckpt_ordinal += 1
            ordinal = self._ckpt_ordinal
            tag = self._classify(descriptor)
            if tag == "lightweight":
                return self._lightweight_checkpoint(descriptor, internal)
            return self._standard_checkpoint(ordinal, internal)

    def _lightweight_checkpoint(self, descriptor: ExecAction,
                                internal: bool
                                ) -> tuple[str, BlockingReport]:
        if self.verify_lightweight:
            if self.fs.upper_entry_count != 0 or self.space.soft_dirty:
                pattern = next(
                    (self.classifier.matching_pattern(c)
                     for c in descriptor.commands), None)
                raise LightweightUnsound(
                    "state changed under a read-only classification "
                    f"(pattern {pattern!r}); delta is non-empty", pattern)
        sid = f"s{next(self._seq)}"
        node = SnapshotNode(
            sid, self.current_node_id, "lightweight", next(self._seq),
            alias_of=self._nearest_standard(self.current_node_id),
            internal=internal)
        self.registry[sid] = node
        self.current_node_id = sid
        report = BlockingReport("checkpoint", "lightweight", "alias", {}, 0.0)
        self.reports.append(report)
        return sid, report

    def _standard_checkpoint(self, ordinal: int, internal: bool
                             ) -> tuple[str, BlockingReport]:
        # fire at the first standard checkpoint at/after the armed ordinal,
        # so an ordinal landing on a lightweight alias still injects
        inject = self._fault_armed and ordinal >= self.fault_dump_at
        if inject:
            self._fault_armed = False
        self.engine.quiesce(self.space)
        cfg = self.fs.checkpoint_switch()
        try:
            img = self.engine.incremental_dump(
                self.space, self._current_image_id, inject_failure=inject)
        except DumpFailure:
            # Unwind the layer switch (the restored arrangement is
            # content-identical to the pre-checkpoint stack), resume the
            # workload, register nothing.
            self.fs.restore_switch(cfg)
            self.engine.resume(self.space)
            raise
        sid = f"s{next(self._seq)}"
        tpl = self.engine.create_template(self.space, sid)
        evicted = self.engine.pool_insert(tpl)
        if evicted is not None and evicted in self.registry:
            self.registry[evicted].template_present = False
        self.fs.retain_config(cfg)
        node = SnapshotNode(
            sid, self.current_node_id, "standard", next(self._seq),
            layer_config=cfg, dump_image_id=img.image_id,
            template_present=True, internal=internal,
            hot_zone=tuple(sorted(img.captured)),
            resume_cursor=deepcopy(self.space.continuation))
        self.registry[sid] = node
        self._image_owner[img.image_id] = sid
        self._current_image_id = img.image_id
        self.current_node_id = sid
        self.engine.resume(self.space)
        report = BlockingReport(
            "checkpoint", "standard", "switch+dump",
            self.cost_model.checkpoint_lanes(),
            self.cost_model.checkpoint_blocking(self._llm_window))
        self.reports.append(report)
        return sid, report

    # -- restore -----------------------------------------------------------

    def _effective(self, node: SnapshotNode) -> SnapshotNode:
        if node.tag == "standard":
            return node
        target = self._nearest_standard(node.alias_of)
        if target is None or self.registry[target].status == "pruned":
            raise UnknownSnapshotId(
                f"{node.snapshot_id} aliases a pruned snapshot")
        return self.registry[target]

    def delta_restore(self, snapshot_id: str
                      ) -> tuple[BlockingReport, str]:
        with self._lock:
            node = self.registry.get(snapshot_id)
            if node is None or node.status == "pruned":
                raise UnknownSnapshotId(snapshot_id)
            eff = self._effective(node)
            self._handles.clear()
            old_space = self.space
            self.fs.restore_switch(eff.layer_config)
            self.engine.release_space(old_space)
            if eff.template_present:
                self.space = self.engine.restore_fast(
                    eff.snapshot_id, hot_zone=eff.hot_zone)
                path = "fast"
                lanes = self.cost_model.restore_fast_lanes()
                perceived = self.cost_model.restore_fast_blocking()
            else:
                self.space, evicted = self.engine.restore_slow(
                    eff.dump_image_id, snapshot_id=eff.snapshot_id,
                    continuation=eff.resume_cursor, hot_zone=eff.hot_zone)
                eff.template_present = True
                if evicted is not None and evicted in self.registry:
                    self.registry[evicted].template_present = False
                path = "slow"
                lanes = self.cost_model.restore_slow_lanes()
                perceived = self.cost_model.restore_slow_blocking()
            self._current_image_id = eff.dump_image_id
            self.current_node_id = snapshot_id
            if self.warm_mode == "eager":
                while self.engine.warm_step(self.space):
                    pass
            report = BlockingReport("restore", node.tag, path, lanes,
                                    perceived)
            self.reports.append(report)
            return report, path

    # -- value-time tests --------------------------------------------------

    def value_time_test(self, run: Callable[[], object]) -> object:
        """Run ``run`` inside a checkpoint/restore bracket.

        Whatever it dirties is rolled back unconditionally; only its
        return value survives. The bracket checkpoint is marked consumed
        so GC reclaims it immediately.
        """
        pre, _ = self.delta_checkpoint(StructuralAction("value-time"),
                                       internal=True)
        try:
            result = run()
        finally:
            self.delta_restore(pre)
            self.registry[pre].consumed = True
        return result

    # -- status / views ----------------------------------------------------

    def mark_status(self, snapshot_id: str, status: str) -> None:
        node = self.registry[snapshot_id]
        if node.status != "pruned":
            node.status = status

    def materialize_fs(self) -> dict[str, bytes]:
        return self.fs.materialize()

    def materialize_memory(self) -> dict[int, bytes]:
        return self.engine.materialize(self.space)

    def storage_metrics(self) -> dict:
        live = sum(1 for n in self.registry.values()
                   if n.status != "pruned")
        return {
            "physical_block_count": self.store.stats.physical_block_count,
            "data_bytes_copied": self.store.stats.data_bytes_copied,
            "metadata_ops": self.store.stats.metadata_ops,
            "dump_storage_bytes": self.engine.dump_storage_bytes(),
            "live_images": len(self.engine.images),
            "pooled_templates": len(self.engine.pool),
            "layer_count": self.fs.layer_count(),
            "registered_snapshots": live,
        }

    def skip_stats(self) -> dict:
        lw = std = 0
        for node in self.registry.values():
            if node.internal or node.snapshot_id == self.root_id:
                continue
            if node.tag == "lightweight":
                lw += 1
            else:
                std += 1
        total = lw + std
        return {"lightweight": lw, "standard": std,
                "skip_ratio": (lw / total) if total else 0.0}

    def blocking_breakdown(self) -> dict:
        """Mean/P95 perceived stall per (phase, tag) bucket."""
        out: dict[str, dict] = {}
        short = {"lightweight": "lw", "standard": "std"}
        for phase, ph in (("checkpoint", "ck"), ("restore", "rs")):
            for tag in ("lightweight", "standard"):
                vals = [r.perceived_ms for r in self.reports
                        if r.phase == phase and r.tag == tag]
                out[f"{short[tag]}_{ph}"] = {
                    "count": len(vals),
                    "mean_ms": round(sum(vals) / len(vals), 6) if vals else 0.0,
                    "p95_ms": round(_percentile(vals, 0.95), 6),
                }
        return out

    # -- garbage collection ------------------------------------------------

    def gc(self, search_view: Mapping[str, NodeFlags] | None = None
           ) -> GcReport:
        """Prune snapshots the policy no longer wants.

        The keep set is always closed over lightweight alias targets and
        dump-chain ancestry, so surviving snapshots stay restorable.
        """
        with self._lock:
            view = search_view or {}
            live = [n for n in self.registry.values()
                    if n.status != "pruned"]
            if self.gc_policy.kind == "keepall":
                base = {n.snapshot_id for n in live}
            elif self.gc_policy.kind == "recency":
                candidates = sorted(
                    (n for n in live if not n.consumed),
                    key=lambda n: n.created_seq, reverse=True)
                base = {n.snapshot_id
                        for n in candidates[:self.gc_policy.window]}
            elif self.gc_policy.kind == "reachability":
                base = set()
                for n in live:
                    flags = view.get(n.snapshot_id, NodeFlags())
                    if n.consumed:
                        continue
                    if flags.terminal:
                        base.add(n.snapshot_id)      # solutions stay
                        continue
                    if flags.failed or flags.duplicate:
                        continue
                    if flags.budget_exhausted or flags.children_reward_reached:
                        continue
                    base.add(n.snapshot_id)
                base.update(n.snapshot_id for n in live
                            if n.internal and not n.consumed)
            else:
                raise ValueError(self.gc_policy.kind)
            if self.current_node_id is not None:
                base.add(self.current_node_id)
            keep = self._close_keep_set(base)
            before = self.storage_metrics()
            pruned = []
            for node in live:
                if node.snapshot_id not in keep:
                    self._prune(node)
                    pruned.append(node.snapshot_id)
            report = GcReport(self.gc_policy.describe(), sorted(pruned),
                              sorted(keep), before, self.storage_metrics())
            self.gc_reports.append(report)
            return report

    def _close_keep_set(self, base: set[str]) -> set[str]:
        keep = set()
        stack = [s for s in base if s in self.registry
                 and self.registry[s].status != "pruned"]
        while stack:
            sid = stack.pop()
            if sid in keep:
                continue
            keep.add(sid)
            node = self.registry[sid]
            if node.alias_of is not None:
                stack.append(node.alias_of)
            img_id = node.dump_image_id
            while img_id is not None:
                img = self.engine.images.get(img_id)
                if img is None:
                    break
                owner = self._image_owner.get(img_id)
                if owner is not None and owner not in keep:
                    stack.append(owner)
                img_id = img.parent
        return keep

    def _prune(self, node: SnapshotNode) -> None:
        if node.tag == "standard":
            if node.template_present:
                self.engine.drop_template(node.snapshot_id)
                node.template_present = False
            if node.dump_image_id is not None:
                self.engine.drop_image(node.dump_image_id)
                self._image_owner.pop(node.dump_image_id, None)
                node.dump_image_id = None
            if node.layer_config is not None:
                self.fs.release_config(node.layer_config)
                node.layer_config = None
        node.status = "pruned"

    # -- teardown ----------------------------------------------------------

    def close(self) -> None:
        """Release everything; afterwards the store must be empty."""
        if self._closed:
            return
        self._closed = True
        with self._lock:
            for node in self.registry.values():
                if node.status != "pruned" and node.tag == "standard":
                    if node.template_present:
                        self.engine.drop_template(node.snapshot_id)
                    if node.dump_image_id is not None and \
                            node.dump_image_id in self.engine.images:
                        self.engine.drop_image(node.dump_image_id)
                    if node.layer_config is not None:
                        self.fs.release_config(node.layer_config)
                node.status = "pruned"
            self.engine.close()
            if not self.space.released:
                self.engine.release_space(self.space)
            self.fs.close()
