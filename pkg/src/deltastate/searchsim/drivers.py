"""Non-tree search drivers: best-of-N, RL fan-out, write-amplification.

These exercise the same engine through different access patterns: N
independent trajectories restored from one root, N simultaneous clone
children of one template, and a parameter sweep that maps edit size and
sharing mode to bytes actually copied.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from ..blockstore import BLOCK_SIZE, BlockStore, ShareMode
from ..layerfs import LayerFs, OpenMode
from ..procstate import PAGE_SIZE, ProcessEngine
from ..statemanager import CostModel
from ..util import seeded_bytes
from .generator import generate_trace
from .replay import ReplayResult, RunConfig, TraceRunner
from .trace import Checkpoint, Event, MemWrite, Restore, WriteFile


# -- best-of-N --------------------------------------------------------------

def run_best_of_n(n: int, seed: int, *, steps: int = 4,
                  config: RunConfig | None = None
                  ) -> tuple[ReplayResult, dict]:
    """N trajectories, each branching from the shared root snapshot.

    Built as a plain trace (restore root, act, checkpoint ... ) and run
    through the lockstep runner, so every branch is oracle-checked. The
    cost summary counts one restore per branch after the first.
    """
    cfg = config or RunConfig(seed=seed)
    rng = random.Random(f"bon:{seed}")
    events: list[Event] = []
    leaves = []
    for t in range(n):
        if t > 0:
            events.append(Restore("root"))
        for k in range(steps):
            events.append(WriteFile(f"/work/b{t}_{k}.txt", 0,
                                    rng.randint(256, 4096),
                                    rng.getrandbits(32)))
            if rng.random() < 0.5:
                events.append(MemWrite(rng.randrange(16), 1,
                                       rng.getrandbits(32)))
            events.append(Checkpoint(f"b{t}_{k}"))
            leaves.append(f"b{t}_{k}")
    runner = TraceRunner(events, cfg)
    result = runner.run()
    best = max(leaves,
               key=lambda lbl: random.Random(f"bonr:{seed}:{lbl}").random())
    restore_ms = [r.perceived_ms for r in runner.manager.reports
                  if r.phase == "restore"]
    summary = {
        "branches": n, "steps": steps, "best_label": best,
        "root_restores": n - 1,
        "restore_cost_ms": round(sum(restore_ms), 6),
        "restore_paths": {"fast": result.fast_restores,
                          "slow": result.slow_restores},
        "leaked_blocks": runner.close(),
    }
    return result, summary


# -- RL fan-out -------------------------------------------------------------

@dataclass
class FanoutResult:
    n: int
    steps: int
    dirty_pages_per_child: int
    template_pages: int
    private_bytes_per_child: list[int]
    aggregate_private_bytes: int
    shared_physical_bytes_peak: int
    template_physical_blocks: int
    zero_write_physical_blocks: int
    gpu_util: float
    sandbox_seconds: float
    leaked_blocks: int = 0

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "n", "steps", "dirty_pages_per_child", "template_pages",
            "private_bytes_per_child", "aggregate_private_bytes",
            "shared_physical_bytes_peak", "template_physical_blocks",
            "zero_write_physical_blocks", "gpu_util", "sandbox_seconds",
            "leaked_blocks")}


def run_rl_fanout(n: int, *, dirty_pages: int = 0, template_pages: int = 256,
                  steps: int = 1, seed: int = 0,
                  t_generate: float = 1630.0, t_train: float = 220.0,
                  sandbox_seconds: float | None = None,
                  cost_model: CostModel | None = None) -> FanoutResult:
    """Fork N rollout children per step from one pooled template.

    Children share every page until they write; ``dirty_pages`` pages per
    child are written with a child-specific pattern. GPU utilisation uses
    the measured sandbox alternation: util = (gen + train) /
    (sandbox + gen + train), with sandbox defaulting to the per-step
    restore cost of N template clones (in seconds, inputs in ms).
    """
    cm = cost_model or CostModel()
    store = BlockStore(ShareMode.REFLINK)
    engine = ProcessEngine(store, pool_capacity=max(8, steps + 1))
    parent = engine.new_space(
        {p: seeded_bytes(f"fan:{seed}:{p}", PAGE_SIZE)
         for p in range(template_pages)})
    engine.quiesce(parent)
    image = engine.incremental_dump(parent, None)
    tpl = engine.create_template(parent, "fan-root")
    engine.pool_insert(tpl)
    engine.resume(parent)

    if sandbox_seconds is None:
        sandbox_seconds = n * (cm.restore_fast_blocking() / 1000.0)
    gpu_util = (t_generate + t_train) / \
        (sandbox_seconds * 1000.0 + t_generate + t_train)

    current = "fan-root"
    per_child: list[int] = []
    peak_physical = 0
    zero_write_blocks = 0
    tpl_blocks = store.stats.physical_block_count
    for step in range(steps):
        children = [engine.restore_fast(current) for _ in range(n)]
        if dirty_pages == 0:
            zero_write_blocks = store.stats.physical_block_count
        for i, child in enumerate(children):
            pattern = seeded_bytes(f"fan:{seed}:s{step}c{i}", PAGE_SIZE)
            for page in range(dirty_pages):
                engine.mem_write(child, page, pattern)
        peak_physical = max(peak_physical,
                            store.stats.physical_block_count)
        per_child.extend(c.private_bytes for c in children)
        # refresh the template from child 0 for the next step
        if step + 1 < steps:
            survivor = children[0]
            engine.quiesce(survivor)
            image = engine.incremental_dump(survivor, image.image_id)
            nxt = engine.create_template(survivor, f"fan-{step + 1}")
            engine.pool_insert(nxt)
            current = f"fan-{step + 1}"
        for child in children:
            engine.release_space(child)

    if dirty_pages == 0 and steps > 0 and zero_write_blocks == 0:
        zero_write_blocks = tpl_blocks
    result = FanoutResult(
        n=n, steps=steps, dirty_pages_per_child=dirty_pages,
        template_pages=template_pages,
        private_bytes_per_child=per_child,
        aggregate_private_bytes=sum(per_child),
        shared_physical_bytes_peak=peak_physical * BLOCK_SIZE,
        template_physical_blocks=tpl_blocks,
        zero_write_physical_blocks=zero_write_blocks,
        gpu_util=round(gpu_util, 6),
        sandbox_seconds=round(sandbox_seconds, 6))
    engine.release_space(parent)
    engine.close()
    result.leaked_blocks = store.stats.physical_block_count
    return result


# -- write-amplification sweep ----------------------------------------------

@dataclass
class WarPoint:
    mode: str
    file_size: int
    edit_size: int
    offset: int
    bytes_copied: int
    blocks_touched: int
    metadata_ops: int

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "mode", "file_size", "edit_size", "offset", "bytes_copied",
            "blocks_touched", "metadata_ops")}


def _blocks_spanned(offset: int, length: int) -> int:
    if length <= 0:
        return 0
    first = offset // BLOCK_SIZE
    last = (offset + length - 1) // BLOCK_SIZE
    return last - first + 1


def run_war_sweep(*, file_sizes=(65536, 1048576), edit_sizes=(1, 64, 4096,
                                                              65536),
                  modes=(ShareMode.REFLINK, ShareMode.FULL_COPY),
                  offsets_per_point: int = 5, seed: int = 0
                  ) -> list[WarPoint]:
    """Measure bytes copied for one post-checkpoint edit, per combination.

    Each sample uses a fresh world: one dense base file, one checkpoint
    switch, one seeded write through a pre-switch handle (the lazy
    copy-up path). FULL_COPY charges the whole file on first touch;
    REFLINK charges only the blocks the edit spans.
    """
    points = []
    rng = random.Random(f"war:{seed}")
    for mode in modes:
        for fsize in file_sizes:
            for esize in edit_sizes:
                if esize > fsize:
                    continue
                for _ in range(offsets_per_point):
                    offset = rng.randrange(0, fsize - esize + 1)
                    store = BlockStore(mode)
                    fs = LayerFs(store, {
                        "/data/blob": seeded_bytes(f"war:{seed}:{fsize}",
                                                   fsize)})
                    h = fs.open("/data/blob", OpenMode.READ_WRITE)
                    fs.checkpoint_switch()
                    before = store.stats.snapshot()
                    fs.write(h, offset, seeded_bytes(rng.getrandbits(32),
                                                     esize))
                    after = store.stats.snapshot()
                    points.append(WarPoint(
                        mode.value, fsize, esize, offset,
                        after.data_bytes_copied - before.data_bytes_copied,
                        _blocks_spanned(offset, esize),
                        after.metadata_ops - before.metadata_ops))
                    fs.close()
    return points


def reflink_plateau(*, file_size: int = 1048576, edit_size: int = 4096,
                    checkpoints: int = 50, seed: int = 0) -> dict:
    """Storage growth under repeated checkpoint+edit cycles.

    With reflink sharing, total physical blocks should follow
    base + k * blocks_per_edit: linear in checkpoints, flat in file size.
    """
    store = BlockStore(ShareMode.REFLINK)
    fs = LayerFs(store, {"/data/blob": seeded_bytes(f"plat:{seed}",
                                                    file_size)})
    h = fs.open("/data/blob", OpenMode.READ_WRITE)
    base_blocks = store.stats.physical_block_count
    rng = random.Random(f"plat:{seed}")
    curve = [base_blocks]
    configs = []
    for k in range(checkpoints):
        cfg = fs.checkpoint_switch()
        fs.retain_config(cfg)
        configs.append(cfg)
        # one aligned whole-block edit per checkpoint: exactly one
        # privatization, so the expected curve is base + (k+1) blocks
        block = rng.randrange(file_size // BLOCK_SIZE)
        fs.write(h, block * BLOCK_SIZE,
                 seeded_bytes(f"plat:{seed}:{k}", edit_size))
        curve.append(store.stats.physical_block_count)
    out = {
        "file_size": file_size, "edit_size": edit_size,
        "checkpoints": checkpoints, "base_blocks": base_blocks,
        "curve": curve,
        "final_blocks": store.stats.physical_block_count,
        "expected_final": base_blocks + checkpoints *
        _blocks_spanned(0, edit_size),
        "bytes_copied": store.stats.data_bytes_copied,
    }
    for cfg in configs:
        fs.release_config(cfg)
    fs.close()
    out["leaked_blocks"] = store.stats.physical_block_count
    return out
