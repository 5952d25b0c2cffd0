"""Tree search over checkpointed states (UCT with batch expansion).

Each tree node owns one snapshot. Expanding a node restores its snapshot,
applies a generated action per child, and checkpoints each result; rewards
come from a seeded RNG, so runs are exactly reproducible. After every
iteration the state manager garbage-collects under the configured policy
with the search's own view of which nodes still matter.

The interaction this models: a policy that prunes by recency can drop a
snapshot the search still wants, and because a failed restore changes
nothing, UCT deterministically re-selects the same node forever -- a
livelock the runner detects by streak. Reachability pruning keeps exactly
the restorable frontier and never fails.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field

from ..errors import UnknownSnapshotId
from ..statemanager import (ExecAction, GcPolicy, NodeFlags, StateManager,
                            StructuralAction)
from ..util import seeded_bytes


@dataclass
class MctsConfig:
    seed: int = 0
    budget: int = 200                    # expansion iterations
    branching: int = 3
    depth_limit: int = 8
    uct_c: float = math.sqrt(2)
    terminal_reward: float = 0.9         # reward above => solution
    fail_reward: float = 0.25            # reward below => dead end
    ro_child_fraction: float = 0.3       # children via read-only actions
    livelock_streak: int = 25
    gc: GcPolicy = field(default_factory=GcPolicy.keep_all)
    pool_capacity: int = 8
    base_files: int = 4
    base_file_size: int = 4096
    initial_pages: int = 64

    def as_dict(self) -> dict:
        return {"seed": self.seed, "budget": self.budget,
                "branching": self.branching, "depth_limit": self.depth_limit,
                "uct_c": round(self.uct_c, 6),
                "terminal_reward": self.terminal_reward,
                "fail_reward": self.fail_reward,
                "ro_child_fraction": self.ro_child_fraction,
                "livelock_streak": self.livelock_streak,
                "gc": self.gc.describe(),
                "pool_capacity": self.pool_capacity}


@dataclass
class TreeNode:
    snapshot_id: str
    depth: int
    reward: float = 0.0
    q_total: float = 0.0
    visits: int = 0
    expansion_budget: int = 1
    terminal: bool = False
    failed: bool = False
    children: list["TreeNode"] = field(default_factory=list)

    @property
    def expandable(self) -> bool:
        return (self.expansion_budget > 0 and not self.terminal
                and not self.failed)


@dataclass
class MctsResult:
    iterations: int
    nodes_created: int
    terminals: int
    failed_nodes: int
    failed_restores: int
    livelock: bool
    livelock_node: str | None
    exhausted: bool
    dump_storage_bytes: int
    storage: dict
    blocking: dict
    skip: dict
    store_stats: dict
    gc_prunes: int

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "iterations", "nodes_created", "terminals", "failed_nodes",
            "failed_restores", "livelock", "livelock_node", "exhausted",
            "dump_storage_bytes", "storage", "blocking", "skip",
            "store_stats", "gc_prunes")}


class MctsRunner:
    def __init__(self, config: MctsConfig):
        self.cfg = config
        self.manager = StateManager(
            {f"/src/f{i}.py": seeded_bytes(f"mbase:{config.seed}:{i}",
                                           config.base_file_size)
             for i in range(config.base_files)},
            {p: seeded_bytes(f"mpage:{config.seed}:{p}", 4096)
             for p in range(config.initial_pages)},
            pool_capacity=config.pool_capacity, gc_policy=config.gc)
        self.root = TreeNode(self.manager.root_id, 0)
        self.nodes: dict[str, TreeNode] = {self.root.snapshot_id: self.root}
        self._path_counter = 0

    # -- selection ----------------------------------------------------------

    def _uct(self, parent: TreeNode, child: TreeNode) -> float:
        if child.visits == 0:
            return math.inf
        exploit = child.q_total / child.visits
        explore = self.cfg.uct_c * math.sqrt(
            math.log(max(parent.visits, 1)) / child.visits)
        return exploit + explore

    def select(self) -> TreeNode | None:
        """Descend by UCT; back off from subtrees with nothing to expand.

        Ties and unvisited children resolve in creation order, so the walk
        is fully deterministic.
        """
        def descend(node: TreeNode) -> TreeNode | None:
            if node.expandable:
                return node
            if not node.children:
                return None
            ranked = sorted(
                range(len(node.children)),
                key=lambda i: (-self._uct(node, node.children[i]), i))
            for i in ranked:
                found = descend(node.children[i])
                if found is not None:
                    return found
            return None
        return descend(self.root)

    # -- expansion -----------------------------------------------------------

    def _child_action(self, parent: TreeNode, i: int):
        """Apply one generated action; returns the checkpoint descriptor."""
        rng = random.Random(
            f"{self.cfg.seed}:act:{parent.snapshot_id}:{i}")
        if rng.random() < self.cfg.ro_child_fraction:
            cmd = rng.choice((
                "grep -rn fixme /src", "cat /src/f0.py", "ls /src",
                "git diff", "python -m pytest --collect-only"))
            self.manager.read_file("/src/f0.py")
            return ExecAction((cmd,))
        self._path_counter += 1
        path = f"/src/step{self._path_counter}.py"
        self.manager.write_file(path, 0,
                                seeded_bytes(f"{self.cfg.seed}:w:{path}",
                                             rng.randint(512, 4096)))
        page = rng.randrange(self.cfg.initial_pages)
        self.manager.mem_write(page,
                               seeded_bytes(f"{self.cfg.seed}:m:{path}",
                                            4096))
        return StructuralAction()

    def _reward(self, snapshot_id: str) -> float:
        return random.Random(
            f"{self.cfg.seed}:reward:{snapshot_id}").random()

    def expand(self, node: TreeNode) -> list[TreeNode]:
        children = []
        for i in range(self.cfg.branching):
            if i > 0:
                self.manager.delta_restore(node.snapshot_id)
            descriptor = self._child_action(node, i)
            sid, _ = self.manager.delta_checkpoint(descriptor)
            child = TreeNode(sid, node.depth + 1)
            child.reward = self._reward(sid)
            if child.reward >= self.cfg.terminal_reward:
                child.terminal = True
                self.manager.mark_status(sid, "terminal")
            elif child.reward < self.cfg.fail_reward or \
                    child.depth >= self.cfg.depth_limit:
                child.failed = True
                self.manager.mark_status(sid, "failed")
            node.children.append(child)
            self.nodes[sid] = child
            children.append(child)
        node.expansion_budget -= 1
        return children

    def _backprop(self, node: TreeNode, children: list[TreeNode]) -> None:
        gain = sum(c.reward for c in children)
        for c in children:
            c.q_total += c.reward
            c.visits += 1
        # ancestors (root..node inclusive) absorb the whole batch
        path: list[TreeNode] = []
        found = self._path_to(self.root, node, path)
        assert found
        for anc in path:
            anc.q_total += gain
            anc.visits += len(children)

    def _path_to(self, cur: TreeNode, target: TreeNode,
                 path: list[TreeNode]) -> bool:
        path.append(cur)
        if cur is target:
            return True
        for c in cur.children:
            if self._path_to(c, target, path):
                return True
        path.pop()
        return False

    # -- gc view -------------------------------------------------------------

    def search_view(self) -> dict[str, NodeFlags]:
        view = {}
        for sid, node in self.nodes.items():
            view[sid] = NodeFlags(
                terminal=node.terminal, failed=node.failed,
                duplicate=False,
                budget_exhausted=(node.expansion_budget <= 0),
                children_reward_reached=any(
                    c.terminal for c in node.children))
        return view

    # -- main loop -----------------------------------------------------------

    def run(self) -> MctsResult:
        cfg = self.cfg
        failed_restores = 0
        livelock = False
        livelock_node = None
        exhausted = False
        streak = 0
        last_failed_sid = None
        iterations = 0
        for _ in range(cfg.budget):
            node = self.select()
            if node is None:
                exhausted = True
                break
            iterations += 1
            try:
                self.manager.delta_restore(node.snapshot_id)
            except UnknownSnapshotId:
                failed_restores += 1
                if node.snapshot_id == last_failed_sid:
                    streak += 1
                else:
                    last_failed_sid = node.snapshot_id
                    streak = 1
                if streak >= cfg.livelock_streak:
                    livelock = True
                    livelock_node = node.snapshot_id
                    break
                continue
            streak = 0
            last_failed_sid = None
            children = self.expand(node)
            self._backprop(node, children)
            self.manager.gc(self.search_view())
        m = self.manager
        return MctsResult(
            iterations=iterations, nodes_created=len(self.nodes),
            terminals=sum(1 for n in self.nodes.values() if n.terminal),
            failed_nodes=sum(1 for n in self.nodes.values() if n.failed),
            failed_restores=failed_restores, livelock=livelock,
            livelock_node=livelock_node, exhausted=exhausted,
            dump_storage_bytes=m.engine.dump_storage_bytes(),
            storage=m.storage_metrics(), blocking=m.blocking_breakdown(),
            skip=m.skip_stats(), store_stats=m.store.stats.as_dict(),
            gc_prunes=sum(len(r.pruned) for r in m.gc_reports))

    def close(self) -> int:
        self.manager.close()
        return self.manager.store.stats.physical_block_count
