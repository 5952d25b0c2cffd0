"""Deterministic search-workload simulation and validation harness."""

from .trace import (Checkpoint, Event, Exec, LlmCall, MemWrite, MkDir,
                    ReadScan, Restore, RunTest, Unlink, WriteFile,
                    dump_trace, event_from_dict, event_to_dict, load_trace,
                    parse_trace)
from .oracle import OracleManager, ShadowAccountant
from .generator import generate_trace
from .replay import ReplayResult, RunConfig, TraceRunner, test_verdict
from .mcts import MctsConfig, MctsResult, MctsRunner
from .drivers import (FanoutResult, WarPoint, run_best_of_n, run_rl_fanout,
                      run_war_sweep, reflink_plateau)

__all__ = [
    "WriteFile", "ReadScan", "Unlink", "MkDir", "MemWrite", "Exec",
    "LlmCall", "Checkpoint", "Restore", "RunTest", "Event",
    "parse_trace", "load_trace", "dump_trace", "event_to_dict",
    "event_from_dict",
    "OracleManager", "ShadowAccountant",
    "generate_trace", "RunConfig", "TraceRunner", "ReplayResult",
    "test_verdict",
    "MctsConfig", "MctsResult", "MctsRunner",
    "run_best_of_n", "run_rl_fanout", "run_war_sweep", "reflink_plateau",
    "FanoutResult", "WarPoint",
]
