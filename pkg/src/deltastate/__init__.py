"""Change-based coupled checkpoint/rollback for agentic workloads.

A desk-scale, user-space model of a checkpointing stack: a layered
copy-on-write filesystem whose layer arrangement switches at runtime, an
incremental process-state engine with a bounded fork-template pool, a
:class:`StateManager` that couples the two transactionally, and a
deterministic search-workload simulator validated against a full-copy
oracle.
"""

from .blockstore import BLOCK_SIZE, BlockStore, ExtentMap, ShareMode, StoreStats
from .errors import (AlreadyExists, DeliverToWrongEpoch, DeltaStateError,
                     DumpFailure, IntegrityError, IsDirectory,
                     LightweightUnsound, NotFound, QuiesceViolation,
                     StaleAfterRestore, StoreError, TemplateMiss, TraceError,
                     UnknownImage, UnknownLayer, UnknownSnapshotId)
from .layerfs import Handle, LayerConfig, LayerFs, OpenMode
from .procstate import (PAGE_SIZE, AddressSpace, Continuation, DumpImage,
                        FaultLog, IoBroker, ProcessEngine, Template,
                        TemplatePool)
from .statemanager import (Classifier, CostModel, ExecAction, GcPolicy,
                           GcReport, NodeFlags, SnapshotNode, StateManager,
                           StructuralAction)

__version__ = "0.1.0"

__all__ = [
    "BLOCK_SIZE", "PAGE_SIZE", "BlockStore", "ExtentMap", "ShareMode",
    "StoreStats", "LayerFs", "LayerConfig", "Handle", "OpenMode",
    "ProcessEngine", "AddressSpace", "TemplatePool", "Template", "DumpImage",
    "FaultLog", "IoBroker", "Continuation", "StateManager", "CostModel",
    "Classifier", "GcPolicy", "GcReport", "NodeFlags", "SnapshotNode",
    "ExecAction", "StructuralAction",
    "DeltaStateError", "StoreError", "NotFound", "IsDirectory",
    "AlreadyExists", "UnknownLayer", "StaleAfterRestore", "QuiesceViolation",
    "DumpFailure", "TemplateMiss", "UnknownImage", "DeliverToWrongEpoch",
    "UnknownSnapshotId", "LightweightUnsound", "TraceError", "IntegrityError",
]
