"""Flat key=value configuration with flag > env > file precedence.

The config file format is one ``key = value`` per line, ``#`` comments.
Recognised keys mirror the CLI flags (seed, gc, pool, warm, mode, ...)
plus dotted extras like ``fault.dump_at`` and ``classifier.read_only``
(comma-separated pattern list).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

from .statemanager import Classifier, CostModel, GcPolicy

SEED_ENV = "DELTASTATE_SEED"


def _with_field(model: CostModel, name: str, value: float) -> CostModel:
    fields = {f: getattr(model, f) for f in model.__dataclass_fields__}
    fields[name] = value
    return CostModel(**fields)


def parse_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, "
                                 f"got {line!r}")
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    return values


@dataclass
class Settings:
    """Resolved run settings after merging all sources."""

    seed: int = 0
    mode: str = "both"
    gc: GcPolicy = field(default_factory=GcPolicy.keep_all)
    pool_capacity: int = 8
    warm_mode: str = "off"
    fault_dump_at: int | None = None
    verify_lightweight: bool = True
    classifier: Classifier = field(default_factory=Classifier)
    cost_model: CostModel = field(default_factory=CostModel)
    base_files: int = 6
    base_file_size: int = 2048
    initial_pages: int = 8

    @classmethod
    def resolve(cls, *, flags: dict | None = None,
                config_path: str | None = None,
                env: dict | None = None) -> "Settings":
        """Merge defaults <- file <- env(seed) <- explicit flags."""
        env = os.environ if env is None else env
        merged: dict[str, str] = {}
        if config_path:
            merged.update(parse_config_file(config_path))
        if env.get(SEED_ENV):
            merged["seed"] = env[SEED_ENV]
        for key, value in (flags or {}).items():
            if value is not None:
                merged[key] = str(value)
        s = cls()
        known = {
            "seed": lambda v: setattr(s, "seed", int(v)),
            "mode": lambda v: setattr(s, "mode", v),
            "gc": lambda v: setattr(s, "gc", GcPolicy.parse(v)),
            "pool": lambda v: setattr(s, "pool_capacity", int(v)),
            "warm": lambda v: setattr(s, "warm_mode", v),
            "fault.dump_at": lambda v: setattr(s, "fault_dump_at", int(v)),
            "verify_lightweight": lambda v: setattr(
                s, "verify_lightweight", v.lower() in ("1", "true", "yes")),
            "classifier.read_only": lambda v: setattr(
                s, "classifier",
                Classifier(tuple(p.strip() for p in v.split(",")
                                 if p.strip()))),
            "base.files": lambda v: setattr(s, "base_files", int(v)),
            "base.file_size": lambda v: setattr(s, "base_file_size", int(v)),
            "base.pages": lambda v: setattr(s, "initial_pages", int(v)),
            "llm.window_ms": lambda v: setattr(
                s, "cost_model",
                _with_field(s.cost_model, "llm_window", float(v))),
        }
        for key, value in merged.items():
            if key in known:
                known[key](value)
            elif key.startswith("cost."):
                name = "t_" + key[5:] if not key[5:].startswith("t_") \
                    else key[5:]
                if not hasattr(s.cost_model, name):
                    raise ValueError(f"unknown cost key {key!r}")
                s.cost_model = _with_field(s.cost_model, name, float(value))
            else:
                raise ValueError(f"unknown config key {key!r}")
        return s
