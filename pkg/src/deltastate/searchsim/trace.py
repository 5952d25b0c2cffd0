"""Workload trace schema: JSON-lines events with seeded content.

Payloads are never stored in traces; every event carries a seed and
consumers derive identical bytes through :func:`deltastate.util.seeded_bytes`.
An ``exec`` event separates the command string (what a classifier sees)
from its simulated ``effects`` (what actually happens), so the two can
disagree on purpose.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from typing import IO, Iterable, Union

from ..errors import TraceError


@dataclass(frozen=True)
class WriteFile:
    path: str
    offset: int
    length: int
    seed: int


@dataclass(frozen=True)
class ReadScan:
    path: str


@dataclass(frozen=True)
class Unlink:
    path: str


@dataclass(frozen=True)
class MkDir:
    path: str


@dataclass(frozen=True)
class MemWrite:
    page: int
    count: int
    seed: int


@dataclass(frozen=True)
class Exec:
    cmd: str
    effects: tuple["Event", ...] = ()


@dataclass(frozen=True)
class LlmCall:
    window_ms: float


@dataclass(frozen=True)
class Checkpoint:
    label: str


@dataclass(frozen=True)
class Restore:
    label: str


@dataclass(frozen=True)
class RunTest:
    files: int
    pages: int
    seed: int


Event = Union[WriteFile, ReadScan, Unlink, MkDir, MemWrite, Exec, LlmCall,
              Checkpoint, Restore, RunTest]

_OPS = {
    "write": WriteFile, "read": ReadScan, "unlink": Unlink, "mkdir": MkDir,
    "mem_write": MemWrite, "exec": Exec, "llm_call": LlmCall,
    "checkpoint": Checkpoint, "restore": Restore, "run_test": RunTest,
}


def event_to_dict(ev: Event) -> dict:
    if isinstance(ev, WriteFile):
        return {"op": "write", "path": ev.path, "offset": ev.offset,
                "len": ev.length, "seed": ev.seed}
    if isinstance(ev, ReadScan):
        return {"op": "read", "path": ev.path}
    if isinstance(ev, Unlink):
        return {"op": "unlink", "path": ev.path}
    if isinstance(ev, MkDir):
        return {"op": "mkdir", "path": ev.path}
    if isinstance(ev, MemWrite):
        return {"op": "mem_write", "page": ev.page, "count": ev.count,
                "seed": ev.seed}
    if isinstance(ev, Exec):
        out = {"op": "exec", "cmd": ev.cmd}
        if ev.effects:
            out["effects"] = [event_to_dict(e) for e in ev.effects]
        return out
    if isinstance(ev, LlmCall):
        return {"op": "llm_call", "window_ms": ev.window_ms}
    if isinstance(ev, Checkpoint):
        return {"op": "checkpoint", "label": ev.label}
    if isinstance(ev, Restore):
        return {"op": "restore", "label": ev.label}
    if isinstance(ev, RunTest):
        return {"op": "run_test", "files": ev.files, "pages": ev.pages,
                "seed": ev.seed}
    raise TraceError(f"unknown event type {type(ev).__name__}")


def _need(raw: dict, key: str, lineno: int | None):
    if key not in raw:
        raise TraceError(f"missing field {key!r} in {raw.get('op')!r} event",
                         lineno)
    return raw[key]


def event_from_dict(raw: dict, lineno: int | None = None) -> Event:
    if not isinstance(raw, dict):
        raise TraceError("event must be a JSON object", lineno)
    op = raw.get("op")
    if op not in _OPS:
        raise TraceError(f"unknown op {op!r}", lineno)
    try:
        if op == "write":
            return WriteFile(str(_need(raw, "path", lineno)),
                             int(_need(raw, "offset", lineno)),
                             int(_need(raw, "len", lineno)),
                             int(_need(raw, "seed", lineno)))
        if op == "read":
            return ReadScan(str(_need(raw, "path", lineno)))
        if op == "unlink":
            return Unlink(str(_need(raw, "path", lineno)))
        if op == "mkdir":
            return MkDir(str(_need(raw, "path", lineno)))
        if op == "mem_write":
            return MemWrite(int(_need(raw, "page", lineno)),
                            int(raw.get("count", 1)),
                            int(_need(raw, "seed", lineno)))
        if op == "exec":
            effects = tuple(event_from_dict(e, lineno)
                            for e in raw.get("effects", []))
            return Exec(str(_need(raw, "cmd", lineno)), effects)
        if op == "llm_call":
            return LlmCall(float(_need(raw, "window_ms", lineno)))
        if op == "checkpoint":
            return Checkpoint(str(_need(raw, "label", lineno)))
        if op == "restore":
            return Restore(str(_need(raw, "label", lineno)))
        if op == "run_test":
            return RunTest(int(raw.get("files", 1)), int(raw.get("pages", 1)),
                           int(_need(raw, "seed", lineno)))
    except (TypeError, ValueError) as exc:
        raise TraceError(f"bad field in {op!r} event: {exc}", lineno)
    raise AssertionError(op)


def parse_trace(text: str) -> list[Event]:
    """Parse JSON-lines trace text; blank lines and # comments skipped."""
    events = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TraceError(f"invalid JSON: {exc.msg}", lineno)
        events.append(event_from_dict(raw, lineno))
    return events


def load_trace(source: str | IO[str]) -> list[Event]:
    if isinstance(source, str):
        with open(source, "r", encoding="utf-8") as fh:
            return parse_trace(fh.read())
    return parse_trace(source.read())


def dump_trace(events: Iterable[Event], sink: str | IO[str]) -> None:
    if isinstance(sink, str):
        with open(sink, "w", encoding="utf-8") as fh:
            dump_trace(events, fh)
            return
    for ev in events:
        sink.write(json.dumps(event_to_dict(ev), sort_keys=True) + "\n")
