"""Seeded random workload generation.

Traces come out of a self-consistent abstract model (file sizes, dirs,
pages, labels) that flows through its own checkpoints and restores, so a
generated trace never reads a file that cannot exist at that point. The
workload is organised in segments that each end in a checkpoint; segment
kinds (mutating vs read-only) drive whether the engine will take a
standard or lightweight checkpoint, and ``exact_segments`` pins the
lightweight fraction exactly for skip-rate experiments.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .trace import (Checkpoint, Event, Exec, LlmCall, MemWrite, MkDir,
                    ReadScan, Restore, RunTest, Unlink, WriteFile)

_RO_TEMPLATES = (
    "grep -rn TODO {path}",
    "cat {path}",
    "find /src -name '*.py'",
    "ls /src",
    "git diff",
    "python -m pytest --collect-only",
)
_MUT_TEMPLATES = (
    "pip install requests",
    "sed -i s/a/b/ {path}",
    "python setup.py build",
)


@dataclass
class _World:
    """Abstract state the generator believes in."""

    files: dict[str, int]                 # path -> size
    dirs: set[str]
    pages: set[int]

    def copy(self) -> "_World":
        return _World(dict(self.files), set(self.dirs), set(self.pages))


def generate_trace(seed: int, *, length: int = 120, base_files: int = 6,
                   base_file_size: int = 2048, page_count: int = 64,
                   initial_pages: int = 8, ro_fraction: float = 0.35,
                   exact_segments: tuple[int, int] | None = None,
                   restore_weight: float = 0.18,
                   max_file_size: int = 65536) -> list[Event]:
    """Generate a valid trace of at most ``length`` events.

    ``exact_segments=(ro, mut)`` emits exactly that many read-only and
    mutating checkpointed segments in seeded order (restores and tests
    still interleave); otherwise segment kinds are drawn with
    ``ro_fraction``.
    """
    rng = random.Random(f"trace:{seed}")
    world = _World({f"/src/f{i}.py": base_file_size
                    for i in range(base_files)},
                   {"/", "/src", "/work"},
                   set(range(initial_pages)))
    labels: dict[str, _World] = {"root": world.copy()}
    label_order = ["root"]
    events: list[Event] = []
    name_counter = 0
    label_counter = 0
    used_paths: set[str] = set(world.files)

    deck: list[str] | None = None
    if exact_segments is not None:
        ro, mut = exact_segments
        deck = ["ro"] * ro + ["mut"] * mut
        rng.shuffle(deck)

    def fresh_path() -> str:
        nonlocal name_counter
        parent = rng.choice(sorted(world.dirs - {"/"}))
        name_counter += 1
        p = f"{parent}/g{name_counter}.txt"
        used_paths.add(p)
        return p

    def pick_write_target() -> str:
        absent = sorted(used_paths - set(world.files))
        r = rng.random()
        if world.files and r < 0.6:
            return rng.choice(sorted(world.files))
        if absent and r < 0.7:
            return rng.choice(absent)       # resurrect over a whiteout
        return fresh_path()

    def mutating_action() -> Event:
        r = rng.random()
        if r < 0.50:
            path = pick_write_target()
            size = world.files.get(path, 0)
            offset = rng.randrange(0, size + 1)
            n = rng.randint(1, 6000)
            if offset + n > max_file_size:
                offset, n = 0, min(n, max_file_size)
            world.files[path] = max(size, offset + n)
            return WriteFile(path, offset, n, rng.getrandbits(32))
        if r < 0.75:
            page = rng.randrange(page_count)
            count = rng.randint(1, 3)
            for i in range(count):
                world.pages.add(page + i)
            return MemWrite(page, count, rng.getrandbits(32))
        if r < 0.85 and world.files:
            path = rng.choice(sorted(world.files))
            del world.files[path]
            return Unlink(path)
        if r < 0.95:
            nonlocal name_counter
            name_counter += 1
            parent = rng.choice(sorted(world.dirs))
            d = f"{parent}/d{name_counter}".replace("//", "/")
            world.dirs.add(d)
            return MkDir(d)
        path = pick_write_target()
        size = world.files.get(path, 0)
        n = rng.randint(1, 2048)
        world.files[path] = max(size, n)
        eff = (WriteFile(path, 0, n, rng.getrandbits(32)),)
        return Exec(rng.choice(_MUT_TEMPLATES).format(path=path), eff)

    def read_only_action(force_exec: bool = False) -> Event:
        if not force_exec and world.files and rng.random() < 0.4:
            return ReadScan(rng.choice(sorted(world.files)))
        tmpl = rng.choice(_RO_TEMPLATES)
        path = rng.choice(sorted(world.files)) if world.files else "/src"
        effects = ()
        if "{path}" in tmpl and world.files and rng.random() < 0.7:
            effects = (ReadScan(path),)
        return Exec(tmpl.format(path=path), effects)

    def emit_segment(kind: str) -> None:
        nonlocal label_counter
        count = rng.randint(1, 3)
        if kind == "mut":
            events.extend(mutating_action() for _ in range(count))
        else:
            seg = [read_only_action() for _ in range(count)]
            # bare reads carry no command; a segment classifies as a
            # read-only skip only when at least one exec backs it
            if not any(isinstance(ev, Exec) for ev in seg):
                seg[-1] = read_only_action(force_exec=True)
            events.extend(seg)
        label_counter += 1
        label = f"n{label_counter}"
        events.append(Checkpoint(label))
        labels[label] = world.copy()
        label_order.append(label)

    def emit_restore() -> None:
        nonlocal world
        label = rng.choice(label_order)
        events.append(Restore(label))
        world = labels[label].copy()

    while len(events) < length - 5:
        if deck is not None:
            if not deck:
                break
            r = rng.random()
            if r < restore_weight and len(label_order) > 1:
                emit_restore()
            elif r < restore_weight + 0.06:
                events.append(RunTest(rng.randint(1, 2), rng.randint(1, 3),
                                      rng.getrandbits(32)))
            else:
                emit_segment(deck.pop())
            continue
        r = rng.random()
        if r < restore_weight and len(label_order) > 1:
            emit_restore()
        elif r < restore_weight + 0.05:
            events.append(RunTest(rng.randint(1, 2), rng.randint(1, 3),
                                  rng.getrandbits(32)))
        elif r < restore_weight + 0.10:
            events.append(LlmCall(float(rng.choice((0, 500, 2000, 4000)))))
        else:
            emit_segment("ro" if rng.random() < ro_fraction else "mut")
    while deck:
        emit_segment(deck.pop())
    return events
