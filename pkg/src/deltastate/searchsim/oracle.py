"""Brute-force references the engine is validated against.

:class:`OracleManager` is the semantic oracle: full deep copies of the
(file, memory) state at every checkpoint, restore by wholesale replacement.
It shares nothing, so any divergence from the layered engine is the
engine's bug.

:class:`ShadowAccountant` is the copy-accounting oracle: it replays the
block store's logical op log (clone / write / share / drop) and tracks
sharing groups with its own tokens, never reading a refcount. Each time a
write hits a group of size > 1, that is one privatization; full-recopy
clones count every block they duplicate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

from ..blockstore import BLOCK_SIZE
from ..util import normalize_path, parent_dir, splice


class OracleManager:
    """Full-copy checkpointing of a plain dict world."""

    def __init__(self, base_image: Mapping[str, bytes] | None = None,
                 initial_memory: Mapping[int, bytes] | None = None):
        self.fs: dict[str, bytes] = {}
        self.dirs: set[str] = {"/"}
        for path, content in (base_image or {}).items():
            path = normalize_path(path)
            self.fs[path] = bytes(content)
            self._ensure_dirs(parent_dir(path))
        self.mem: dict[int, bytes] = {
            page: self._pad(content)
            for page, content in (initial_memory or {}).items()}
        self.snapshots: dict[str, tuple] = {}

    @staticmethod
    def _pad(content: bytes) -> bytes:
        return content[:BLOCK_SIZE].ljust(BLOCK_SIZE, b"\0")

    def _ensure_dirs(self, path: str) -> None:
        while path not in self.dirs:
            self.dirs.add(path)
            path = parent_dir(path)

    # -- state ops ----------------------------------------------------------

    def write_file(self, path: str, offset: int, data: bytes) -> None:
        path = normalize_path(path)
        old = self.fs.get(path, b"")
        if len(old) < offset:
            old = old.ljust(offset, b"\0")
        self.fs[path] = splice(old, offset, data)
        self._ensure_dirs(parent_dir(path))

    def read_file(self, path: str) -> bytes:
        return self.fs[normalize_path(path)]

    def unlink(self, path: str) -> None:
        del self.fs[normalize_path(path)]

    def mkdir(self, path: str) -> None:
        path = normalize_path(path)
        self.dirs.add(path)
        self._ensure_dirs(parent_dir(path))

    def readdir(self, path: str) -> list[str]:
        path = normalize_path(path)
        names = set()
        for p in list(self.fs) + list(self.dirs):
            if p != "/" and parent_dir(p) == path:
                names.add(p.rsplit("/", 1)[-1])
        return sorted(names)

    def mem_write(self, page: int, data: bytes) -> None:
        old = self.mem.get(page, bytes(BLOCK_SIZE))
        self.mem[page] = splice(old, 0, data)[:BLOCK_SIZE]

    # -- checkpoint / restore ----------------------------------------------

    def checkpoint(self, label: str) -> None:
        self.snapshots[label] = (dict(self.fs), set(self.dirs),
                                 dict(self.mem))

    def restore(self, label: str) -> None:
        fs, dirs, mem = self.snapshots[label]
        self.fs = dict(fs)
        self.dirs = set(dirs)
        self.mem = dict(mem)

    def drop(self, label: str) -> None:
        self.snapshots.pop(label, None)


class ShadowAccountant:
    """Replays logical sharing ops; counts privatizations independently.

    Slots are (owner, index) cells; cells sharing one token are CoW
    aliases. A write to a cell whose token group has more than one member
    splits one member off -- a privatization. The op vocabulary matches
    what :class:`deltastate.blockstore.BlockStore` records plus the page
    ops the process engine records:

    - ``("new", map_id)`` / ``("clone", src, dst, mode)`` /
      ``("write", map_id, idx)`` / ``("drop", map_id)`` for extent maps;
    - ``("pnew", owner, idx)`` / ``("pshare", dst, idx, src, src_idx)`` /
      ``("pwrite", owner, idx)`` / ``("pdrop", owner)`` for page maps.
    """

    def __init__(self):
        self._slots: dict[object, dict[int, int]] = {}
        self._group: dict[int, int] = {}
        self._next_token = 1
        self.privatizations = 0
        self.recopied_blocks = 0

    # one op log can interleave both families; dispatch on tag
    def apply(self, op: tuple) -> None:
        tag = op[0]
        if tag == "new":
            self._slots[("m", op[1])] = {}
        elif tag == "clone":
            self._clone(("m", op[1]), ("m", op[2]), op[3])
        elif tag == "write":
            self._write(("m", op[1]), op[2])
        elif tag == "drop":
            self._drop(("m", op[1]))
        elif tag == "pnew":
            self._slots.setdefault(("p", op[1]), {})
            self._fresh(("p", op[1]), op[2])
        elif tag == "pshare":
            self._share(("p", op[1]), op[2], ("p", op[3]), op[4])
        elif tag == "pwrite":
            self._write(("p", op[1]), op[2])
        elif tag == "pdrop":
            self._drop(("p", op[1]))
        else:
            raise ValueError(f"unknown shadow op {tag!r}")

    def replay(self, ops) -> "ShadowAccountant":
        for op in ops:
            self.apply(op)
        return self

    @property
    def expected_bytes_copied(self) -> int:
        return (self.privatizations + self.recopied_blocks) * BLOCK_SIZE

    # -- internals ----------------------------------------------------------

    def _new_token(self) -> int:
        tok = self._next_token
        self._next_token += 1
        self._group[tok] = 1
        return tok

    def _fresh(self, owner, idx) -> None:
        cells = self._slots[owner]
        if idx in cells:
            self._release(cells[idx])
        cells[idx] = self._new_token()

    def _clone(self, src, dst, mode: str) -> None:
        cells = {}
        for idx, tok in self._slots[src].items():
            if mode == "reflink":
                self._group[tok] += 1
                cells[idx] = tok
            else:
                self.recopied_blocks += 1
                cells[idx] = self._new_token()
        self._slots[dst] = cells

    def _share(self, dst, idx, src, src_idx) -> None:
        tok = self._slots[src][src_idx]
        self._group[tok] += 1
        self._slots.setdefault(dst, {})[idx] = tok

    def _write(self, owner, idx) -> None:
        cells = self._slots.setdefault(owner, {})
        tok = cells.get(idx)
        if tok is None:
            cells[idx] = self._new_token()
        elif self._group[tok] > 1:
            self._group[tok] -= 1
            cells[idx] = self._new_token()
            self.privatizations += 1
        # group of one: in-place update, nothing to account

    def _drop(self, owner) -> None:
        cells = self._slots.pop(owner, {})
        for tok in cells.values():
            self._release(tok)

    def _release(self, tok: int) -> None:
        self._group[tok] -= 1
        if self._group[tok] == 0:
            del self._group[tok]

    @property
    def live_groups(self) -> int:
        return len(self._group)
