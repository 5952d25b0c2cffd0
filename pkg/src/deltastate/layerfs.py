"""Layered copy-on-write filesystem with runtime layer switching.

A mounted stack is an ordered list of frozen read-only lower layers plus one
writable upper. ``checkpoint_switch`` freezes the upper, splices it in as
the topmost lower and installs a fresh upper; ``restore_switch`` rebuilds
the stack from a previously captured :class:`LayerConfig`. Neither touches
file data, and open handles survive both: each handle caches the generation
it last resolved under and lazily re-resolves (with deferred copy-up on
first write) when the generation has moved on.

Retired stack arrangements are kept for two further generations before
their layer references are released, so a handle that raced a switch can
still reach the entry it resolved.
"""

from __future__ import annotations

import hashlib
import json
import threading
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping

from .blockstore import BlockStore, ExtentMap
from .errors import (AlreadyExists, IsDirectory, NotFound, StaleAfterRestore,
                     StoreError, UnknownLayer)
from .util import basename, normalize_path, parent_dir

RETIRE_GENERATIONS = 2


class EntryKind(Enum):
    FILE = "file"
    DIR = "dir"
    WHITEOUT = "whiteout"


@dataclass
class LayerEntry:
    kind: EntryKind
    created_gen: int
    extents: ExtentMap | None = None


class Layer:
    def __init__(self, layer_id: int):
        self.layer_id = layer_id
        self.entries: dict[str, LayerEntry] = {}
        self.frozen_at_gen: int | None = None
        self.digest: str | None = None

    @property
    def frozen(self) -> bool:
        return self.frozen_at_gen is not None


@dataclass(frozen=True)
class LayerConfig:
    """Serializable description of one stack arrangement."""

    lowers: tuple[int, ...]
    upper: int
    gen: int

    def to_json(self) -> str:
        return json.dumps({"lowers": list(self.lowers),
                           "upper": self.upper, "gen": self.gen})

    @classmethod
    def from_json(cls, text: str) -> "LayerConfig":
        raw = json.loads(text)
        return cls(lowers=tuple(int(x) for x in raw["lowers"]),
                   upper=int(raw["upper"]), gen=int(raw["gen"]))


class OpenMode(Enum):
    READ = "r"
    READ_WRITE = "rw"


class Handle:
    """An open file. Survives switches by lazy re-resolution."""

    __slots__ = ("handle_id", "path", "mode", "cached_gen", "_layer", "_entry")

    def __init__(self, handle_id: int, path: str, mode: OpenMode,
                 gen: int, layer_id: int, entry: LayerEntry):
        self.handle_id = handle_id
        self.path = path
        self.mode = mode
        self.cached_gen = gen
        self._layer = layer_id
        self._entry = entry


@dataclass
class _Retired:
    members: tuple[int, ...]
    retired_at: int


class _RWLock:
    """Many concurrent handle ops, or exactly one switch."""

    def __init__(self):
        self._cond = threading.Condition()
        self._readers = 0
        self._writing = False

    @contextmanager
    def read(self):
        with self._cond:
            while self._writing:
                self._cond.wait()
            self._readers += 1
        try:
            yield
        finally:
            with self._cond:
                self._readers -= 1
                if self._readers == 0:
                    self._cond.notify_all()

    @contextmanager
    def write(self):
        with self._cond:
            while self._writing or self._readers:
                self._cond.wait()
            self._writing = True
        try:
            yield
        finally:
            with self._cond:
                self._writing = False
                self._cond.notify_all()


class LayerFs:
    """Mounted layer stack over a shared :class:`BlockStore`."""

    def __init__(self, store: BlockStore, base_image: Mapping[str, bytes]):
        self.store = store
        self._layers: dict[int, Layer] = {}
        self._layer_refs: dict[int, int] = defaultdict(int)
        self._next_layer = 1
        self._next_handle = 1
        self._gen = 0
        self.copy_up_count = 0
        self.switch_count = 0
        self._retired: list[_Retired] = []
        self._stack_lock = _RWLock()
        self._path_locks: defaultdict[str, threading.Lock] = \
            defaultdict(threading.Lock)
        self._dir_cache: dict[str, list[str]] = {}
        self._closed = False

        base = self._new_layer()
        base.entries["/"] = LayerEntry(EntryKind.DIR, 0)
        for path, content in sorted(base_image.items()):
            path = normalize_path(path)
            if path == "/":
                continue
            self._ensure_dirs(base, parent_dir(path), 0)
            base.entries[path] = LayerEntry(
                EntryKind.FILE, 0, store.map_from_bytes(content))
        self._freeze(base)
        upper = self._new_layer()
        self._lowers: list[int] = [base.layer_id]
        self._upper_id = upper.layer_id
        for lid in self._stack_members():
            self._layer_refs[lid] += 1

    # -- layer bookkeeping -------------------------------------------------

    def _new_layer(self) -> Layer:
        layer = Layer(self._next_layer)
        self._next_layer += 1
        self._layers[layer.layer_id] = layer
        return layer

    def _ensure_dirs(self, layer: Layer, path: str, gen: int) -> None:
        while path != "/" and path not in layer.entries:
            layer.entries[path] = LayerEntry(EntryKind.DIR, gen)
            path = parent_dir(path)

    def _freeze(self, layer: Layer) -> None:
        layer.frozen_at_gen = self._gen
        layer.digest = self._layer_digest(layer)

    def _layer_digest(self, layer: Layer) -> str:
        h = hashlib.sha256()
        for path in sorted(layer.entries):
            e = layer.entries[path]
            h.update(path.encode())
            h.update(e.kind.value.encode())
            if e.kind is EntryKind.FILE:
                h.update(e.extents.file_size.to_bytes(8, "big"))
                for idx in sorted(e.extents.blocks):
                    h.update(idx.to_bytes(8, "big"))
                    h.update(self.store.block_content(e.extents.blocks[idx]))
        return h.hexdigest()

    def _stack_members(self) -> tuple[int, ...]:
        return tuple(self._lowers) + (self._upper_id,)

    def _release_layer_ref(self, layer_id: int) -> None:
        self._layer_refs[layer_id] -= 1
        n = self._layer_refs[layer_id]
        if n < 0:
            raise StoreError(f"layer {layer_id} over-released")
        if n == 0:
            layer = self._layers.pop(layer_id)
            del self._layer_refs[layer_id]
            for entry in layer.entries.values():
                if entry.kind is EntryKind.FILE:
                    self.store.drop_map(entry.extents)

    def retain_config(self, cfg: LayerConfig) -> None:
        """Pin every layer a registered checkpoint names."""
        for lid in cfg.lowers + (cfg.upper,):
            if lid not in self._layers:
                raise UnknownLayer(f"layer {lid} not registered")
            self._layer_refs[lid] += 1

    def release_config(self, cfg: LayerConfig) -> None:
        for lid in cfg.lowers + (cfg.upper,):
            self._release_layer_ref(lid)

    # -- resolution --------------------------------------------------------

    def _resolve(self, path: str) -> tuple[int, LayerEntry] | None:
        """Walk upper-to-lower; whiteouts mask everything below."""
        for lid in (self._upper_id, *self._lowers):
            entry = self._layers[lid].entries.get(path)
            if entry is not None:
                if entry.kind is EntryKind.WHITEOUT:
                    return None
                return lid, entry
        return None

    def _resolve_lower(self, path: str) -> tuple[int, LayerEntry] | None:
        for lid in self._lowers:
            entry = self._layers[lid].entries.get(path)
            if entry is not None:
                if entry.kind is EntryKind.WHITEOUT:
                    return None
                return lid, entry
        return None

    def exists(self, path: str) -> bool:
        with self._stack_lock.read():
            return self._resolve(normalize_path(path)) is not None

    def is_dir(self, path: str) -> bool:
        with self._stack_lock.read():
            r = self._resolve(normalize_path(path))
            return r is not None and r[1].kind is EntryKind.DIR

    # -- handle operations -------------------------------------------------

    def open(self, path: str, mode: OpenMode = OpenMode.READ,
             create: bool = False) -> Handle:
        path = normalize_path(path)
        with self._stack_lock.read(), self._path_locks[path]:
            r = self._resolve(path)
            if r is None:
                if not (create and mode is OpenMode.READ_WRITE):
                    raise NotFound(path)
                upper = self._layers[self._upper_id]
                parent = parent_dir(path)
                pr = self._resolve(parent)
                if pr is None:
                    self._ensure_dirs(upper, parent, self._gen)
                elif pr[1].kind is not EntryKind.DIR:
                    raise IsDirectory(f"parent of {path} is a file")
                entry = LayerEntry(EntryKind.FILE, self._gen,
                                   self.store.new_map())
                upper.entries[path] = entry
                self._dir_cache.clear()
                r = (self._upper_id, entry)
            lid, entry = r
            if entry.kind is EntryKind.DIR:
                raise IsDirectory(path)
            h = Handle(self._next_handle, path, mode, self._gen, lid, entry)
            self._next_handle += 1
            return h

    def _revalidate(self, h: Handle) -> None:
        """Slow path: the stack switched since this handle last resolved."""
        r = self._resolve(h.path)
        if r is None:
            raise StaleAfterRestore(h.path)
        if r[1].kind is EntryKind.DIR:
            raise IsDirectory(h.path)
        h._layer, h._entry = r
        h.cached_gen = self._gen

    def write(self, h: Handle, offset: int, data: bytes) -> int:
        """Write through a handle; copy-up happens here, on first write."""
        if h.mode is not OpenMode.READ_WRITE:
            raise StoreError(f"handle {h.handle_id} is read-only")
        with self._stack_lock.read(), self._path_locks[h.path]:
            if h.cached_gen != self._gen:
                self._revalidate(h)
            if h._layer != self._upper_id:
                entry = self._copy_up(h.path)
                h._layer, h._entry = self._upper_id, entry
            return self.store.write_range(h._entry.extents, offset, data)

    def read(self, h: Handle, offset: int = 0,
             length: int | None = None) -> bytes:
        with self._stack_lock.read(), self._path_locks[h.path]:
            if h.cached_gen != self._gen:
                self._revalidate(h)
            m = h._entry.extents
            if length is None:
                length = m.file_size - offset
            return self.store.read_range(m, offset, length)

    def file_size(self, h: Handle) -> int:
        with self._stack_lock.read(), self._path_locks[h.path]:
            if h.cached_gen != self._gen:
                self._revalidate(h)
            return h._entry.extents.file_size

    def _copy_up(self, path: str) -> LayerEntry:
        """Bring a lower-resident file into the upper layer.

        Called with the path lock held. If another handle already copied
        this path up in the current generation, that entry wins and is
        reused -- the same-name race resolves to one surviving copy.
        """
        upper = self._layers[self._upper_id]
        existing = upper.entries.get(path)
        if existing is not None and existing.kind is EntryKind.FILE:
            if existing.created_gen == self._gen:
                return existing
            raise StoreError(f"upper entry for {path} outlived its switch")
        r = self._resolve_lower(path)
        if r is None or r[1].kind is not EntryKind.FILE:
            raise StaleAfterRestore(path)
        clone = self.store.clone_map(r[1].extents)
        entry = LayerEntry(EntryKind.FILE, self._gen, clone)
        upper.entries[path] = entry
        self.copy_up_count += 1
        return entry

    # -- whole-path convenience (no persistent handle) ---------------------

    def read_file(self, path: str) -> bytes:
        path = normalize_path(path)
        with self._stack_lock.read(), self._path_locks[path]:
            r = self._resolve(path)
            if r is None:
                raise NotFound(path)
            if r[1].kind is EntryKind.DIR:
                raise IsDirectory(path)
            return self.store.read_all(r[1].extents)

    def unlink(self, path: str) -> None:
        """Remove a file; mask any lower copy with a whiteout."""
        path = normalize_path(path)
        with self._stack_lock.read(), self._path_locks[path]:
            r = self._resolve(path)
            if r is None:
                raise NotFound(path)
            if r[1].kind is EntryKind.DIR:
                raise IsDirectory(path)
            upper = self._layers[self._upper_id]
            entry = upper.entries.get(path)
            if entry is not None and entry.kind is EntryKind.FILE:
                self.store.drop_map(entry.extents)
                del upper.entries[path]
            if self._resolve_lower(path) is not None:
                upper.entries[path] = LayerEntry(EntryKind.WHITEOUT,
                                                 self._gen)
            self._invalidate_listing(parent_dir(path))

    def mkdir(self, path: str) -> None:
        """Create a directory (parents included); idempotent for dirs."""
        path = normalize_path(path)
        with self._stack_lock.read(), self._path_locks[path]:
            r = self._resolve(path)
            if r is not None:
                if r[1].kind is EntryKind.DIR:
                    return
                raise AlreadyExists(f"{path} exists as a file")
            upper = self._layers[self._upper_id]
            if upper.entries.get(path) is not None:     # buried whiteout
                del upper.entries[path]
            upper.entries[path] = LayerEntry(EntryKind.DIR, self._gen)
            self._ensure_dirs(upper, parent_dir(path), self._gen)
            self._dir_cache.clear()

    def readdir(self, path: str) -> list[str]:
        """Merged listing: upper wins per name, whiteouts mask."""
        path = normalize_path(path)
        with self._stack_lock.read():
            cached = self._dir_cache.get(path)
            if cached is not None:
                return list(cached)
            r = self._resolve(path)
            if r is None:
                raise NotFound(path)
            if r[1].kind is not EntryKind.DIR:
                raise IsDirectory(f"{path} is not a directory")
            names: dict[str, EntryKind] = {}
            for lid in (self._upper_id, *self._lowers):
                for p, e in self._layers[lid].entries.items():
                    if p != "/" and parent_dir(p) == path:
                        names.setdefault(basename(p), e.kind)
            listing = sorted(n for n, k in names.items()
                             if k is not EntryKind.WHITEOUT)
            self._dir_cache[path] = listing
            return list(listing)

    def _invalidate_listing(self, path: str) -> None:
        self._dir_cache.pop(path, None)

    def materialize(self) -> dict[str, bytes]:
        """Full merged view, path -> content. Read-only; no copies charged."""
        with self._stack_lock.read():
            seen: dict[str, LayerEntry] = {}
            for lid in (self._upper_id, *self._lowers):
                for p, e in self._layers[lid].entries.items():
                    seen.setdefault(p, e)
            return {p: self.store.read_all(e.extents)
                    for p, e in sorted(seen.items())
                    if e.kind is EntryKind.FILE}

    # -- switching ---------------------------------------------------------

    @property
    def checkpoint_gen(self) -> int:
        return self._gen

    @property
    def upper_entry_count(self) -> int:
        return len(self._layers[self._upper_id].entries)

    def current_config(self) -> LayerConfig:
        with self._stack_lock.read():
            return LayerConfig(tuple(self._lowers), self._upper_id, self._gen)

    def checkpoint_switch(self) -> LayerConfig:
        """Freeze the upper, demote it to topmost lower, mount fresh upper.

        Constant-time in metadata, zero data bytes; returns the new
        arrangement for checkpoint registration.
        """
        with self._stack_lock.write():
            old_members = self._stack_members()
            upper = self._layers[self._upper_id]
            self._freeze(upper)
            fresh = self._new_layer()
            self._lowers.insert(0, self._upper_id)
            self._upper_id = fresh.layer_id
            self._gen += 1
            self._finish_switch(old_members)
            return LayerConfig(tuple(self._lowers), self._upper_id, self._gen)

    def restore_switch(self, target: LayerConfig) -> None:
        """Rearrange the stack to a registered config with a fresh upper.

        The named upper layer is validated but never remounted writable;
        writes after a restore land in a brand-new empty upper, so frozen
        history is immune to post-restore activity.
        """
        with self._stack_lock.write():
            for lid in target.lowers + (target.upper,):
                if lid not in self._layers:
                    raise UnknownLayer(f"layer {lid} is gone")
            for lid in target.lowers:
                if not self._layers[lid].frozen:
                    raise UnknownLayer(f"layer {lid} is not frozen")
            old_members = self._stack_members()
            fresh = self._new_layer()
            self._lowers = list(target.lowers)
            self._upper_id = fresh.layer_id
            self._gen += 1
            self._finish_switch(old_members)

    def _finish_switch(self, old_members: tuple[int, ...]) -> None:
        # The old arrangement keeps its references until two generations
        # from now, covering handles that resolved just before the switch.
        self._retired.append(_Retired(old_members, self._gen))
        for lid in self._stack_members():
            self._layer_refs[lid] += 1
        self.switch_count += 1
        self._dir_cache.clear()
        self._reap_retired()

    def _reap_retired(self) -> None:
        while self._retired and \
                self._gen >= self._retired[0].retired_at + RETIRE_GENERATIONS:
            for lid in self._retired.pop(0).members:
                self._release_layer_ref(lid)

    # -- integrity helpers -------------------------------------------------

    def layer_count(self) -> int:
        return len(self._layers)

    def frozen_digest(self, layer_id: int) -> str | None:
        return self._layers[layer_id].digest

    def verify_frozen_digests(self) -> list[str]:
        """Re-hash every frozen layer; immutability violations by id."""
        with self._stack_lock.read():
            bad = []
            for lid, layer in self._layers.items():
                if layer.frozen and self._layer_digest(layer) != layer.digest:
                    bad.append(f"layer {lid} digest changed after freeze")
            return bad

    def iter_extent_refs(self):
        """Yield every (block_id, holder) a layer contributes; for fsck."""
        for lid, layer in self._layers.items():
            for path, entry in layer.entries.items():
                if entry.kind is EntryKind.FILE:
                    for bid in entry.extents.blocks.values():
                        yield bid, f"layer{lid}:{path}"

    def close(self) -> None:
        """Release stack and retirement references (registered configs are
        the caller's to release first)."""
        if self._closed:
            return
        self._closed = True
        with self._stack_lock.write():
            for r in self._retired:
                for lid in r.members:
                    self._release_layer_ref(lid)
            self._retired.clear()
            for lid in self._stack_members():
                self._release_layer_ref(lid)
