"""Refcounted 4 KiB block storage with reference-sharing extent clones.

Every byte of file and memory state in the model lives here. Files hold an
:class:`ExtentMap` (block index -> physical block id); memory pages and dump
images reference physical blocks directly. Cloning shares blocks by
refcount; the first write to a shared block privatizes it, and exactly those
privatizations (plus full-recopy clones) are charged to
``data_bytes_copied``.

Block content is an immutable ``bytes`` object replaced on write, never
mutated in place while shared -- aliasing a block is therefore always safe,
and identical payloads written to many blocks share one underlying object.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterator

from .errors import StoreError
from .util import splice

BLOCK_SIZE = 4096
ZERO_BLOCK = bytes(BLOCK_SIZE)


class ShareMode(Enum):
    """How ``clone_map`` propagates data: by reference or by recopy."""

    REFLINK = "reflink"
    FULL_COPY = "fullcopy"


@dataclass
class StoreStats:
    """Copy/metadata accounting.

    ``physical_block_count`` is a live gauge (drops when blocks free);
    ``data_bytes_copied`` and ``metadata_ops`` are cumulative and monotone.
    """

    physical_block_count: int = 0
    data_bytes_copied: int = 0
    metadata_ops: int = 0

    def snapshot(self) -> "StoreStats":
        return StoreStats(self.physical_block_count,
                          self.data_bytes_copied, self.metadata_ops)

    def as_dict(self) -> dict:
        return {
            "physical_block_count": self.physical_block_count,
            "data_bytes_copied": self.data_bytes_copied,
            "metadata_ops": self.metadata_ops,
        }


class _Block:
    __slots__ = ("content", "refcount")

    def __init__(self, content: bytes):
        self.content = content
        self.refcount = 1


class ExtentMap:
    """Sparse block map for one file. Missing indices read as zeros."""

    __slots__ = ("map_id", "file_size", "blocks", "dropped")

    def __init__(self, map_id: int):
        self.map_id = map_id
        self.file_size = 0
        self.blocks: dict[int, int] = {}
        self.dropped = False

    @property
    def block_count(self) -> int:
        return len(self.blocks)


class BlockStore:
    """Shared physical block pool with copy-on-write accounting.

    ``recorder``, when set, receives one tuple per logical sharing event
    (clone / write / share / drop); an independent accountant can replay
    that log to re-derive the copy charges without looking at refcounts.
    """

    def __init__(self, mode: ShareMode = ShareMode.REFLINK,
                 recorder: Callable[[tuple], None] | None = None):
        self.mode = mode
        self.stats = StoreStats()
        self.recorder = recorder
        self._lock = threading.RLock()
        self._blocks: dict[int, _Block] = {}
        self._next_block = 1
        self._next_map = 1

    # -- recording ---------------------------------------------------------

    def record(self, op: tuple) -> None:
        if self.recorder is not None:
            self.recorder(op)

    # -- raw block interface (used for memory pages and dump images) -------

    def alloc_block(self, content: bytes) -> int:
        """Register fresh content (padded/truncated to one block). No copy
        charge: the bytes never existed in the store before."""
        if len(content) != BLOCK_SIZE:
            content = content[:BLOCK_SIZE].ljust(BLOCK_SIZE, b"\0")
        with self._lock:
            bid = self._next_block
            self._next_block += 1
            self._blocks[bid] = _Block(content)
            self.stats.physical_block_count += 1
            return bid

    def ref_block(self, block_id: int) -> int:
        with self._lock:
            self._blocks[block_id].refcount += 1
            return block_id

    def unref_block(self, block_id: int) -> None:
        with self._lock:
            blk = self._blocks[block_id]
            blk.refcount -= 1
            if blk.refcount == 0:
                del self._blocks[block_id]
                self.stats.physical_block_count -= 1
            elif blk.refcount < 0:
                raise StoreError(f"negative refcount on block {block_id}")

    def block_content(self, block_id: int) -> bytes:
        with self._lock:
            return self._blocks[block_id].content

    def block_refcount(self, block_id: int) -> int:
        with self._lock:
            return self._blocks[block_id].refcount

    def cow_block(self, block_id: int, offset: int,
                  piece: bytes) -> tuple[int, bool]:
        """Write ``piece`` into a referenced block, privatizing if shared.

        Returns ``(block_id, privatized)``. When the block is exclusively
        held its content object is replaced in place (no charge); when
        shared, the caller's reference moves to a fresh private copy and
        one block of copying is charged.
        """
        with self._lock:
            blk = self._blocks[block_id]
            if offset == 0 and len(piece) == BLOCK_SIZE:
                new_content = piece
            else:
                new_content = splice(blk.content, offset, piece)
            if blk.refcount == 1:
                blk.content = new_content
                return block_id, False
            blk.refcount -= 1
            nid = self._next_block
            self._next_block += 1
            self._blocks[nid] = _Block(new_content)
            self.stats.physical_block_count += 1
            self.stats.data_bytes_copied += BLOCK_SIZE
            return nid, True

    # -- extent maps (file data) -------------------------------------------

    def new_map(self) -> ExtentMap:
        with self._lock:
            m = ExtentMap(self._next_map)
            self._next_map += 1
            self.record(("new", m.map_id))
            return m

    def map_from_bytes(self, data: bytes) -> ExtentMap:
        m = self.new_map()
        if data:
            self.write_range(m, 0, data)
        return m

    def clone_map(self, src: ExtentMap) -> ExtentMap:
        """Snapshot a file's extents.

        REFLINK shares every block (metadata only); FULL_COPY duplicates
        content block by block and charges the rounded-up file size.
        """
        with self._lock:
            self._check_live(src)
            dst = ExtentMap(self._next_map)
            self._next_map += 1
            dst.file_size = src.file_size
            self.record(("clone", src.map_id, dst.map_id, self.mode.value))
            for idx, bid in src.blocks.items():
                if self.mode is ShareMode.REFLINK:
                    self._blocks[bid].refcount += 1
                    dst.blocks[idx] = bid
                else:
                    nid = self._next_block
                    self._next_block += 1
                    self._blocks[nid] = _Block(self._blocks[bid].content)
                    self.stats.physical_block_count += 1
                    self.stats.data_bytes_copied += BLOCK_SIZE
                    dst.blocks[idx] = nid
                self.stats.metadata_ops += 1
            return dst

    def write_range(self, m: ExtentMap, offset: int, data: bytes) -> int:
        """Write ``data`` at ``offset``; gaps below ``offset`` read as zeros.

        Returns the number of blocks privatized by this call.
        """
        with self._lock:
            self._check_live(m)
            if offset < 0:
                raise StoreError(f"negative offset {offset}")
            if not data:
                return 0
            end = offset + len(data)
            privatized = 0
            first = offset // BLOCK_SIZE
            last = (end - 1) // BLOCK_SIZE
            for idx in range(first, last + 1):
                base = idx * BLOCK_SIZE
                lo = max(offset, base) - base
                hi = min(end, base + BLOCK_SIZE) - base
                piece = data[base + lo - offset:base + hi - offset]
                if self._write_block(m, idx, lo, piece):
                    privatized += 1
            if end > m.file_size:
                m.file_size = end
            return privatized

    def _write_block(self, m: ExtentMap, idx: int, off: int,
                     piece: bytes) -> bool:
        bid = m.blocks.get(idx)
        self.record(("write", m.map_id, idx))
        if bid is None:
            if off == 0 and len(piece) == BLOCK_SIZE:
                content = piece
            else:
                content = splice(ZERO_BLOCK, off, piece)
            nid = self._next_block
            self._next_block += 1
            self._blocks[nid] = _Block(content)
            self.stats.physical_block_count += 1
            m.blocks[idx] = nid
            self.stats.metadata_ops += 1          # new extent entry
            return False
        nid, privatized = self.cow_block(bid, off, piece)
        if privatized:
            m.blocks[idx] = nid
            self.stats.metadata_ops += 1          # entry now names new block
        return privatized

    def read_range(self, m: ExtentMap, offset: int, length: int) -> bytes:
        with self._lock:
            self._check_live(m)
            if offset >= m.file_size or length <= 0:
                return b""
            length = min(length, m.file_size - offset)
            out = []
            pos = offset
            end = offset + length
            while pos < end:
                idx = pos // BLOCK_SIZE
                base = idx * BLOCK_SIZE
                lo = pos - base
                hi = min(end, base + BLOCK_SIZE) - base
                bid = m.blocks.get(idx)
                chunk = ZERO_BLOCK if bid is None else self._blocks[bid].content
                out.append(chunk[lo:hi])
                pos = base + hi
            return b"".join(out)

    def read_all(self, m: ExtentMap) -> bytes:
        return self.read_range(m, 0, m.file_size)

    def drop_map(self, m: ExtentMap) -> None:
        """Release a file's references; double drops are internal errors."""
        with self._lock:
            if m.dropped:
                raise StoreError(f"map {m.map_id} dropped twice")
            m.dropped = True
            self.record(("drop", m.map_id))
            for idx, bid in m.blocks.items():
                self.stats.metadata_ops += 1      # entry removal
                self.unref_block(bid)
            m.blocks.clear()

    # -- introspection -----------------------------------------------------

    def iter_blocks(self) -> Iterator[tuple[int, int]]:
        """Yield (block_id, refcount) pairs; for integrity scans."""
        with self._lock:
            return iter([(bid, blk.refcount)
                         for bid, blk in self._blocks.items()])

    def _check_live(self, m: ExtentMap) -> None:
        if m.dropped:
            raise StoreError(f"operation on dropped map {m.map_id}")
