"""Incremental process-state capture with a bounded fork-template pool.

An :class:`AddressSpace` is a sparse page map over the shared block store
plus a soft-dirty set that records which pages were written since the last
capture. ``incremental_dump`` snapshots exactly the dirty pages into a
parent-linked delta image (zero byte copies); ``create_template`` takes a
whole-space snapshot that later restores clone from. Templates live in an
LRU pool of bounded size; a restore that misses the pool replays the dump
chain instead and re-seeds the pool.

Restored clones share every page with their template until first touch.
``warm_step`` privatizes shared pages ahead of the workload (hot-zone order
first); a fault log per restore epoch attributes each privatization to the
warmer or to the critical path.
"""

from __future__ import annotations

import itertools
from collections import OrderedDict, deque
from copy import deepcopy
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .blockstore import BLOCK_SIZE, BlockStore
from .errors import (DeliverToWrongEpoch, DumpFailure, QuiesceViolation,
                     StoreError, TemplateMiss, UnknownImage)

PAGE_SIZE = BLOCK_SIZE


@dataclass
class FaultLog:
    """Per-restore-epoch CoW fault attribution."""

    pages_warmed: int = 0
    absorbed: int = 0        # privatized by the warmer before first touch
    critical: int = 0        # privatized under the workload's feet

    def as_dict(self) -> dict:
        return {"pages_warmed": self.pages_warmed,
                "absorbed": self.absorbed, "critical": self.critical}


@dataclass
class Continuation:
    """Dispatch state the child resumes from: where the agent was in its
    request loop and which I/O requests it already knows about."""

    cursor: int = 0
    known_requests: tuple[str, ...] = ()


class AddressSpace:
    def __init__(self, space_id: int):
        self.space_id = space_id
        self.pages: dict[int, int] = {}          # page index -> block id
        self.soft_dirty: set[int] = set()
        self.quiesced = False
        self.released = False
        self.private_bytes = 0                   # pages made private this life
        self.continuation = Continuation()
        self.fault_log: FaultLog | None = None
        self._warm_order: list[int] = []
        self._warm_cursor = 0

    @property
    def page_count(self) -> int:
        return len(self.pages)


@dataclass
class DumpImage:
    """Delta image: the pages dirtied since ``parent`` (all pages when the
    image is a chain root). Pages are references, never copies."""

    image_id: str
    parent: str | None
    captured: dict[int, int]

    @property
    def byte_size(self) -> int:
        return len(self.captured) * PAGE_SIZE


@dataclass
class Template:
    """Whole-space snapshot a fast restore forks from."""

    snapshot_id: str
    pages: dict[int, int]
    continuation: Continuation
    alive: bool = True


class TemplatePool:
    """LRU-bounded template cache keyed by snapshot id."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("pool capacity must be >= 1")
        self.capacity = capacity
        self.evictions = 0
        self.insertions = 0
        self._items: "OrderedDict[str, Template]" = OrderedDict()

    def __len__(self) -> int:
        return len(self._items)

    def __contains__(self, snapshot_id: str) -> bool:
        return snapshot_id in self._items

    def get(self, snapshot_id: str) -> Template | None:
        tpl = self._items.get(snapshot_id)
        if tpl is not None:
            self._items.move_to_end(snapshot_id)
        return tpl

    def insert(self, tpl: Template) -> Template | None:
        """Add a template; returns the evicted one when over capacity."""
        if tpl.snapshot_id in self._items:
            raise StoreError(f"template {tpl.snapshot_id} inserted twice")
        self._items[tpl.snapshot_id] = tpl
        self.insertions += 1
        if len(self._items) > self.capacity:
            _, evicted = self._items.popitem(last=False)
            self.evictions += 1
            return evicted
        return None

    def peek(self, snapshot_id: str) -> Template | None:
        """Access without touching recency; for scans."""
        return self._items.get(snapshot_id)

    def remove(self, snapshot_id: str) -> Template | None:
        return self._items.pop(snapshot_id, None)

    def ids(self) -> list[str]:
        return list(self._items)


class IoBroker:
    """Stands between the workload and the outside world.

    Requests and buffered completions live here, outside any address
    space, so checkpoint/restore never captures them. Deliveries are
    matched against the receiving space's continuation: a completion for a
    request the restored space never issued is a delivery fault.
    """

    def __init__(self):
        self.pending: deque[str] = deque()
        self.buffered: dict[str, bytes] = {}
        self.submitted_total = 0
        self.delivered_total = 0

    def submit(self, space: AddressSpace, request_id: str) -> None:
        self.pending.append(request_id)
        self.submitted_total += 1
        space.continuation.known_requests += (request_id,)

    def complete(self, request_id: str, payload: bytes) -> None:
        """Arrival from outside; legal at any time, even mid-freeze."""
        if request_id in self.pending:
            self.pending.remove(request_id)
        self.buffered[request_id] = payload

    def deliver(self, space: AddressSpace, request_id: str) -> bytes:
        if request_id not in space.continuation.known_requests:
            raise DeliverToWrongEpoch(
                f"{request_id} was never submitted by this epoch")
        if request_id not in self.buffered:
            raise KeyError(f"{request_id} has no buffered completion")
        self.delivered_total += 1
        return self.buffered.pop(request_id)


class ProcessEngine:
    """Owns spaces, dump images, and the template pool over one store."""

    def __init__(self, store: BlockStore, pool_capacity: int = 8):
        self.store = store
        self.pool = TemplatePool(pool_capacity)
        self.images: dict[str, DumpImage] = {}
        self.broker = IoBroker()
        self.restore_fast_count = 0
        self.restore_slow_count = 0
        self.dump_count = 0
        self._seq = itertools.count(1)

    # -- space lifecycle ---------------------------------------------------

    def new_space(self, initial: Mapping[int, bytes] | None = None
                  ) -> AddressSpace:
        space = AddressSpace(next(self._seq))
        for page, content in sorted((initial or {}).items()):
            space.pages[page] = self.store.alloc_block(content)
            self.store.record(("pnew", f"space{space.space_id}", page))
            space.soft_dirty.add(page)
            space.private_bytes += PAGE_SIZE
        return space

    def release_space(self, space: AddressSpace) -> None:
        if space.released:
            raise StoreError(f"space {space.space_id} released twice")
        space.released = True
        space.fault_log = None
        self.store.record(("pdrop", f"space{space.space_id}"))
        for bid in space.pages.values():
            self.store.unref_block(bid)
        space.pages.clear()
        space.soft_dirty.clear()

    def quiesce(self, space: AddressSpace) -> None:
        """Stop the clock for this space; closes any warm epoch."""
        space.quiesced = True
        space.fault_log = None

    def resume(self, space: AddressSpace) -> None:
        space.quiesced = False

    # -- writes ------------------------------------------------------------

    def mem_write(self, space: AddressSpace, page: int, data: bytes,
                  via_warm: bool = False) -> bool:
        """Write ``data`` at offset 0 of ``page``. Returns True when the
        write privatized a shared page (a CoW fault)."""
        if space.released:
            raise StoreError("write to released space")
        key = f"space{space.space_id}"
        bid = space.pages.get(page)
        if bid is None:
            space.pages[page] = self.store.alloc_block(data)
            self.store.record(("pnew", key, page))
            space.private_bytes += PAGE_SIZE
            space.soft_dirty.add(page)
            return False
        nid, privatized = self.store.cow_block(bid, 0, data)
        self.store.record(("pwrite", key, page))
        if privatized:
            space.pages[page] = nid
            space.private_bytes += PAGE_SIZE
            log = space.fault_log
            if log is not None:
                if via_warm:
                    log.absorbed += 1
                else:
                    log.critical += 1
        if not via_warm:
            # Warm rewrites preserve content; the dirty set tracks real
            # changes so delta dumps stay minimal.
            space.soft_dirty.add(page)
        return privatized

    def read_page(self, space: AddressSpace, page: int) -> bytes:
        bid = space.pages.get(page)
        return bytes(PAGE_SIZE) if bid is None else self.store.block_content(bid)

    def materialize(self, space: AddressSpace) -> dict[int, bytes]:
        return {p: self.store.block_content(bid)
                for p, bid in sorted(space.pages.items())}

    # -- capture -----------------------------------------------------------

    def incremental_dump(self, space: AddressSpace, parent: str | None,
                         inject_failure: bool = False) -> DumpImage:
        """Capture the soft-dirty delta (whole space when parentless).

        An injected failure raises before any state is touched, so the
        caller can abort with nothing to clean up.
        """
        if not space.quiesced:
            raise QuiesceViolation("dump requires a quiesced space")
        if parent is not None and parent not in self.images:
            raise UnknownImage(parent)
        if inject_failure:
            raise DumpFailure("injected dump fault")
        keys = sorted(space.pages) if parent is None \
            else sorted(space.soft_dirty)
        image_id = f"img{next(self._seq)}"
        captured: dict[int, int] = {}
        for page in keys:
            bid = space.pages[page]
            self.store.ref_block(bid)
            self.store.record(("pshare", image_id, page,
                               f"space{space.space_id}", page))
            captured[page] = bid
        img = DumpImage(image_id, parent, captured)
        self.images[image_id] = img
        space.soft_dirty.clear()
        self.dump_count += 1
        return img

    def create_template(self, space: AddressSpace,
                        snapshot_id: str) -> Template:
        """Snapshot the whole space by reference for later fast restores."""
        if not space.quiesced:
            raise QuiesceViolation("template capture requires quiescence")
        pages: dict[int, int] = {}
        for page, bid in space.pages.items():
            self.store.ref_block(bid)
            self.store.record(("pshare", f"tpl:{snapshot_id}", page,
                               f"space{space.space_id}", page))
            pages[page] = bid
        return Template(snapshot_id, pages, deepcopy(space.continuation))

    def pool_insert(self, tpl: Template) -> str | None:
        """Insert into the LRU pool; returns the evicted snapshot id, if
        any. Eviction releases only the template's references -- the
        snapshot's dump image stays restorable."""
        evicted = self.pool.insert(tpl)
        if evicted is None:
            return None
        self._kill_template(evicted)
        return evicted.snapshot_id

    def _kill_template(self, tpl: Template) -> None:
        tpl.alive = False
        self.store.record(("pdrop", f"tpl:{tpl.snapshot_id}"))
        for bid in tpl.pages.values():
            self.store.unref_block(bid)
        tpl.pages.clear()

    def drop_template(self, snapshot_id: str) -> bool:
        tpl = self.pool.remove(snapshot_id)
        if tpl is None:
            return False
        self._kill_template(tpl)
        return True

    # -- restore -----------------------------------------------------------

    def restore_fast(self, snapshot_id: str,
                     hot_zone: Sequence[int] = ()) -> AddressSpace:
        """Clone from a pooled template: every page shared, zero copies."""
        tpl = self.pool.get(snapshot_id)
        if tpl is None:
            raise TemplateMiss(snapshot_id)
        space = AddressSpace(next(self._seq))
        key = f"space{space.space_id}"
        for page, bid in tpl.pages.items():
            self.store.ref_block(bid)
            self.store.record(("pshare", key, page,
                               f"tpl:{snapshot_id}", page))
            space.pages[page] = bid
        space.continuation = deepcopy(tpl.continuation)
        self._open_epoch(space, hot_zone)
        self.restore_fast_count += 1
        return space

    def compose_chain(self, image_id: str) -> dict[int, tuple[str, int]]:
        """Walk parent links and overlay newest-wins: page -> (image that
        supplied it, block id)."""
        chain: list[DumpImage] = []
        cur: str | None = image_id
        while cur is not None:
            img = self.images.get(cur)
            if img is None:
                raise UnknownImage(cur)
            chain.append(img)
            cur = img.parent
        composed: dict[int, tuple[str, int]] = {}
        for img in reversed(chain):
            for page, bid in img.captured.items():
                composed[page] = (img.image_id, bid)
        return composed

    def restore_slow(self, image_id: str, snapshot_id: str | None = None,
                     continuation: Continuation | None = None,
                     hot_zone: Sequence[int] = ()
                     ) -> tuple[AddressSpace, str | None]:
        """Replay a dump chain into a fresh space.

        When ``snapshot_id`` is given the replayed state is re-templated
        and pooled, so the next restore of this snapshot is fast again;
        the eviction that may cause is returned.
        """
        composed = self.compose_chain(image_id)
        space = AddressSpace(next(self._seq))
        key = f"space{space.space_id}"
        for page in sorted(composed):
            src_img, bid = composed[page]
            self.store.ref_block(bid)
            self.store.record(("pshare", key, page, src_img, page))
            space.pages[page] = bid
        if continuation is not None:
            space.continuation = deepcopy(continuation)
        evicted = None
        if snapshot_id is not None:
            pages: dict[int, int] = {}
            for page, bid in space.pages.items():
                self.store.ref_block(bid)
                self.store.record(("pshare", f"tpl:{snapshot_id}", page,
                                   key, page))
                pages[page] = bid
            tpl = Template(snapshot_id, pages, deepcopy(space.continuation))
            evicted = self.pool_insert(tpl)
        self._open_epoch(space, hot_zone)
        self.restore_slow_count += 1
        return space, evicted

    def drop_image(self, image_id: str) -> None:
        img = self.images.pop(image_id)
        self.store.record(("pdrop", image_id))
        for bid in img.captured.values():
            self.store.unref_block(bid)
        img.captured.clear()

    # -- warming -----------------------------------------------------------

    def _open_epoch(self, space: AddressSpace,
                    hot_zone: Sequence[int]) -> None:
        space.fault_log = FaultLog()
        hot = [p for p in hot_zone if p in space.pages]
        rest = sorted(set(space.pages) - set(hot))
        space._warm_order = hot + rest
        space._warm_cursor = 0

    def warm_step(self, space: AddressSpace) -> bool:
        """Privatize the next still-shared page (hot zone first, then
        ascending). Returns False once nothing is left to warm."""
        if space.fault_log is None:
            return False
        order = space._warm_order
        while space._warm_cursor < len(order):
            page = order[space._warm_cursor]
            space._warm_cursor += 1
            bid = space.pages.get(page)
            if bid is None or self.store.block_refcount(bid) == 1:
                continue
            self.mem_write(space, page, self.store.block_content(bid),
                           via_warm=True)
            space.fault_log.pages_warmed += 1
            return True
        return False

    def run_warm_schedule(self, space: AddressSpace,
                          schedule: Iterable[tuple]) -> FaultLog:
        """Deterministically interleave warming with workload writes.

        Schedule items: ``("warm", n)`` runs n warm steps; ``("write",
        page, data)`` is a workload write. Returns the epoch's fault log.
        """
        for item in schedule:
            if item[0] == "warm":
                for _ in range(item[1]):
                    if not self.warm_step(space):
                        break
            elif item[0] == "write":
                self.mem_write(space, item[1], item[2])
            else:
                raise ValueError(f"unknown schedule item {item[0]!r}")
        assert space.fault_log is not None
        return space.fault_log

    # -- accounting / integrity --------------------------------------------

    def dump_storage_bytes(self) -> int:
        return sum(img.byte_size for img in self.images.values())

    def iter_page_refs(self, spaces: Iterable[AddressSpace] = ()):
        """Yield every (block_id, holder) the engine contributes; fsck."""
        for img_id, img in self.images.items():
            for bid in img.captured.values():
                yield bid, img_id
        for sid in self.pool.ids():
            tpl = self.pool.peek(sid)
            for bid in tpl.pages.values():
                yield bid, f"tpl:{sid}"
        for space in spaces:
            if not space.released:
                for bid in space.pages.values():
                    yield bid, f"space{space.space_id}"

    def close(self) -> None:
        for sid in list(self.pool.ids()):
            self.drop_template(sid)
        for image_id in list(self.images):
            self.drop_image(image_id)
