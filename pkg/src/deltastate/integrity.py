"""Cross-component consistency scans (the fsck behind the CLI).

Walks every live reference holder -- layer entries, address spaces, dump
images, pooled templates -- and checks that per-block reference counts in
the store equal the number of holders found, that frozen layers still hash
to their freeze-time digests, and that no block is orphaned.
"""

from __future__ import annotations

from collections import Counter
from typing import Iterable

from .procstate import AddressSpace
from .statemanager import StateManager


def scan(manager: StateManager,
         extra_spaces: Iterable[AddressSpace] = ()) -> list[str]:
    """Return a list of violations; empty means consistent."""
    violations: list[str] = []
    counted: Counter[int] = Counter()
    holders: dict[int, list[str]] = {}

    spaces = [manager.space, *extra_spaces]
    refs = list(manager.fs.iter_extent_refs())
    refs.extend(manager.engine.iter_page_refs(spaces))
    for bid, holder in refs:
        counted[bid] += 1
        holders.setdefault(bid, []).append(holder)

    store_counts = dict(manager.store.iter_blocks())
    for bid, expected in counted.items():
        actual = store_counts.get(bid)
        if actual is None:
            violations.append(
                f"block {bid} referenced by {holders[bid]} but not in store")
        elif actual != expected:
            violations.append(
                f"block {bid} refcount {actual} != {expected} holders "
                f"({holders[bid][:4]}...)" if expected > 4 else
                f"block {bid} refcount {actual} != {expected} holders "
                f"({holders[bid]})")
    for bid, actual in store_counts.items():
        if bid not in counted:
            violations.append(f"block {bid} (refcount {actual}) is orphaned")

    violations.extend(manager.fs.verify_frozen_digests())
    return violations


def check(manager: StateManager,
          extra_spaces: Iterable[AddressSpace] = ()) -> None:
    """Raise on the first violation; for test teardowns."""
    from .errors import IntegrityError

    bad = scan(manager, extra_spaces)
    if bad:
        raise IntegrityError("; ".join(bad[:10]))
