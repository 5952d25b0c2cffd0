"""Small shared helpers: deterministic byte generation and path hygiene."""

from __future__ import annotations

import posixpath
import random

from .errors import NotFound

_PAYLOAD_CACHE: dict[tuple[str, int], bytes] = {}
_PAYLOAD_CACHE_MAX = 4096


def seeded_bytes(seed: int | str, n: int) -> bytes:
    """Deterministic pseudo-random payload for a (seed, length) pair.

    Trace events carry content seeds instead of literal bytes; every
    consumer (engine and oracle alike) derives identical payloads through
    this one function. Results are memoised because workloads reuse the
    same payload many times (e.g. fan-out children writing one pattern).
    """
    key = (str(seed), n)
    got = _PAYLOAD_CACHE.get(key)
    if got is None:
        got = random.Random(key[0]).randbytes(n)
        if len(_PAYLOAD_CACHE) >= _PAYLOAD_CACHE_MAX:
            _PAYLOAD_CACHE.clear()
        _PAYLOAD_CACHE[key] = got
    return got


def normalize_path(path: str) -> str:
    """Canonicalise an absolute slash-separated path.

    Collapses duplicate separators and trailing slashes; rejects relative
    paths and '.'/'..' segments (there is no cwd in this model).
    """
    if not isinstance(path, str) or not path.startswith("/"):
        raise NotFound(f"path must be absolute: {path!r}")
    norm = posixpath.normpath(path)
    if norm.startswith("//"):  # normpath keeps a leading double slash
        norm = norm[1:]
    for seg in norm.split("/"):
        if seg == "..":
            raise NotFound(f"path may not contain '..': {path!r}")
    return norm


def parent_dir(path: str) -> str:
    return posixpath.dirname(path) or "/"


def basename(path: str) -> str:
    return posixpath.basename(path)


def splice(base: bytes, offset: int, piece: bytes) -> bytes:
    """Overwrite ``piece`` into ``base`` at ``offset`` (no length change)."""
    return base[:offset] + piece + base[offset + len(piece):]
