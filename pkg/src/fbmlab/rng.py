"""Counter-based random substreams and a deterministic worker pool.

Every Monte-Carlo draw in the package goes through :func:`normals`. Paths are
grouped in fixed-size blocks; block ``b`` of stream ``tag`` is generated by a
Philox generator keyed by ``(seed, tag, b)``. A path's numbers therefore
depend only on ``(seed, tag, path index)``: not on how many paths are drawn,
on which worker draws them, or in which order.
"""
from __future__ import annotations

import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

import numpy as np

BLOCK = 256

T = TypeVar("T")


def _tag_id(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


def block_generator(seed: int, tag: str, block: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF,
                                spawn_key=(_tag_id(tag), int(block)))
    return np.random.Generator(np.random.Philox(ss))


def normals(seed: int, tag: str, start: int, stop: int,
            shape: Sequence[int] = ()) -> np.ndarray:
    """Standard normals for paths ``start..stop-1``, shape ``(stop-start, *shape)``."""
    shape = tuple(int(s) for s in shape)
    if stop <= start:
        return np.empty((0,) + shape)
    out = np.empty((stop - start,) + shape)
    first, last = start // BLOCK, (stop - 1) // BLOCK
    for b in range(first, last + 1):
        lo = b * BLOCK
        hi = min(lo + BLOCK, stop)
        # rows are filled in C order, so a partial block is a prefix of a full one
        draw = block_generator(seed, tag, b).standard_normal((hi - lo,) + shape)
        a = max(start, lo)
        out[a - start:hi - start] = draw[a - lo:]
    return out


def uniforms(seed: int, tag: str, start: int, stop: int,
             shape: Sequence[int] = ()) -> np.ndarray:
    shape = tuple(int(s) for s in shape)
    if stop <= start:
        return np.empty((0,) + shape)
    out = np.empty((stop - start,) + shape)
    for b in range(start // BLOCK, (stop - 1) // BLOCK + 1):
        lo = b * BLOCK
        hi = min(lo + BLOCK, stop)
        draw = block_generator(seed, tag, b).random((hi - lo,) + shape)
        a = max(start, lo)
        out[a - start:hi - start] = draw[a - lo:]
    return out


def default_workers() -> int:
    env = os.environ.get("FBMLAB_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1


_workers = None


def set_workers(n: int | None) -> None:
    global _workers
    _workers = None if n is None else max(1, int(n))


def get_workers() -> int:
    return _workers if _workers is not None else default_workers()


def chunks(total: int, size: int) -> list[tuple[int, int]]:
    """Split ``range(total)`` into consecutive ``(start, stop)`` pairs."""
    size = max(1, int(size))
    return [(a, min(a + size, total)) for a in range(0, total, size)]


def pmap(func: Callable[..., T], items: Iterable, workers: int | None = None) -> list[T]:
    """Ordered map over a thread pool; results never depend on ``workers``."""
    items = list(items)
    workers = get_workers() if workers is None else workers
    if workers <= 1 or len(items) <= 1:
        return [func(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(func, items))
