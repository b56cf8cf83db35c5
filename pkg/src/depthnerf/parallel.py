"""Thread-count resolution and deterministic chunked parallel maps."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Optional

ENV_THREADS = "DINER_THREADS"


def resolve_threads(flag: Optional[int] = None) -> int:
    """``--threads`` wins over ``$DINER_THREADS``; default is single-threaded."""
    if flag is not None:
        return max(1, int(flag))
    env = os.environ.get(ENV_THREADS)
    if env:
        return max(1, int(env))
    return 1


def map_chunks(fn: Callable[[int], object], n_chunks: int, threads: int = 1) -> list:
    """``[fn(0), ..., fn(n_chunks - 1)]`` in order, optionally on a thread pool.

    Chunk boundaries and per-chunk random streams are fixed by the caller, so
    results do not depend on ``threads``.
    """
    if threads <= 1 or n_chunks <= 1:
        return [fn(k) for k in range(n_chunks)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(n_chunks)))
