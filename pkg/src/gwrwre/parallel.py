"""Replica-parallel map with results independent of the worker count.

Every replica derives its random streams from ``(seed, replica index)`` alone,
so splitting the index range across processes cannot change any result.  The
task function is handed to forked workers through a module global, which lets
closures and kernels built from lambdas run in the pool without pickling.
"""

from __future__ import annotations

import multiprocessing as mp
import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, List

_TASK: Callable = None


def _run_chunk(bounds):
    lo, hi = bounds
    return lo, [_TASK(i) for i in range(lo, hi)]


def _chunks(n: int, parts: int):
    step = -(-n // parts)
    return [(lo, min(lo + step, n)) for lo in range(0, n, step)]


def map_replicas(task: Callable[[int], object], replicas: int, workers: int = 1) -> List:
    """``[task(0), ..., task(replicas - 1)]``, optionally on a fork-based pool."""
    global _TASK
    workers = max(1, int(workers))
    if workers == 1 or replicas < 2 or "fork" not in mp.get_all_start_methods():
        return [task(i) for i in range(replicas)]
    _TASK = task
    try:
        ctx = mp.get_context("fork")
        parts = _chunks(replicas, min(replicas, workers * 4))
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            done = sorted(pool.map(_run_chunk, parts), key=lambda x: x[0])
    finally:
        _TASK = None
    out = []
    for _, chunk in done:
        out.extend(chunk)
    return out


def default_workers() -> int:
    return max(1, os.cpu_count() or 1)
