"""Deterministic parallel map over independent tasks."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor

from threadpoolctl import threadpool_limits


def _call(args):
    func, item = args
    with threadpool_limits(limits=1):
        return func(item)


def pmap(func, items, threads: int = 1) -> list:
    """``[func(x) for x in items]`` with up to ``threads`` worker processes.

    BLAS is pinned to one thread inside every task so a task's floating-point
    result does not depend on how many workers run; output order follows
    ``items``.
    """
    items = list(items)
    threads = max(1, int(threads))
    if threads == 1 or len(items) <= 1:
        return [_call((func, x)) for x in items]
    with ProcessPoolExecutor(max_workers=min(threads, len(items))) as ex:
        return list(ex.map(_call, [(func, x) for x in items], chunksize=1))
