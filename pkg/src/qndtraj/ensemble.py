"""Parallel map over trajectory indices.

Each task is a pure function of its index, so results are identical for
any worker count; they are always returned in index order.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from functools import partial


def _run_chunk(fn, indices, kwargs):
    return [fn(i, **kwargs) for i in indices]


def run_ensemble(fn, n: int, workers: int = 1, chunksize: int | None = None, **kwargs) -> list:
    """Evaluate ``fn(index, **kwargs)`` for ``index in range(n)``.

    ``fn`` must be a picklable module-level callable when ``workers > 1``.
    """
    if n < 1:
        raise ValueError("ensemble size must be >= 1")
    if workers <= 1:
        return [fn(i, **kwargs) for i in range(n)]
    chunksize = chunksize or max(1, n // (4 * workers))
    chunks = [range(s, min(s + chunksize, n)) for s in range(0, n, chunksize)]
    out = []
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for part in pool.map(partial(_run_chunk, fn, kwargs=kwargs), chunks):
            out.extend(part)
    return out
