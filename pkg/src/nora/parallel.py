"""Process-based worker helpers.

All parallelism in the package funnels through these two entry points so
that results are always consumed in task order (deterministic regardless of
scheduling) and a worker count of 1 never touches multiprocessing.

The function under execution is stashed in a module global immediately
before forking, so closures and large shared objects (e.g. a surrogate) are
inherited by the children instead of being pickled per task.
"""

from __future__ import annotations

import contextlib
import multiprocessing as mp

__all__ = ["parallel_map", "persistent_pool"]

_WORK_FN = None


def _invoke(args):
    return _WORK_FN(*args)


def parallel_map(fn, argtuples, workers: int = 1) -> list:
    """Apply ``fn(*args)`` to each tuple, in order; forks when workers > 1."""
    argtuples = list(argtuples)
    if workers <= 1 or len(argtuples) <= 1:
        return [fn(*args) for args in argtuples]
    global _WORK_FN
    _WORK_FN = fn
    try:
        ctx = mp.get_context("fork")
        with ctx.Pool(min(workers, len(argtuples))) as pool:
            return pool.map(_invoke, argtuples)
    finally:
        _WORK_FN = None


@contextlib.contextmanager
def persistent_pool(fn, workers: int):
    """Context manager yielding a ``pmap(argtuples) -> list`` for repeated dispatch.

    Keeps one pool alive across many small dispatch rounds (the nested
    sampler's per-round candidate chains); with ``workers <= 1`` the mapper
    runs serially in-process.
    """
    if workers <= 1:
        yield lambda argtuples: [fn(*args) for args in argtuples]
        return
    global _WORK_FN
    _WORK_FN = fn
    ctx = mp.get_context("fork")
    pool = ctx.Pool(workers)
    try:
        yield lambda argtuples: pool.map(_invoke, list(argtuples))
    finally:
        pool.terminate()
        pool.join()
        _WORK_FN = None
