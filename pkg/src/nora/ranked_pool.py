"""Ranked acquisition pool.

Maintains a fixed-capacity batch of candidate locations ordered by
acquisition value conditioned on all higher-ranked entries (the
Kriging-believer chain). Because the acquisition is monotone in the GP
uncertainty, conditioning can only lower a value, so a candidate whose
unconditioned value does not beat the pool's worst conditioned value can be
rejected without touching the GP.

Offering a candidate proceeds in three steps: a cheap rejection check, a
descent from the rank its unconditioned value suggests (re-conditioning at
each rank) until it beats the next entry or falls off the bottom, and, if
it was inserted above the bottom, an iterated competition that re-ranks all
displaced entries. Per-rank conditioned surrogates are cached as ghost-point
layers over the shared base and invalidated from the insertion rank down.
"""

from __future__ import annotations

import numpy as np

from .acquisition import AcquisitionParams, acquisition_values
from .parallel import parallel_map

__all__ = ["PoolEntry", "RankedPool", "rank_sample", "merge"]

# Conditioned-acquisition ties within this margin resolve in favor of the
# earlier-offered candidate.
TIE_EPS = 1e-12

_MAX_PASSES = 64


class PoolEntry:
    """One pooled candidate: location, unconditioned and conditioned values."""

    __slots__ = ("location", "a_uncond", "a_cond", "stamp")

    def __init__(self, location, a_uncond, a_cond, stamp):
        self.location = np.asarray(location, dtype=float)
        self.a_uncond = float(a_uncond)
        self.a_cond = float(a_cond)
        self.stamp = stamp

    def __repr__(self):
        return f"PoolEntry(a_uncond={self.a_uncond:.6g}, a_cond={self.a_cond:.6g})"


class RankedPool:
    """Fixed-capacity pool of candidates sorted by conditioned acquisition."""

    def __init__(self, base, params: AcquisitionParams, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.base = base
        self.params = params
        self.capacity = capacity
        self.entries: list[PoolEntry] = []
        self._cache = [base]  # _cache[k] is conditioned on entries[:k]

    def __len__(self):
        return len(self.entries)

    @property
    def is_full(self) -> bool:
        return len(self.entries) >= self.capacity

    def batch(self) -> np.ndarray:
        """Pooled locations, best rank first."""
        if not self.entries:
            d = self.base.all_locations.shape[1]
            return np.empty((0, d))
        return np.array([e.location for e in self.entries])

    def surrogate_at(self, rank: int):
        """Base surrogate conditioned on entries[:rank] (cached)."""
        while len(self._cache) <= rank:
            k = len(self._cache)
            self._cache.append(
                self._cache[-1].condition_on(self.entries[k - 1].location)
            )
        return self._cache[rank]

    def _conditioned_value(self, x, rank: int) -> float:
        if rank == 0:
            raise ValueError("rank 0 value is the unconditioned acquisition")
        surr = self.surrogate_at(rank)
        return float(acquisition_values(surr, x[None, :], self.params)[0])

    def _invalidate(self, rank: int):
        """Drop cached surrogates that depend on entries[rank:]."""
        del self._cache[rank + 1:]

    def offer(self, x, a_uncond: float, stamp=None) -> bool:
        """Offer one candidate with its unconditioned acquisition; True if pooled."""
        x = np.asarray(x, dtype=float)
        a_uncond = float(a_uncond)
        if self.is_full and a_uncond <= self.entries[-1].a_cond + TIE_EPS:
            return False
        # Descend from the rank matching the unconditioned value.
        pos = len(self.entries)
        for i, entry in enumerate(self.entries):
            if a_uncond > entry.a_cond + TIE_EPS:
                pos = i
                break
        while True:
            value = a_uncond if pos == 0 else self._conditioned_value(x, pos)
            if value == -np.inf:
                return False  # already-known location (duplicate/ghost)
            if pos == len(self.entries):
                if pos >= self.capacity:
                    return False  # fell off the bottom slot
                self.entries.append(PoolEntry(x, a_uncond, value, stamp))
                return True
            occupant = self.entries[pos]
            beats = value > occupant.a_cond + TIE_EPS or (
                abs(value - occupant.a_cond) <= TIE_EPS
                and _earlier(stamp, occupant.stamp)
            )
            if beats:
                displaced = self.entries[pos:]
                self.entries = self.entries[:pos]
                self.entries.append(PoolEntry(x, a_uncond, value, stamp))
                self._invalidate(pos)
                self._refill(displaced)
                return True
            pos += 1

    def _refill(self, displaced: list[PoolEntry]):
        """Iterated competition of displaced entries for the remaining slots."""
        displaced = list(displaced)
        while displaced and len(self.entries) < self.capacity:
            rank = len(self.entries)
            surr = self.surrogate_at(rank)
            locs = np.array([e.location for e in displaced])
            vals = acquisition_values(surr, locs, self.params)
            best = 0
            for i in range(1, len(displaced)):
                if vals[i] > vals[best] + TIE_EPS or (
                    abs(vals[i] - vals[best]) <= TIE_EPS
                    and _earlier(displaced[i].stamp, displaced[best].stamp)
                ):
                    best = i
            if vals[best] == -np.inf:
                return  # everything left is already known; discard
            winner = displaced.pop(best)
            winner.a_cond = float(vals[best])
            self.entries.append(winner)
        # Any survivor beyond capacity lands in the virtual bottom slot and
        # is discarded.


def _earlier(a, b) -> bool:
    if a is None or b is None:
        return False
    return a < b


def rank_sample(base, params: AcquisitionParams, candidates, a_uncond,
                capacity: int) -> RankedPool:
    """Rank candidates by sequentially-conditioned acquisition into a pool.

    Candidates are offered in descending unconditioned order (minimizing
    re-sorts), and offer passes repeat until the pool reaches a fixed point,
    which makes the result match the exhaustive greedy-conditioned ordering
    and independent of offer order whenever the greedy optimum is unique.
    """
    candidates = np.atleast_2d(np.asarray(candidates, dtype=float))
    a_uncond = np.asarray(a_uncond, dtype=float)
    if candidates.shape[0] != a_uncond.size:
        raise ValueError("candidates and acquisitions disagree in length")
    pool = RankedPool(base, params, capacity)
    if candidates.shape[0] == 0:
        return pool
    order = np.argsort(-a_uncond, kind="stable")
    order = [int(i) for i in order if a_uncond[i] > -np.inf]
    for _ in range(_MAX_PASSES):
        pooled = {e.stamp for e in pool.entries}
        changed = False
        for idx in order:
            if idx in pooled:
                continue
            if pool.offer(candidates[idx], a_uncond[idx], stamp=idx):
                changed = True
                pooled = {e.stamp for e in pool.entries}
        if not changed:
            break
    return pool


def rank_sample_split(base, params: AcquisitionParams, candidates, a_uncond,
                      capacity: int, workers: int = 1) -> RankedPool:
    """Split candidates across workers, rank each chunk, then merge.

    Sub-pools carry the full global capacity, which makes the merged result
    equivalent to a single-process ranking of all candidates.
    """
    candidates = np.atleast_2d(np.asarray(candidates, dtype=float))
    a_uncond = np.asarray(a_uncond, dtype=float)
    n_chunks = min(workers, max(1, candidates.shape[0]))
    if n_chunks <= 1:
        return rank_sample(base, params, candidates, a_uncond, capacity)
    chunks = np.array_split(np.arange(candidates.shape[0]), n_chunks)
    pools = parallel_map(
        rank_sample,
        [(base, params, candidates[c], a_uncond[c], capacity) for c in chunks],
        workers=workers,
    )
    return merge(pools)


def merge(pools: list[RankedPool]) -> RankedPool:
    """Re-rank the union of several pools in a single process.

    All pools must share the same base surrogate and parameters; the result
    equals ranking the union of their members directly.
    """
    if not pools:
        raise ValueError("nothing to merge")
    first = pools[0]
    for p in pools[1:]:
        if p.params != first.params or p.base is not first.base:
            if p.base is not first.base:
                raise ValueError("pools were built on different base surrogates")
            raise ValueError("pools were built with different parameters")
    entries = [e for p in pools for e in p.entries]
    if not entries:
        return RankedPool(first.base, first.params, first.capacity)
    locations = np.array([e.location for e in entries])
    a_uncond = np.array([e.a_uncond for e in entries])
    return rank_sample(first.base, first.params, locations, a_uncond,
                       first.capacity)
