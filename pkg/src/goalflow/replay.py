"""Replay storage with age-based two-level priorities.

Every record enters fresh at the maximum priority and drops to zero once a
training step has consumed it, so priorities only ever take the two values
{0, p_max}. Sampling serves the freshest unlearned records first (newest
insertion order) and fills the remainder uniformly from the learned pool,
without replacement unless the buffer holds fewer records than requested.

Records are identified by their global insertion counter, which survives
ring eviction: marking an evicted or overwritten id is silently skipped and
counted instead of corrupting an unrelated slot.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, EmptyBufferError


class PrioritizedBuffer:
    def __init__(self, capacity: int, p_max: float = 1.0):
        if capacity < 1:
            raise ConfigError(f"capacity must be >= 1, got {capacity}")
        if p_max <= 0.0:
            raise ConfigError(f"p_max must be positive, got {p_max}")
        self.capacity = capacity
        self.p_max = p_max
        self._records = [None] * capacity
        self._ids = np.full(capacity, -1, dtype=np.int64)
        self._prio = np.zeros(capacity, dtype=np.float64)
        self._total = 0
        self.stale_marks = 0

    def __len__(self) -> int:
        return min(self._total, self.capacity)

    @property
    def total_inserted(self) -> int:
        return self._total

    @property
    def fresh_count(self) -> int:
        return int((self._prio == self.p_max).sum())

    def insert(self, record) -> int:
        """Store a record at maximum priority; returns its id."""
        slot = self._total % self.capacity
        self._records[slot] = record
        self._ids[slot] = self._total
        self._prio[slot] = self.p_max
        self._total += 1
        return self._total - 1

    def get(self, record_id: int):
        slot = record_id % self.capacity
        if self._ids[slot] != record_id:
            return None
        return self._records[slot]

    def sample_batch(self, m: int, rng: np.random.Generator):
        """Draw m records proportional to the two-level priorities.

        Returns ``(records, ids)``. Fresh records come newest-first; the
        remainder is uniform over the learned pool without replacement.
        Replacement is used only when the whole buffer is smaller than m.
        """
        if m < 1:
            raise ConfigError(f"batch size must be >= 1, got {m}")
        size = len(self)
        if size == 0:
            raise EmptyBufferError("cannot sample from an empty buffer")
        occupied = self._ids >= 0
        fresh_ids = self._ids[occupied & (self._prio == self.p_max)]
        fresh_ids = np.sort(fresh_ids)[::-1]
        chosen = list(fresh_ids[:m])
        remainder = m - len(chosen)
        if remainder > 0:
            if size >= m:
                learned_ids = self._ids[occupied & (self._prio == 0.0)]
                extra = rng.choice(learned_ids, size=remainder, replace=False)
            else:
                live_ids = self._ids[occupied]
                extra = rng.choice(live_ids, size=remainder, replace=True)
            chosen.extend(extra)
        ids = [int(i) for i in chosen]
        return [self.get(i) for i in ids], ids

    def mark_learned(self, ids) -> int:
        """Zero the priority of the given ids; stale ids are skipped.

        Returns how many records newly left the fresh pool, so re-marking
        is a no-op in both effect and count. Skipped (evicted or
        overwritten) ids accumulate in ``stale_marks``.
        """
        marked = 0
        for record_id in ids:
            slot = record_id % self.capacity
            if self._ids[slot] != record_id:
                self.stale_marks += 1
                continue
            if self._prio[slot] != 0.0:
                self._prio[slot] = 0.0
                marked += 1
        return marked

    def stats(self) -> dict:
        return {
            "size": len(self),
            "total_inserted": self._total,
            "fresh": self.fresh_count,
            "stale_marks": self.stale_marks,
        }

    def snapshot(self, limit: int | None = None) -> list:
        """Live records in insertion order, optionally only the newest."""
        lo = max(0, self._total - self.capacity)
        ids = range(lo, self._total)
        if limit is not None and limit < len(ids):
            ids = range(self._total - limit, self._total)
        return [self.get(i) for i in ids]
