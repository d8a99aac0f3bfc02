"""Per-layer key/value storage under a Full or Streaming retention policy.

A streaming cache keeps the first ``w_sink`` positions (attention sinks)
plus the ``w_recent`` most recent ones, deduplicated, and drops everything
else eagerly on every append, so its row count never exceeds
``w_sink + w_recent``. Eviction is irreversible: the recent window only
slides forward, so a dropped position can never be needed again.

Buffers grow geometrically so that appending one token during decode is
amortized O(1) even for full caches.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from .errors import ContractViolation
from .model import ModelConfig
from .numerics import _masked_max_and_expsum

__all__ = [
    "CachePolicy",
    "LayerCache",
    "MemoryMeter",
    "kept_positions_for",
    "attend_from_cache",
    "memory_stats",
]

_MIN_CAPACITY = 64
_GROWTH = 1.5


@dataclass(frozen=True)
class CachePolicy:
    kind: str  # "full" | "streaming"
    w_sink: int = 0
    w_recent: int = 0

    @classmethod
    def full(cls) -> "CachePolicy":
        return cls(kind="full")

    @classmethod
    def streaming(cls, w_sink: int, w_recent: int) -> "CachePolicy":
        if w_sink < 0:
            raise ContractViolation("w_sink must be >= 0")
        if w_recent < 1:
            raise ContractViolation("w_recent must be >= 1")
        return cls(kind="streaming", w_sink=w_sink, w_recent=w_recent)


def kept_positions_for(total_seen: int, w_sink: int, w_recent: int) -> np.ndarray:
    """Sink-plus-recent retained set after ``total_seen`` appended tokens.

    The two ranges are emitted as one sorted, duplicate-free array: the
    recent window is clipped to start at the sink boundary when they
    overlap, so sink/recent overlap is never double counted.
    """
    sink_end = min(w_sink, total_seen)
    recent_start = max(sink_end, total_seen - w_recent)
    sink = np.arange(sink_end, dtype=np.int64)
    recent = np.arange(recent_start, total_seen, dtype=np.int64)
    return np.concatenate([sink, recent])


class LayerCache:
    """Key/value rows for one layer, one row per retained token position."""

    def __init__(self, n_heads: int, d_key: int, d_value: int, policy: CachePolicy):
        self.n_heads = n_heads
        self.d_key = d_key
        self.d_value = d_value
        self.policy = policy
        self.total_seen = 0
        self._size = 0
        self._capacity = 0
        self._keys: List[np.ndarray] = [np.empty((0, d_key)) for _ in range(n_heads)]
        self._values: List[np.ndarray] = [np.empty((0, d_value)) for _ in range(n_heads)]
        self._positions = np.empty(0, dtype=np.int64)

    @property
    def size(self) -> int:
        return self._size

    @property
    def kept_positions(self) -> np.ndarray:
        return self._positions[: self._size].copy()

    def keys(self, head: int) -> np.ndarray:
        return self._keys[head][: self._size]

    def values(self, head: int) -> np.ndarray:
        return self._values[head][: self._size]

    def _ensure_capacity(self, needed: int) -> None:
        if needed <= self._capacity:
            return
        cap = max(needed, _MIN_CAPACITY, int(self._capacity * _GROWTH))
        for h in range(self.n_heads):
            k = np.empty((cap, self.d_key))
            v = np.empty((cap, self.d_value))
            k[: self._size] = self._keys[h][: self._size]
            v[: self._size] = self._values[h][: self._size]
            self._keys[h], self._values[h] = k, v
        pos = np.empty(cap, dtype=np.int64)
        pos[: self._size] = self._positions[: self._size]
        self._positions = pos
        self._capacity = cap

    def append(self, new_keys: Sequence[np.ndarray], new_values: Sequence[np.ndarray]) -> None:
        """Add K/V rows for the next tokens, then re-evict to the window."""
        if len(new_keys) != self.n_heads or len(new_values) != self.n_heads:
            raise ContractViolation(
                f"expected {self.n_heads} heads of K/V rows, got "
                f"{len(new_keys)}/{len(new_values)}"
            )
        t = new_keys[0].shape[0]
        for k, v in zip(new_keys, new_values):
            if k.shape != (t, self.d_key) or v.shape != (t, self.d_value):
                raise ContractViolation(
                    f"K/V row widths must be ({self.d_key}, {self.d_value}); "
                    f"got {k.shape}, {v.shape}"
                )
        self._ensure_capacity(self._size + t)
        for h in range(self.n_heads):
            self._keys[h][self._size : self._size + t] = new_keys[h]
            self._values[h][self._size : self._size + t] = new_values[h]
        self._positions[self._size : self._size + t] = np.arange(
            self.total_seen, self.total_seen + t, dtype=np.int64
        )
        self._size += t
        self.total_seen += t
        if self.policy.kind == "streaming":
            self._evict()

    def _evict(self) -> None:
        target = kept_positions_for(
            self.total_seen, self.policy.w_sink, self.policy.w_recent
        )
        if target.size == self._size:
            return
        held = self._positions[: self._size]
        rows = np.searchsorted(held, target)
        # The window only slides forward, so every target row must be held.
        if rows.size and (rows[-1] >= held.size or not np.array_equal(held[rows], target)):
            raise ContractViolation("retention window requested an evicted position")
        for h in range(self.n_heads):
            self._keys[h][: target.size] = self._keys[h][rows]
            self._values[h][: target.size] = self._values[h][rows]
        self._positions[: target.size] = target
        self._size = target.size

    def transfer_to_streaming(self, w_sink: int, w_recent: int) -> None:
        """Switch a full cache to streaming, dropping middle rows in one step.

        Idempotent: calling it on a cache that already streams is a no-op.
        """
        if self.policy.kind == "streaming":
            return
        self.policy = CachePolicy.streaming(w_sink, w_recent)
        self._evict()


@dataclass
class MemoryMeter:
    """Tracks instantaneous and peak cached-row counts per layer and overall."""

    layer_rows: List[int] = field(default_factory=list)
    layer_peaks: List[int] = field(default_factory=list)
    peak_total: int = 0

    def record(self, sizes: Sequence[int]) -> None:
        sizes = list(sizes)
        if len(self.layer_rows) < len(sizes):
            grow = len(sizes) - len(self.layer_rows)
            self.layer_rows.extend([0] * grow)
            self.layer_peaks.extend([0] * grow)
        self.layer_rows[: len(sizes)] = sizes
        for i, s in enumerate(sizes):
            if s > self.layer_peaks[i]:
                self.layer_peaks[i] = s
        total = sum(sizes)
        if total > self.peak_total:
            self.peak_total = total


def memory_stats(meter: MemoryMeter) -> dict:
    return {
        "rows_per_layer": list(meter.layer_rows),
        "peak_rows_per_layer": list(meter.layer_peaks),
        "total_rows": sum(meter.layer_rows),
        "peak_total_rows": meter.peak_total,
    }


def attend_from_cache(
    cache: LayerCache, queries: Sequence[np.ndarray], config: ModelConfig
) -> np.ndarray:
    """Attention of the most recent query rows over the cache's kept rows.

    Query row j is taken to sit at absolute position
    ``total_seen - n_q + j``; it may only attend to kept positions at or
    before that. Equals full causal attention restricted to the kept set.
    """
    if cache.size == 0:
        raise ContractViolation("cannot attend from an empty cache")
    if len(queries) != cache.n_heads:
        raise ContractViolation(
            f"expected {cache.n_heads} heads of queries, got {len(queries)}"
        )
    n_q = queries[0].shape[0]
    if n_q < 1 or n_q > cache.total_seen:
        raise ContractViolation(
            f"query count {n_q} outside 1..{cache.total_seen}"
        )
    scale = config.score_scale
    held = cache._positions[: cache.size]

    if n_q == 1:
        # Newest position sees every kept row; skip the mask entirely.
        out = np.zeros((1, cache.d_value))
        for h in range(cache.n_heads):
            scores = queries[h] @ cache.keys(h).T
            if scale != 1.0:
                scores = scores * scale
            expd = np.exp(scores - scores.max())
            out += (expd / expd.sum()) @ cache.values(h)
        return out

    q_pos = np.arange(cache.total_seen - n_q, cache.total_seen, dtype=np.int64)
    allowed = held[None, :] <= q_pos[:, None]
    if not allowed.any(axis=1).all():
        raise ContractViolation(
            "a query position has no cached rows at or before it"
        )
    out = np.zeros((n_q, cache.d_value))
    for h in range(cache.n_heads):
        scores = queries[h] @ cache.keys(h).T
        if scale != 1.0:
            scores = scores * scale
        _, expd, sums = _masked_max_and_expsum(scores, allowed)
        out += (expd / sums[:, None]) @ cache.values(h)
    return out
