"""Fallback-node behavior: stands in for unreachable sensor nodes, serves
requests whose history range was evicted under buffer pressure, and, when
collocated with the loop node, turns every pass-through into an implicit loop
split anchored at a trusted time.
"""

from __future__ import annotations

from bisect import insort
from dataclasses import dataclass, field
from typing import Optional

from .coherence import (
    CACHED,
    MISSING,
    OVERFLOW,
    SUBSTITUTED,
    JoinedValue,
    RequestTuple,
    Sample,
)
from .sensor import join_cost


@dataclass
class EvictedRecord:
    """A sample displaced from a sensor node's buffer.

    The age at send time was measured by the owner's clock; the time since
    receipt is measured by the fallback's clock.  Both spans are short and
    drift-safe, but the one-way transfer latency is unknown, so the true age
    at any later join lies within ``ack_timeout`` above the measured sum.
    """

    sample: Sample
    age_at_send: int
    received_at: int

    def age_bracket(self, now: int, ack_timeout: int) -> tuple[int, int]:
        lo = self.age_at_send + max(0, now - self.received_at)
        return lo, lo + ack_timeout


@dataclass
class CachedValue:
    """Most recent value seen for a node, harvested from emitted results."""

    value: int
    read_time: int
    stored_at: int
    uid: Optional[tuple] = None


class FallbackState:
    """State machine of the fallback node.

    ``unreachable`` is shared with the loop node's dispatcher (the loop node
    mirrors it for routing and periodic recheck).  Compensation slots filled
    from the cache or an alternative sensor are carried in the tuple but do
    not enter the coherence measures; only overflow joins (real history served
    remotely) do.
    """

    def __init__(
        self,
        loop_node_id: int,
        ack_timeout: int,
        staleness_bound: int,
        collocated: bool = True,
        alternatives: Optional[dict[int, int]] = None,
        store_limit: int = 1024,
    ) -> None:
        self.loop_node_id = loop_node_id
        self.ack_timeout = ack_timeout
        self.staleness_bound = staleness_bound
        self.collocated = collocated
        self.alternatives = dict(alternatives or {})
        self.store_limit = store_limit
        self.evicted_store: dict[int, list[EvictedRecord]] = {}
        self.value_cache: dict[int, CachedValue] = {}
        self.unreachable: set[int] = set()

    # ---- stores --------------------------------------------------------

    def note_eviction(self, node_id: int, rec: EvictedRecord) -> None:
        store = self.evicted_store.setdefault(node_id, [])
        insort(store, rec, key=lambda r: r.sample.read_time)
        if len(store) > self.store_limit:
            del store[0 : len(store) - self.store_limit]

    def update_cache(self, values, stored_at: int) -> None:
        """Refresh the per-node cache from an emitted result's value slots."""
        for v in values:
            if v.kind in (MISSING,):
                continue
            self.value_cache[v.node_id] = CachedValue(
                value=v.value, read_time=v.read_time, stored_at=stored_at, uid=v.uid
            )

    # ---- joining -------------------------------------------------------

    def serve_overflow(self, tup: RequestTuple, owner_id: int, now: int) -> None:
        """Join a request whose wanted range was evicted at the owning node,
        using the same cost as a local buffer join over the evicted store."""
        store = self.evicted_store.get(owner_id, [])
        if not store:
            self.compensate_missing(tup, owner_id, now)
            return
        scored = []
        for rec in store:
            lo, hi = rec.age_bracket(now, self.ack_timeout)
            cost = join_cost(rec.sample.read_time, tup.t, rec.sample.read_time + lo, tup.alpha, tup.mu)
            scored.append((cost, abs(rec.sample.read_time - tup.t), -rec.sample.read_time, rec, lo, hi))
        scored.sort(key=lambda item: item[:3])
        _, _, _, rec, lo, hi = scored[0]
        tup.record_join(
            JoinedValue(
                node_id=owner_id,
                read_time=rec.sample.read_time,
                value=rec.sample.value,
                kind=OVERFLOW,
                age_lo=lo,
                age_hi=hi,
                uid=rec.sample.uid,
            )
        )

    def compensate_missing(self, tup: RequestTuple, node_id: int, now: int) -> None:
        """Fill a slot for a node that cannot answer: cached value if fresh,
        else a mapped alternative sensor, else the null marker."""
        cached = self.value_cache.get(node_id)
        if cached is not None and now - cached.stored_at <= self.staleness_bound:
            tup.record_join(
                JoinedValue(
                    node_id=node_id,
                    read_time=cached.read_time,
                    value=cached.value,
                    kind=CACHED,
                    uid=cached.uid,
                )
            )
            return
        alt = self.alternatives.get(node_id)
        if alt is not None:
            alt_cached = self.value_cache.get(alt)
            if alt_cached is not None:
                tup.record_join(
                    JoinedValue(
                        node_id=node_id,
                        read_time=alt_cached.read_time,
                        value=alt_cached.value,
                        kind=SUBSTITUTED,
                        uid=alt_cached.uid,
                    )
                )
                return
        tup.record_join(JoinedValue(node_id, 0, 0, kind=MISSING))
        tup.degraded = True

    # ---- routing -------------------------------------------------------

    def next_hop(
        self, after: Optional[int], loop_order: list[int]
    ) -> tuple[Optional[int], list[int]]:
        """Next reachable node after ``after`` in loop order (from the start
        when ``after`` is None), plus the nodes skipped on the way.  Returns
        (None, skipped) when the loop is exhausted and the tuple must go back
        to the loop node."""
        idx = loop_order.index(after) if after is not None else -1
        skipped = []
        for nid in loop_order[idx + 1 :]:
            if nid in self.unreachable:
                skipped.append(nid)
            else:
                return nid, skipped
        return None, skipped

    def pass_through(
        self,
        tup: RequestTuple,
        now: int,
        remaining_hops: int,
        mean_hop: int,
    ) -> None:
        """Implicit-split bookkeeping when collocated with the loop node: the
        trusted pass-through time starts a new acquisition segment, and the
        target age for downstream nodes is re-centered on the remaining
        stretch of the loop."""
        if not self.collocated:
            return
        tup.close_segment(now)
        remaining = mean_hop * (remaining_hops + 1)
        tup.alpha = max(0, remaining // 2 + (now - tup.t))
