"""Sensor-node logic: the history buffer with join/send watermarks, the
buffer join that trades read-time accuracy against age spread, and the three
read-scheduling strategies.

Message transport is owned by the simulator; functions here mutate node and
tuple state and return routing intents.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .coherence import LOCAL, MISSING, JoinedValue, RequestTuple, Sample

# Sentinel for "watermark never set"; any real timestamp compares above it.
W_UNSET = -(2**62)

# Routing intents returned by process_request.
FORWARD = "forward"
TO_FALLBACK = "to_fallback"


def join_cost(
    t_i: int,
    t: int,
    t_now: int,
    alpha: int,
    mu: float,
    bands: Optional[tuple] = None,
) -> float:
    """Cost of joining the value read at ``t_i`` into a request for time ``t``.

    The linear part prices the read-time deviation (estimate quality), the
    quadratic part prices the deviation of the value's age from the target age
    ``alpha`` (guarantee quality), weighted by ``mu``.

    With ``bands = (alpha_min, alpha_max, t_min, t_max)`` from previously
    joined values, choices inside the existing extremes are free: they widen
    neither measure, so only the distance to the nearest band edge is priced.
    """
    if mu < 0:
        raise ValueError("mu must be non-negative")
    age = t_now - t_i
    if bands is not None:
        alpha_min, alpha_max, t_min, t_max = bands
        if t_min <= t_i <= t_max:
            ce_dev = 0
        else:
            ce_dev = min(abs(t_i - t_min), abs(t_i - t_max))
        if alpha_min <= age <= alpha_max:
            cg_dev = 0
        else:
            cg_dev = min(abs(age - alpha_min), abs(age - alpha_max))
    else:
        ce_dev = abs(t_i - t)
        cg_dev = age - alpha
    return ce_dev + (cg_dev * cg_dev) * mu


def select_value(
    entries: Sequence[Sample],
    t: int,
    t_now: int,
    alpha: int,
    mu: float,
    bands: Optional[tuple] = None,
) -> Sample:
    """Pick the buffer entry with minimal join cost.

    Ties break toward the smaller read-time deviation, then toward the newer
    entry, which biases the free choices toward a better estimate.
    """
    if not entries:
        raise ValueError("cannot select from an empty buffer")
    return min(
        entries,
        key=lambda s: (
            join_cost(s.read_time, t, t_now, alpha, mu, bands),
            abs(s.read_time - t),
            -s.read_time,
        ),
    )


def advance_join_watermark(evicted_read: int, neighbor_read: int) -> int:
    """New join watermark after an eviction: the midpoint between the evicted
    read time and its nearest surviving neighbor's read time."""
    return (evicted_read + neighbor_read + 1) // 2


@dataclass
class Eviction:
    """A buffer entry displaced while still potentially needed, on its way to
    the fallback node together with its age at send time."""

    sample: Sample
    age_at_send: int


class HistoryBuffer:
    """Fixed-capacity ring of samples ordered by read time.

    ``w_send`` marks the read time below which entries can be dropped silently
    (every request that could have needed them was already served); ``w_join``
    marks the request time below which the best value has been shipped to the
    fallback node.
    """

    def __init__(self, capacity: int = 256):
        if capacity < 1:
            raise ValueError("buffer capacity must be at least 1")
        self.capacity = capacity
        self.entries: deque[Sample] = deque()
        self.w_join = W_UNSET
        self.w_send = W_UNSET

    def __len__(self) -> int:
        return len(self.entries)

    def push(
        self, sample: Sample, now: int, expire_horizon: Optional[int] = None
    ) -> Optional[Eviction]:
        """Store a new reading; returns the displaced entry when it must go to
        the fallback node.

        Entries already consumed (read time at or below ``w_send``) expire
        silently once older than the horizon.  An overwritten entry that later
        requests might still need is handed back for shipping, and the join
        watermark moves to the midpoint between it and the oldest survivor.
        """
        if expire_horizon is not None:
            limit = now - expire_horizon
            while (
                self.entries
                and self.entries[0].read_time <= self.w_send
                and self.entries[0].read_time < limit
            ):
                self.entries.popleft()

        evicted: Optional[Eviction] = None
        if len(self.entries) >= self.capacity:
            old = self.entries.popleft()
            if old.read_time > self.w_send:
                neighbor = self.entries[0] if self.entries else sample
                self.w_join = advance_join_watermark(old.read_time, neighbor.read_time)
                evicted = Eviction(sample=old, age_at_send=max(0, now - old.read_time))
        self.entries.append(sample)
        return evicted


@dataclass(frozen=True)
class AdHoc:
    """Read the sensor at request arrival; no buffer, age always zero."""


@dataclass(frozen=True)
class Periodic:
    """Read at a fixed cadence regardless of requests."""

    period: int

    def __post_init__(self) -> None:
        if self.period <= 0:
            raise ValueError("period must be positive")


@dataclass(frozen=True)
class ScheduleNextRead:
    """Read exactly at the cost-optimal time for the next known request.

    ``period`` is the request cadence (also the fallback cadence when no hint
    is available); ``jitter_width`` spreads the optional extra samples
    symmetrically around the scheduled time.  ``jitter_guard`` pulls reads
    that would land right at the predicted join earlier by the expected
    arrival jitter, so the read exists when the request actually arrives.
    """

    period: int
    jitter_width: int = 0
    extra_samples: int = 0
    jitter_guard: int = 0

    def __post_init__(self) -> None:
        if self.period <= 0:
            raise ValueError("period must be positive")
        if self.extra_samples < 0:
            raise ValueError("extra_samples must be non-negative")


SchedulerKind = AdHoc | Periodic | ScheduleNextRead


def optimal_read_time(
    t: int, expected_join: int, alpha: int, mu: float
) -> int:
    """Analytic optimum of the join cost over a continuum of read times.

    Far from the request time the optimum sits ``1/(2 mu)`` away from the
    age-optimal read; once ``mu`` drops below ``1/(2 |r|)`` the request time
    itself wins.  A read after the join cannot be in the buffer yet, so the
    result is capped at the expected join time (which is exactly where the
    guarantee saturates at twice the roundtrip).
    """
    r = t - (expected_join - alpha)
    if r == 0 or mu == 0 or mu < 1.0 / (2.0 * abs(r)):
        best = t
    else:
        shift = int(round(1.0 / (2.0 * mu)))
        best = expected_join - alpha + (shift if r > 0 else -shift)
    return min(best, expected_join)


def next_read_times(
    scheduler: SchedulerKind,
    now: int,
    hint: Optional[tuple] = None,
    rng: Optional[np.random.Generator] = None,
) -> list[int]:
    """Read times to schedule after serving a request at clock time ``now``.

    ``hint`` carries the next request's ``(t, alpha, mu)``.  Ad-hoc schedules
    nothing; periodic returns the next cadence boundary; schedule-next-read
    places one read at the analytic optimum (plus any jittered extras) and
    degrades to the cadence boundary without a hint.
    """
    if isinstance(scheduler, AdHoc):
        return []
    if isinstance(scheduler, Periodic):
        return [(now // scheduler.period + 1) * scheduler.period]
    if hint is None:
        return [(now // scheduler.period + 1) * scheduler.period]
    t_next, alpha, mu = hint
    expected_join = now + scheduler.period
    # The next request may arrive a little early under network jitter, and a
    # read scheduled after the actual join is useless.
    base = min(optimal_read_time(t_next, expected_join, alpha, mu),
               expected_join - scheduler.jitter_guard)
    times = [base]
    if scheduler.extra_samples:
        if rng is None:
            raise ValueError("extra samples need a random generator")
        half = scheduler.jitter_width / 2.0
        times.extend(
            int(round(base + rng.uniform(-half, half)))
            for _ in range(scheduler.extra_samples)
        )
    return [max(tm, now + 1) for tm in sorted(times)]


class SensorNode:
    """Protocol state of one sensor node.

    The simulator owns the clock and the transport; this class owns the buffer
    and the join/watermark decisions.  ``read_sensor`` is a callable returning
    a fresh :class:`Sample` at the current clock time (injected by the
    simulator so ground truth can be recorded at read instants).
    """

    def __init__(
        self,
        node_id: int,
        scheduler: SchedulerKind,
        buffer_capacity: int = 256,
        request_period_hint: Optional[int] = None,
        use_bands: bool = False,
        age_margin_ppm: float = 0.0,
        tick_ns: int = 0,
        rng: Optional[np.random.Generator] = None,
    ) -> None:
        self.rng = rng
        self.node_id = node_id
        self.scheduler = scheduler
        self.buffer = HistoryBuffer(buffer_capacity)
        self.use_bands = use_bands
        self.eviction_failed = False
        self.read_count = 0
        self.pending_read_target: Optional[int] = None
        # Optional conservative age reporting: widen the reported age bracket
        # by the oscillator's datasheet drift bound plus one tick, so the
        # guarantee stays sound even against worst-case clock drift.
        self.age_margin_ppm = age_margin_ppm
        self.tick_ns = tick_ns
        # Entries are kept at most this long past consumption.  The horizon
        # follows the oldest age the current parameters can ask for (the age
        # target plus the tradeoff spread), never below 4 request periods.
        self._period_hint = request_period_hint
        self.expire_horizon = (
            4 * request_period_hint if request_period_hint else None
        )

    def effective_request_time(self, tup: RequestTuple, now: int) -> int:
        """Request time in this node's own clock domain.

        In latency-shift mode the desired time is re-derived from the current
        clock reading and the accumulated expected hop latency, making the
        join independent of clock synchronization.
        """
        if tup.use_latency_shift:
            return now + tup.lag - tup.expected_elapsed
        return tup.t

    def process_request(
        self, tup: RequestTuple, now: int, read_sensor
    ) -> tuple[str, list[int]]:
        """Join a request tuple with a value and decide where it goes next.

        Returns the routing intent (forward along the loop, or hand to the
        fallback node because the wanted range was evicted) and any sensor
        read times to schedule for the following request.
        """
        t_eff = self.effective_request_time(tup, now)

        if (
            not tup.adhoc_init
            and t_eff < self.buffer.w_join
            and not self.eviction_failed
        ):
            return TO_FALLBACK, []

        ad_hoc = isinstance(self.scheduler, AdHoc) or tup.adhoc_init
        if ad_hoc or not self.buffer.entries:
            if read_sensor is not None:
                sample = read_sensor()
                self.read_count += 1
            else:
                tup.record_join(JoinedValue(self.node_id, 0, 0, kind=MISSING))
                tup.degraded = True
                return FORWARD, []
        else:
            bands = None
            if self.use_bands and tup.alpha_min is not None:
                bands = (tup.alpha_min, tup.alpha_max, tup.t_min, tup.t_max)
            sample = select_value(
                list(self.buffer.entries), t_eff, now, tup.alpha, tup.mu, bands
            )
            if (
                isinstance(self.scheduler, ScheduleNextRead)
                and read_sensor is not None
                and self.pending_read_target is not None
                and self.pending_read_target > now
            ):
                # The read pre-scheduled for this request lies in the future:
                # the request arrived earlier than predicted.  Repair with an
                # ad-hoc read instead of joining a stale sample.
                sample = read_sensor()
                self.read_count += 1

        age = max(0, now - sample.read_time)
        margin = 0
        if self.age_margin_ppm or self.tick_ns:
            margin = int(age * self.age_margin_ppm * 1e-6) + self.tick_ns
        reported = sample.read_time
        if tup.use_latency_shift:
            reported = sample.read_time + (tup.t - t_eff)
        tup.record_join(
            JoinedValue(
                node_id=self.node_id,
                read_time=reported,
                value=sample.value,
                kind=LOCAL,
                age_lo=max(0, age - margin),
                age_hi=age + margin,
                uid=sample.uid,
            )
        )
        self.buffer.w_send = min(now - tup.alpha, t_eff)
        if self._period_hint:
            spread_half = int(0.5 / tup.mu) if tup.mu > 0 else 0
            self.expire_horizon = max(
                4 * self._period_hint,
                2 * (tup.alpha + spread_half + self._period_hint),
            )

        reads: list[int] = []
        if isinstance(self.scheduler, ScheduleNextRead):
            hint = (t_eff + self.scheduler.period, tup.alpha, tup.mu)
            reads = next_read_times(self.scheduler, now, hint=hint, rng=self.rng)
            self.pending_read_target = reads[0] if reads else None
        return FORWARD, reads

    def record_reading(self, sample: Sample, now: int) -> Optional[Eviction]:
        """Store a scheduled reading; may displace an entry toward the fallback
        node (buffer overflow handling)."""
        self.read_count += 1
        return self.buffer.push(sample, now, self.expire_horizon)
