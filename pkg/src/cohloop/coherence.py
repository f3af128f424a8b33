"""Pure coherence arithmetic: guarantees, estimates, read-time deviation,
latency-shifted request times, and interval hulls for multi-loop joins.

All timestamps are integer nanoseconds since the simulation epoch; durations
are integer nanoseconds.  Functions here are pure values-in/values-out and
carry no simulator state.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

Timestamp = int
Duration = int

# How a value slot was filled.  "local" is a regular buffer join at the owning
# node, "overflow" is a join served by the fallback node from its evicted
# store.  Both count toward the coherence measures.  "cached"/"substituted"
# slots are failure compensation and are excluded from coherence aggregation;
# "missing" is the null marker.
LOCAL = "local"
OVERFLOW = "overflow"
CACHED = "cached"
SUBSTITUTED = "substituted"
MISSING = "missing"

COHERENT_KINDS = frozenset({LOCAL, OVERFLOW})


@dataclass(frozen=True)
class Sample:
    """One sensor reading: read time per the reading node's own clock."""

    read_time: Timestamp
    value: int
    uid: Optional[tuple] = None  # (node_id, read counter); simulator bookkeeping


@dataclass(frozen=True)
class Interval:
    lo: Timestamp
    hi: Timestamp

    def __post_init__(self) -> None:
        if self.lo > self.hi:
            raise ValueError(f"interval lo {self.lo} > hi {self.hi}")

    @property
    def diameter(self) -> Duration:
        return self.hi - self.lo

    def contains(self, other: "Interval") -> bool:
        return self.lo <= other.lo and other.hi <= self.hi


@dataclass
class JoinedValue:
    """A filled value slot of an in-flight tuple.

    ``age_lo``/``age_hi`` bracket the value's true age at join time as measured
    by the joining node.  For a local join both equal the measured age; joins
    served from the fallback's evicted store widen the bracket by the
    acknowledgement timeout because the one-way transfer latency of the evicted
    sample is unknown.
    """

    node_id: int
    read_time: Timestamp
    value: int
    kind: str = LOCAL
    age_lo: Duration = 0
    age_hi: Duration = 0
    segment: int = 0
    uid: Optional[tuple] = None


@dataclass
class RequestTuple:
    """In-flight loop message: ``<t, alpha, mu, alpha_min, alpha_max, t_min,
    t_max, v_1, ...>`` plus routing metadata.

    ``alpha_min``/``alpha_max`` track the current acquisition segment (they are
    reset when a collocated fallback node passes the tuple through, which
    splits the loop implicitly); ``t_min``/``t_max`` accumulate over the whole
    tuple.  ``segment_marks`` holds the trusted pass-through times of implicit
    splits; together with the loop start and end times they delimit the
    acquisition segments used for the guarantee.
    """

    t: Timestamp
    alpha: Duration
    mu: float
    origin_loop: int = 0
    seq: int = 0
    alpha_min: Optional[Duration] = None
    alpha_max: Optional[Duration] = None
    t_min: Optional[Timestamp] = None
    t_max: Optional[Timestamp] = None
    values: list[JoinedValue] = field(default_factory=list)
    segment_marks: list[Timestamp] = field(default_factory=list)
    route: list[int] = field(default_factory=list)
    adhoc_init: bool = False
    degraded: bool = False
    infeasible: bool = False
    saw_timeout: bool = False
    # Latency-shift mode: lag = t - l_s and the accumulated expected hop
    # latency from the loop node to the current position.
    lag: Duration = 0
    expected_elapsed: Duration = 0
    use_latency_shift: bool = False

    def record_join(self, value: JoinedValue) -> None:
        """Append a slot and update the running extremes.

        Only coherence-relevant slots (local and overflow joins) move the
        age and read-time extremes; compensation slots are carried but do not
        contribute to the coherence measures.
        """
        value.segment = len(self.segment_marks)
        self.values.append(value)
        if value.kind not in COHERENT_KINDS:
            return
        if self.alpha_min is None or value.age_lo < self.alpha_min:
            self.alpha_min = value.age_lo
        if self.alpha_max is None or value.age_hi > self.alpha_max:
            self.alpha_max = value.age_hi
        if self.t_min is None or value.read_time < self.t_min:
            self.t_min = value.read_time
        if self.t_max is None or value.read_time > self.t_max:
            self.t_max = value.read_time

    def close_segment(self, pass_time: Timestamp) -> None:
        """Mark an implicit split at a trusted pass-through time and reset the
        per-segment age extremes for the downstream nodes."""
        self.segment_marks.append(pass_time)
        self.alpha_min = None
        self.alpha_max = None


def coherence_guarantee(
    l_s: Timestamp, l_e: Timestamp, alpha_min: Duration, alpha_max: Duration
) -> Duration:
    """Guarantee observed at the loop node: the span between the earliest and
    latest possible read time, ``(l_e - alpha_min) - (l_s - alpha_max)``.

    Holds for arbitrary offsets between sensor clocks because only loop-node
    time distances and reported value ages enter.
    """
    if l_e < l_s:
        raise ValueError(f"loop end {l_e} before start {l_s}")
    if alpha_min < 0 or alpha_max < alpha_min:
        raise ValueError(f"invalid age extremes [{alpha_min}, {alpha_max}]")
    return (l_e - alpha_min) - (l_s - alpha_max)


def coherence_estimate(t_min: Timestamp, t_max: Timestamp) -> Duration:
    """Span between the earliest and latest reported read time (clock-trusting)."""
    if t_max < t_min:
        raise ValueError(f"t_max {t_max} < t_min {t_min}")
    return t_max - t_min


def read_time_deviation(t: Timestamp, read_times: Sequence[Timestamp]) -> Duration:
    """Maximum deviation between the desired read time and any actual one."""
    if not read_times:
        raise ValueError("read_times must be nonempty")
    return max(abs(t - ti) for ti in read_times)


def shifted_request_time(
    t: Timestamp,
    l_s: Timestamp,
    t_now: Timestamp,
    hop_latencies: Iterable[Duration],
) -> Timestamp:
    """Desired read time translated into an unsynchronized sensor clock.

    ``hop_latencies`` holds the transmission latencies of every hop from the
    loop node up to the current node.  Joining on the shifted time makes the
    join independent of clock synchronization.
    """
    total = 0
    for d in hop_latencies:
        if d < 0:
            raise ValueError("hop latencies must be non-negative")
        total += d
    return t_now + (t - l_s) - total


def unshift_read_time(
    t_prime_i: Timestamp, t: Timestamp, t_prime: Timestamp
) -> Timestamp:
    """Map a read time reported against the shifted request time back into the
    request's own time base: ``t_i = t'_i + (t - t')``."""
    return t_prime_i + (t - t_prime)


def interval_hull(intervals: Sequence[Interval]) -> Interval:
    """Tightest single interval covering every input interval.

    The diameter of the hull is the joint guarantee across sensing loops."""
    if not intervals:
        raise ValueError("interval_hull needs at least one interval")
    return Interval(
        lo=min(iv.lo for iv in intervals),
        hi=max(iv.hi for iv in intervals),
    )
