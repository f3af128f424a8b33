"""Loop-node controller: computes the coherence measures for every returned
tuple, tunes the target age and the cost weight with a doubling/halving step
automaton, derives the internal guarantee target from roundtrip statistics,
and plans loop splits and merges.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

from .coherence import (
    COHERENT_KINDS,
    Interval,
    JoinedValue,
    MISSING,
    RequestTuple,
    interval_hull,
)

# Clamping bounds for the cost weight, in 1/ns.  The update rule's denominator
# can reach zero when loosening faster than the current weight allows, and the
# initialization formula is undefined once the target drops below twice the
# roundtrip; clamping keeps the controller total.
MU_FLOOR = 1e-12
MU_CAP = 1e3

_S_MIN, _S_MAX = -80, 100


def sign(x) -> int:
    return 0 if x == 0 else (1 if x > 0 else -1)


class DeltaStats:
    """Streaming mean and deviation of roundtrip times.

    Three accumulators (sample count, mean, squared-deviation sum) with an
    exponential forgetting factor applied per sample, so the deviation adapts
    to regime changes.  With ``forgetting=1`` this is plain Welford.
    """

    def __init__(self, forgetting: float = 0.99):
        if not 0.0 < forgetting <= 1.0:
            raise ValueError("forgetting factor must be in (0, 1]")
        self.forgetting = forgetting
        self.count = 0
        self.mean = 0.0
        self.m2 = 0.0

    @property
    def weight(self) -> float:
        """Total weight of the samples seen (equals count when not forgetting)."""
        lam = self.forgetting
        if lam == 1.0:
            return float(self.count)
        return (1.0 - lam**self.count) / (1.0 - lam)

    def push(self, x: float) -> None:
        lam = self.forgetting
        w_new = lam * self.weight + 1.0 if self.count else 1.0
        self.count += 1
        d = x - self.mean
        self.mean += d / w_new
        self.m2 = lam * self.m2 + d * (x - self.mean)

    def variance(self) -> float:
        w = self.weight
        if w <= 1.0:
            return 0.0
        return max(0.0, self.m2 / (w - 1.0))

    def std(self) -> float:
        return math.sqrt(self.variance())


def target_dmax(c_gmax: int, stats: DeltaStats) -> int:
    """Internal guarantee target: the user bound minus three roundtrip sigmas,
    so the bound holds for ~99.85% of tuples under roughly normal roundtrips.

    Without at least two samples there is no jitter evidence and the user
    bound is used directly.
    """
    if stats.count < 2:
        return c_gmax
    return int(round(c_gmax - 3.0 * stats.std()))


def init_mu(d_max: int, delta: int) -> float:
    """Initial cost weight that lands the guarantee on the target right away,
    assuming the roundtrip stays put: ``1 / (d_max - 2 * delta)``.

    Once the target allows no slack over the roundtrip the weight saturates at
    the cap (pure guarantee optimization)."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    if d_max <= 2 * delta:
        return MU_CAP
    return min(max(1.0 / (d_max - 2 * delta), MU_FLOOR), MU_CAP)


def update_mu(mu: float, w: float, direction: int) -> float:
    """One tuning step of the cost weight.

    Moves the guarantee of the next tuple by twice the step width in the
    requested direction (+1 loosens toward the target from below, -1 tightens
    from above); the reciprocal weight moves by exactly ``2 * direction * w``
    when no clamping applies.
    """
    if mu <= 0:
        raise ValueError("mu must be positive")
    if direction == 0:
        return mu
    denom = 2.0 * direction * w * mu + 1.0
    if denom <= 0.0:
        return MU_CAP
    return min(max(mu / denom, MU_FLOOR), MU_CAP)


def automaton_step(s: int, p: int, direction: int) -> tuple[int, int, float]:
    """Step-width state machine.

    The exponent grows while consecutive updates head the same way and shrinks
    otherwise; after a direction change the memory is cleared so the exponent
    shrinks twice, which makes the guarantee converge onto the target instead
    of oscillating."""
    s = s + (1 if p == direction else -1)
    s = min(max(s, _S_MIN), _S_MAX)
    if direction == 0:
        p = 0
    elif p == -direction and p != 0:
        p = 0
    else:
        p = direction
    return s, p, 2.0**s


@dataclass
class ResultTuple:
    """Emitted record: request time, coherence measures, and the value slots."""

    seq: int
    t: int
    c_g: int
    c_e: int
    delta: int
    delta_t: int
    d_max: int
    loop_count: int
    values: list[JoinedValue]
    degraded: bool = False
    infeasible: bool = False
    emit_time: int = 0
    hull: Optional[Interval] = None


def guarantee_intervals(tup: RequestTuple, l_s: int, l_e: int) -> list[Interval]:
    """Per-segment read-time intervals guaranteed to contain every coherent
    value of the tuple, anchored on trusted loop-node observations.

    Each acquisition segment runs between two trusted times (loop start,
    implicit-split pass-throughs, loop end); a value joined inside a segment
    with reported age bracket [lo, hi] was read inside
    ``[seg_start - hi, seg_end - lo]``.
    """
    bounds = [l_s] + list(tup.segment_marks) + [l_e]
    out = []
    for k in range(len(bounds) - 1):
        ages = [
            (v.age_lo, v.age_hi)
            for v in tup.values
            if v.segment == k and v.kind in COHERENT_KINDS
        ]
        if not ages:
            continue
        lo = bounds[k] - max(hi for _, hi in ages)
        hi = bounds[k + 1] - min(lo_ for lo_, _ in ages)
        out.append(Interval(lo, hi))
    return out


def segment_spans(tup: RequestTuple, l_s: int, l_e: int) -> list[int]:
    bounds = [l_s] + list(tup.segment_marks) + [l_e]
    return [bounds[k + 1] - bounds[k] for k in range(len(bounds) - 1)]


def joint_result(
    seq: int,
    t: int,
    l_s: int,
    returned: dict[int, tuple[RequestTuple, int]],
    expected_loops: dict[int, list[int]],
    d_max: int,
    emit_time: int,
) -> ResultTuple:
    """Assemble the emitted tuple from per-loop returns.

    The joint guarantee is the hull diameter over all per-loop (and
    per-segment) intervals; the estimate and read-time deviation aggregate the
    reported read times of coherent values.  Loops that never returned get
    null-flagged slots and mark the tuple degraded.  The roundtrip is the
    longest independent acquisition segment, so the guarantee can never fall
    below it.
    """
    intervals: list[Interval] = []
    spans: list[int] = []
    values: list[JoinedValue] = []
    degraded = False
    infeasible = False
    for loop_id in sorted(expected_loops):
        if loop_id in returned:
            tup, l_e = returned[loop_id]
            intervals.extend(guarantee_intervals(tup, l_s, l_e))
            spans.extend(segment_spans(tup, l_s, l_e))
            values.extend(tup.values)
            degraded = degraded or tup.degraded
            infeasible = infeasible or tup.infeasible
        else:
            degraded = True
            values.extend(
                JoinedValue(nid, 0, 0, kind=MISSING)
                for nid in expected_loops[loop_id]
            )
    reads = [v.read_time for v in values if v.kind in COHERENT_KINDS]
    if intervals:
        hull = interval_hull(intervals)
        c_g = hull.diameter
        delta = max(spans)
        c_e = max(reads) - min(reads)
        delta_t = max(abs(t - r) for r in reads)
    else:
        hull = None
        c_g = c_e = delta = delta_t = 0
        degraded = True
    return ResultTuple(
        seq=seq,
        t=t,
        c_g=c_g,
        c_e=c_e,
        delta=delta,
        delta_t=delta_t,
        d_max=d_max,
        loop_count=len(expected_loops),
        values=values,
        degraded=degraded,
        infeasible=infeasible,
        emit_time=emit_time,
        hull=hull,
    )


@dataclass
class PendingRequest:
    seq: int
    l_s: int
    t: int
    loops: dict[int, list[int]]
    epoch: int = 0
    returned: dict[int, tuple[RequestTuple, int]] = field(default_factory=dict)
    done: bool = False


class LoopController:
    """State machine of the loop node.

    Owns the sensing-loop partition of the node set, the tuning state
    (step exponent ``s``, direction memory ``p``, cost weight ``mu``), the
    roundtrip statistics behind the internal target, and the in-flight
    request bookkeeping.  Transport and clocks live in the simulator.
    """

    def __init__(
        self,
        node_order: list[int],
        c_gmax: int,
        latency_limit: Optional[int] = None,
        max_loops: int = 8,
        request_time_offset: int = 0,
        merge_hysteresis: float = 0.9,
        forgetting: float = 0.99,
        plan_min_samples: int = 3,
    ) -> None:
        if not node_order:
            raise ValueError("need at least one sensor node")
        self.node_order = list(node_order)
        self.loops: list[list[int]] = [list(node_order)]
        self.c_gmax = c_gmax
        self.latency_limit = latency_limit
        self.max_loops = max_loops
        self.request_time_offset = request_time_offset
        self.merge_hysteresis = merge_hysteresis
        self.plan_min_samples = plan_min_samples

        self.mu = MU_CAP
        self.s = 0
        self.p = 0
        self.t_l: Optional[int] = None
        self.stats = DeltaStats(forgetting)
        self.d_max = c_gmax
        self.seq = 0
        self.initialized = False
        self.infeasible = False
        self._stamp_next_dispatch = True
        # Per-loop roundtrip estimates: drive the dispatched target age and
        # the split/merge planner.
        self.loop_roundtrip: list[Optional[int]] = [None]
        self.loop_stats: list[DeltaStats] = [DeltaStats(forgetting)]
        self.pending: dict[int, PendingRequest] = {}
        self.results: list[ResultTuple] = []
        self.topology_epoch = 0
        self._plan_freeze = 0
        self._quarantine_seq = 0
        self._stats_reset_pending = False

    # ---- dispatch ----------------------------------------------------------

    def begin_request(self, l_s: int) -> tuple[PendingRequest, list[RequestTuple]]:
        """Create one request tuple per sensing loop for dispatch time l_s."""
        self.seq += 1
        t = l_s + self.request_time_offset
        if self._stamp_next_dispatch:
            self.t_l = l_s
            self._stamp_next_dispatch = False
        pend = PendingRequest(
            seq=self.seq,
            l_s=l_s,
            t=t,
            loops={i: list(nodes) for i, nodes in enumerate(self.loops)},
            epoch=self.topology_epoch,
        )
        self.pending[self.seq] = pend
        tuples = []
        for loop_id in range(len(self.loops)):
            rt = self.loop_roundtrip[loop_id]
            if rt is None:
                alpha, adhoc = 0, True
            else:
                alpha, adhoc = max(0, rt // 2 + (l_s - t)), False
            tuples.append(
                RequestTuple(
                    t=t,
                    alpha=alpha,
                    mu=self.mu,
                    origin_loop=loop_id,
                    seq=self.seq,
                    adhoc_init=adhoc,
                    infeasible=self.infeasible,
                    lag=t - l_s,
                )
            )
        return pend, tuples

    # ---- returns -----------------------------------------------------------

    def on_loop_return(
        self, tup: RequestTuple, now: int
    ) -> Optional[ResultTuple]:
        """Process one loop's returned tuple; emits once all loops reported."""
        pend = self.pending.get(tup.seq)
        if pend is None or pend.done or tup.origin_loop in pend.returned:
            return None  # late duplicate or unknown sequence number
        pend.returned[tup.origin_loop] = (tup, now)
        if len(pend.returned) == len(pend.loops):
            return self._finalize(pend, now)
        return None

    def on_timeout(self, seq: int, now: int) -> Optional[ResultTuple]:
        """Emit a partial (degraded) result for a request past its deadline."""
        pend = self.pending.get(seq)
        if pend is None or pend.done:
            return None
        if not pend.returned:
            # Nothing came back at all; drop the request.
            pend.done = True
            del self.pending[seq]
            return None
        return self._finalize(pend, now)

    def _finalize(self, pend: PendingRequest, now: int) -> ResultTuple:
        pend.done = True
        del self.pending[pend.seq]
        result = joint_result(
            seq=pend.seq,
            t=pend.t,
            l_s=pend.l_s,
            returned=pend.returned,
            expected_loops=pend.loops,
            d_max=self.d_max,
            emit_time=now,
        )
        self.results.append(result)

        # Results dispatched under an older topology are emitted but do not
        # feed the estimators: their roundtrips belong to the previous regime.
        if pend.epoch == self.topology_epoch and pend.seq > self._quarantine_seq:
            if self._stats_reset_pending:
                self._stats_reset_pending = False
                self.stats = DeltaStats(self.stats.forgetting)
                self.d_max = target_dmax(self.c_gmax, self.stats)
                self.loop_stats = [
                    DeltaStats(self.stats.forgetting) for _ in self.loops
                ]
            # Tuples that ran into a delivery timeout carry the timeout as an
            # artificial roundtrip spike; they are emitted but do not feed
            # the estimators.
            timed_out = any(t.saw_timeout for t, _ in pend.returned.values())
            if not result.degraded and not timed_out:
                self.stats.push(float(result.delta))
            self.d_max = target_dmax(self.c_gmax, self.stats)
            for loop_id, (tup, l_e) in pend.returned.items():
                if tup.saw_timeout:
                    continue
                if loop_id < len(self.loops) and pend.loops[loop_id] == self.loops[loop_id]:
                    # Full roundtrip drives the dispatched age target; the
                    # split planner tracks the longest acquisition segment,
                    # the same quantity the guarantee is built on (a loop
                    # split implicitly by a collocated fallback already
                    # behaves like its segments).
                    self.loop_roundtrip[loop_id] = l_e - pend.l_s
                    self.loop_stats[loop_id].push(
                        float(max(segment_spans(tup, pend.l_s, l_e)))
                    )
            if pend.l_s >= (self.t_l if self.t_l is not None else pend.l_s):
                self._tune(result)
            self.plan_topology()
        return result

    def _tune(self, result: ResultTuple) -> None:
        """Per-emission update of the tuning parameters (the target age is
        re-derived from the roundtrip at dispatch time)."""
        if result.degraded:
            return
        if not self.initialized:
            self.mu = init_mu(self.d_max, max(1, result.delta))
            self.initialized = True
        else:
            # Steer on the systematic part of the guarantee: the tuple's age
            # spread on top of the mean roundtrip.  With a constant roundtrip
            # this equals the plain sign(d_max - c_g); under jitter it stops
            # the per-tuple roundtrip noise from being fed back into the
            # weight.
            delta_bar = self.stats.mean if self.stats.count else float(result.delta)
            direction = sign(self.d_max - (result.c_g - result.delta + delta_bar))
            self.s, self.p, w = automaton_step(self.s, self.p, direction)
            # Under roundtrip noise the raw doubling automaton hunts: widths
            # above the noise floor cycle with comparable amplitude and eat
            # the 3-sigma headroom, while widths far below it stall and let
            # bias regrow.  Pin the width into a band bounded by a quarter of
            # the remaining distance (geometric approach from afar) or an
            # sixteenth of the measured roundtrip deviation (steady tracking).
            gap = abs(self.d_max - result.c_g)
            w_cap = max(self.stats.std() / 16.0, gap / 4.0, 1.0)
            s_cap = max(0, int(math.log2(w_cap)))
            self.s = min(max(self.s, s_cap - 1), s_cap)
            w = 2.0**self.s
            self.mu = update_mu(self.mu, w, direction)
            # Anti-windup: past a reciprocal weight of twice the roundtrip
            # the guarantee is saturated and further loosening has no effect,
            # so integrating beyond it only delays the next tightening.
            if delta_bar > 0:
                self.mu = min(max(self.mu, 0.5 / delta_bar), MU_CAP)
        self._stamp_next_dispatch = True

    # ---- configuration changes ---------------------------------------------

    def set_cgmax(self, value: int) -> None:
        self.c_gmax = value
        self.d_max = target_dmax(self.c_gmax, self.stats)
        self._reset_tuning()

    def _reset_tuning(self) -> None:
        self.initialized = False
        self.s = 0
        self.p = 0
        self._stamp_next_dispatch = True

    # ---- split / merge -----------------------------------------------------

    def _bound(self) -> int:
        if self.latency_limit is None:
            return self.d_max
        return min(self.d_max, self.latency_limit)

    def notify_disturbance(self, emissions: int = 10) -> None:
        """A node became unreachable or recovered.

        Fault handling belongs to the fallback node; the planner holds off
        for a few emissions, results already in flight are quarantined from
        the estimators (their routing vintage is mixed), and the roundtrip
        statistics restart once the pipeline has drained, because the segment
        structure (and with it the delta regime) just changed."""
        self._plan_freeze = max(self._plan_freeze, emissions)
        self._quarantine_seq = self.seq
        self._stats_reset_pending = True

    def plan_topology(self) -> bool:
        """Split a loop whose roundtrip cannot satisfy the target (or the
        latency limit), or merge the cheapest adjacent pair back when their
        combined roundtrip fits with hysteresis.  One change per call; every
        node stays in exactly one loop and the base order is preserved."""
        if self._plan_freeze > 0:
            self._plan_freeze -= 1
            return False
        bound = self._bound()
        for idx, stats in enumerate(self.loop_stats):
            if stats.count < self.plan_min_samples:
                continue
            mean, sd = stats.mean, stats.std()
            if mean <= bound:
                continue
            size = len(self.loops[idx])
            budget = self.max_loops - len(self.loops) + 1
            k_max = min(size, budget)
            if k_max < 2:
                self.infeasible = True
                return False
            k = next(
                (k for k in range(2, k_max + 1) if mean / k + 3.0 * sd <= bound),
                None,
            )
            if k is None:
                k = k_max
                self.infeasible = True
            else:
                self.infeasible = False
            self._split(idx, k, mean)
            return True

        if len(self.loops) >= 2:
            best = None
            for i in range(len(self.loops) - 1):
                a, b = self.loop_stats[i], self.loop_stats[i + 1]
                if a.count < self.plan_min_samples or b.count < self.plan_min_samples:
                    continue
                combined = a.mean + b.mean
                if best is None or combined < best[1]:
                    best = (i, combined)
            if best is not None and best[1] <= self.merge_hysteresis * bound:
                self._merge(best[0])
                return True
        return False

    def _split(self, idx: int, k: int, mean_roundtrip: float) -> None:
        nodes = self.loops[idx]
        size = len(nodes)
        pieces, start = [], 0
        for j in range(k):
            end = start + size // k + (1 if j < size % k else 0)
            pieces.append(nodes[start:end])
            start = end
        self.loops[idx : idx + 1] = pieces
        est = int(mean_roundtrip / k)
        self.loop_roundtrip[idx : idx + 1] = [est] * k
        self.loop_stats[idx : idx + 1] = [
            DeltaStats(self.stats.forgetting) for _ in range(k)
        ]
        self._after_topology_change(sigma_scale=1.0 / math.sqrt(k))

    def _merge(self, idx: int) -> None:
        a = self.loop_roundtrip[idx] or 0
        b = self.loop_roundtrip[idx + 1] or 0
        self.loops[idx : idx + 2] = [self.loops[idx] + self.loops[idx + 1]]
        self.loop_roundtrip[idx : idx + 2] = [(a + b) or None]
        self.loop_stats[idx : idx + 2] = [DeltaStats(self.stats.forgetting)]
        self._after_topology_change(sigma_scale=math.sqrt(2.0))

    def _after_topology_change(self, sigma_scale: float = 1.0) -> None:
        self.topology_epoch += 1
        self._reset_tuning()
        # The roundtrip distribution changes regime with the topology; old
        # samples would inflate the deviation estimate and crater the internal
        # target, cascading into further splits.  Re-seed the statistics with
        # a prior scaled per the iid-hop model (deviation goes with the square
        # root of the hop count) so the target does not ramp while fresh
        # samples accumulate.
        sigma_prior = self.stats.std() * sigma_scale
        self.stats = DeltaStats(self.stats.forgetting)
        known = [r for r in self.loop_roundtrip if r]
        if known and sigma_prior > 0:
            half = 0.704 * sigma_prior
            self.stats.push(max(known) - half)
            self.stats.push(max(known) + half)
        self.d_max = target_dmax(self.c_gmax, self.stats)
        # Pre-seed the weight from the expected per-loop roundtrip so the
        # guarantee lands near the target without waiting for the automaton.
        if known:
            self.mu = init_mu(self.d_max, max(known))
            self.initialized = True
