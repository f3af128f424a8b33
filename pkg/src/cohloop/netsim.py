"""Deterministic discrete-event network simulator.

Provides ground-truth global time, per-node drifting clocks, links with
configurable latency/jitter/drop and acknowledged delivery, scripted
failure/recovery and parameter-change events, and records the true read time
of every sensor sample so the guarantee can be cross-checked against reality.

Everything is driven by one event heap ordered by (global time, insertion
sequence), so a run is bit-reproducible given (scenario, seed).
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .clocks import ClockInstance, ClockSpec, TrustedClock
from .coherence import COHERENT_KINDS, RequestTuple, Sample
from .controller import LoopController, ResultTuple
from .fallback import EvictedRecord, FallbackState
from .sensor import AdHoc, Periodic, SensorNode, TO_FALLBACK

MS = 10**6
SEC = 10**9

LOOP_NODE = 0
FALLBACK_NODE = -1


@dataclass(frozen=True)
class LinkModel:
    """Per-hop transmission model.

    Latencies are truncated below at a tenth of the base latency; a sampled
    latency above the acknowledgement timeout counts as a failed delivery
    (the sender gives up before the message lands).
    """

    base_latency: int
    jitter_sigma: int = 0
    jitter_kind: str = "normal"  # "normal" | "lognormal" | "none"
    drop_probability: float = 0.0
    ack_timeout: int = 500 * MS

    def __post_init__(self) -> None:
        if not 0.0 <= self.drop_probability < 1.0:
            raise ValueError("drop probability must be in [0, 1)")
        if self.base_latency < 0:
            raise ValueError("base latency must be non-negative")
        if self.jitter_kind not in ("normal", "lognormal", "none"):
            raise ValueError(f"unknown jitter kind {self.jitter_kind!r}")

    def sample_latency(self, rng: np.random.Generator) -> int:
        if self.jitter_kind == "none" or self.jitter_sigma == 0:
            return self.base_latency
        if self.jitter_kind == "normal":
            lat = rng.normal(self.base_latency, self.jitter_sigma)
        else:
            mean, sd = float(self.base_latency), float(self.jitter_sigma)
            s2 = math.log(1.0 + (sd / mean) ** 2)
            lat = rng.lognormal(math.log(mean) - s2 / 2.0, math.sqrt(s2))
        return max(self.base_latency // 10, int(lat))


LINK_PRESETS: dict[str, LinkModel] = {
    "lan": LinkModel(base_latency=1 * MS, jitter_sigma=MS // 5,
                     jitter_kind="normal", ack_timeout=50 * MS),
    "wifi": LinkModel(base_latency=8 * MS, jitter_sigma=2 * MS,
                      jitter_kind="normal", ack_timeout=200 * MS),
    "lte": LinkModel(base_latency=38 * MS, jitter_sigma=10 * MS,
                     jitter_kind="lognormal", ack_timeout=1000 * MS),
}


class GroundTruth:
    """True read times per sample, keyed by the sample's uid; append-only."""

    def __init__(self) -> None:
        self.read_times: dict[tuple, int] = {}

    def record(self, uid: tuple, true_time: int) -> None:
        if uid in self.read_times:
            raise ValueError(f"duplicate ground-truth record for {uid}")
        self.read_times[uid] = true_time

    def real_coherence(self, result: ResultTuple) -> Optional[int]:
        """True coherence of the values the tuple's guarantee speaks for."""
        times = [
            self.read_times[v.uid]
            for v in result.values
            if v.kind in COHERENT_KINDS and v.uid is not None
        ]
        if not times:
            return None
        return max(times) - min(times)


@dataclass
class _NodeRuntime:
    node: SensorNode
    clock: ClockInstance
    alive: bool = True
    last_true: int = 0
    read_counter: int = 0


class Simulator:
    """One experiment instance: a loop node with a trusted clock, N sensor
    nodes with drifting clocks, a fallback node, and scripted scenario events."""

    def __init__(self, scenario, seed: Optional[int] = None) -> None:
        self.sc = scenario
        root = np.random.SeedSequence(scenario.seed if seed is None else seed)
        clock_ss, link_ss, sched_ss = root.spawn(3)
        self.link_rng = np.random.default_rng(link_ss)
        self.sched_rng = np.random.default_rng(sched_ss)
        clock_rng = np.random.default_rng(clock_ss)

        self.now = 0
        self._heap: list = []
        self._tb = 0
        self.trace: list[tuple[int, str, int, str]] = []
        self.trace_enabled = bool(getattr(scenario, "trace", False))
        self.ground_truth = GroundTruth()
        self.counters = {"sent": 0, "delivered": 0, "failed": 0}

        self.link: LinkModel = scenario.link
        spec: ClockSpec = scenario.clock_spec
        tick_ns = -(-SEC // spec.frequency)
        self.nodes: dict[int, _NodeRuntime] = {}
        for nid in range(1, scenario.node_count + 1):
            node = SensorNode(
                node_id=nid,
                scheduler=scenario.scheduler,
                buffer_capacity=scenario.buffer_capacity,
                request_period_hint=scenario.request_period,
                use_bands=scenario.banded_costs,
                rng=self.sched_rng,
            )
            if scenario.strict_age_margins:
                node.age_margin_ppm = spec.ppm_bound
                node.tick_ns = tick_ns
            clock = ClockInstance(
                spec,
                clock_rng,
                offset=scenario.node_offsets.get(nid, 0),
                deterministic=scenario.deterministic_clocks,
            )
            self.nodes[nid] = _NodeRuntime(node=node, clock=clock)

        self.loop_clock = TrustedClock()
        self.controller = LoopController(
            node_order=list(range(1, scenario.node_count + 1)),
            c_gmax=scenario.c_gmax,
            latency_limit=scenario.latency_limit,
            max_loops=scenario.max_loops,
            request_time_offset=scenario.request_time_offset,
        )
        self.fallback = FallbackState(
            loop_node_id=LOOP_NODE,
            ack_timeout=self.link.ack_timeout,
            staleness_bound=2 * scenario.request_period,
            collocated=scenario.fallback_collocated,
            alternatives=scenario.alternative_sensors,
        )
        if scenario.fallback_collocated:
            self.fb_clock = None
        else:
            self.fb_clock = ClockInstance(
                spec, clock_rng, deterministic=scenario.deterministic_clocks
            )
        self._fb_last_true = 0

        self.results: list[ResultTuple] = []
        self._timeout = scenario.request_timeout or (
            6 * (scenario.node_count + 2) * max(self.link.base_latency, MS)
            + 4 * self.link.ack_timeout
        )
        # Request dispatch stops at the configured duration; sensor reads and
        # probes keep running until the in-flight requests drain.
        self._drain_horizon = scenario.duration + self._timeout

    # ---- event plumbing ------------------------------------------------

    def _schedule(self, when: int, kind: str, node: int, fn: Callable, *args) -> None:
        self._tb += 1
        heapq.heappush(self._heap, (when, self._tb, kind, node, fn, args))

    def _advance_node(self, nid: int) -> int:
        rt = self.nodes[nid]
        if self.now > rt.last_true:
            rt.clock.advance(self.now - rt.last_true)
            rt.last_true = self.now
        return rt.clock.now()

    def _fb_now(self) -> int:
        if self.fallback.collocated:
            self.loop_clock.advance_to(self.now)
            return self.loop_clock.now()
        if self.now > self._fb_last_true:
            self.fb_clock.advance(self.now - self._fb_last_true)
            self._fb_last_true = self.now
        return self.fb_clock.now()

    def _is_alive(self, nid: int) -> bool:
        if nid in (LOOP_NODE, FALLBACK_NODE):
            return True
        return self.nodes[nid].alive

    def send(
        self,
        frm: int,
        to: int,
        deliver: Optional[Callable],
        on_fail: Optional[Callable] = None,
        on_ack: Optional[Callable] = None,
        local: bool = False,
    ) -> None:
        """Acknowledged delivery.

        Drops are decided at send time; receiver liveness at arrival time, so
        a crash while the message is in flight also surfaces as a missing
        acknowledgement.  Either way the sender learns "failed" one
        acknowledgement timeout after sending.  ``local`` hops (between the
        collocated loop and fallback node) are instantaneous and lossless.
        """
        self.counters["sent"] += 1
        if local:
            self.counters["delivered"] += 1
            if deliver:
                self._schedule(self.now, "deliver", to, deliver)
            if on_ack:
                self._schedule(self.now, "ack", frm, on_ack)
            return
        latency = self.link.sample_latency(self.link_rng) + self.sc.node_processing
        dropped = self.link.drop_probability > 0.0 and (
            self.link_rng.random() < self.link.drop_probability
        )
        if dropped or latency > self.link.ack_timeout:
            self.counters["failed"] += 1
            if on_fail:
                self._schedule(self.now + self.link.ack_timeout, "send-fail", frm, on_fail)
            return
        back = self.link.sample_latency(self.link_rng) if on_ack else 0
        self._schedule(
            self.now + latency, "attempt", to,
            self._attempt_delivery, frm, to, deliver, on_fail, on_ack,
            self.now, back,
        )

    def _attempt_delivery(self, frm, to, deliver, on_fail, on_ack, sent_at, back) -> None:
        if not self._is_alive(to):
            self.counters["failed"] += 1
            if on_fail:
                self._schedule(
                    max(self.now, sent_at + self.link.ack_timeout),
                    "send-fail", frm, on_fail,
                )
            return
        self.counters["delivered"] += 1
        if deliver:
            deliver()
        if on_ack:
            self._schedule(self.now + back, "ack", frm, on_ack)

    # ---- routing ---------------------------------------------------------

    def _loop_order_of(self, tup: RequestTuple) -> list[int]:
        return tup.route

    def _next_target(self, tup: RequestTuple, frm: int) -> tuple:
        """Next hop along the tuple's own route: the successor node, the
        fallback node when the successor is known-unreachable, or the loop
        node at the end of the route."""
        route = tup.route
        idx = route.index(frm) if frm != LOOP_NODE else -1
        if idx + 1 >= len(route):
            return ("loop",)
        succ = route[idx + 1]
        if succ in self.fallback.unreachable:
            return ("fallback",)
        return ("node", succ)

    # ---- sensor reads ------------------------------------------------------

    def _make_sample(self, nid: int, read_time: int) -> Sample:
        rt = self.nodes[nid]
        rt.read_counter += 1
        uid = (nid, rt.read_counter)
        self.ground_truth.record(uid, self.now)
        value = (nid << 24) | (rt.read_counter & 0xFFFFFF)
        return Sample(read_time=read_time, value=value, uid=uid)

    def _scheduled_read(self, nid: int) -> None:
        rt = self.nodes[nid]
        if not rt.alive:
            return
        now_n = self._advance_node(nid)
        sample = self._make_sample(nid, now_n)
        evicted = rt.node.record_reading(sample, now_n)
        if evicted is not None:
            self._ship_eviction(nid, evicted)
        self._trace("read", nid, f"t_node={now_n}")

    def _ship_eviction(self, nid: int, eviction) -> None:
        def deliver() -> None:
            self.fallback.note_eviction(
                nid,
                EvictedRecord(
                    sample=eviction.sample,
                    age_at_send=eviction.age_at_send,
                    received_at=self._fb_now(),
                ),
            )

        def failed() -> None:
            self.nodes[nid].node.eviction_failed = True

        self.send(nid, FALLBACK_NODE, deliver, on_fail=failed)

    def _periodic_tick(self, nid: int) -> None:
        rt = self.nodes[nid]
        period = rt.node.scheduler.period
        self._scheduled_read(nid)
        now_n = self._advance_node(nid)
        delay = max(1, rt.clock.true_delay_for(now_n + period))
        if self.now + delay <= self._drain_horizon:
            self._schedule(self.now + delay, "timer", nid, self._periodic_tick, nid)

    # ---- request path --------------------------------------------------

    def _dispatch(self) -> None:
        pend, tuples = self.controller.begin_request(self.now)
        self.loop_clock.advance_to(self.now)
        self._trace("dispatch", LOOP_NODE, f"seq={pend.seq} loops={len(tuples)}")
        for tup in tuples:
            tup.use_latency_shift = self.sc.latency_shift
            tup.route = list(pend.loops[tup.origin_loop])
            target = self._next_target(tup, LOOP_NODE)
            if target[0] == "node":
                self._send_request(LOOP_NODE, target[1], tup)
            else:
                self._to_fallback(tup, after=None, frm=LOOP_NODE)
        self._schedule(
            self.now + self._timeout, "timeout", LOOP_NODE,
            self._request_timeout, pend.seq,
        )
        nxt = self.now + self.sc.request_period
        if nxt <= self.sc.duration:
            self._schedule(nxt, "timer", LOOP_NODE, self._dispatch)

    def _send_request(self, frm: int, to: int, tup: RequestTuple) -> None:
        def deliver() -> None:
            self._handle_request(to, tup)

        def failed() -> None:
            tup.saw_timeout = True
            self._mark_unreachable(to)
            self._to_fallback(tup, after=self._predecessor(to, tup), frm=frm)

        self.send(frm, to, deliver, on_fail=failed)

    def _predecessor(self, nid: int, tup: RequestTuple) -> Optional[int]:
        order = self._loop_order_of(tup)
        idx = order.index(nid)
        return order[idx - 1] if idx > 0 else None

    def _handle_request(self, nid: int, tup: RequestTuple) -> None:
        rt = self.nodes[nid]
        now_n = self._advance_node(nid)
        if tup.use_latency_shift:
            tup.expected_elapsed += self.link.base_latency + self.sc.node_processing

        def read_sensor() -> Sample:
            return self._make_sample(nid, rt.clock.now())

        decision, reads = rt.node.process_request(tup, now_n, read_sensor)
        if decision == TO_FALLBACK:
            self._to_fallback(tup, after=nid, overflow_owner=nid, frm=nid)
            return
        for target in reads:
            delay = max(1, rt.clock.true_delay_for(target))
            if self.now + delay <= self._drain_horizon:
                self._schedule(self.now + delay, "timer", nid, self._scheduled_read, nid)
        self._forward(nid, tup)

    def _forward(self, frm: int, tup: RequestTuple) -> None:
        target = self._next_target(tup, frm)
        if target[0] == "node":
            self._send_request(frm, target[1], tup)
        elif target[0] == "fallback":
            self._to_fallback(tup, after=frm, frm=frm)
        else:
            self._return_to_loop(frm, tup)

    def _to_fallback(
        self,
        tup: RequestTuple,
        after: Optional[int],
        frm: int,
        overflow_owner: Optional[int] = None,
    ) -> None:
        def deliver() -> None:
            self._handle_fallback(tup, after, overflow_owner)

        def failed() -> None:
            tup.saw_timeout = True
            tup.degraded = True
            self._return_to_loop(frm, tup)

        local = self.fallback.collocated and frm == LOOP_NODE
        self.send(frm, FALLBACK_NODE, deliver, on_fail=failed, local=local)

    def _handle_fallback(
        self, tup: RequestTuple, after: Optional[int], overflow_owner: Optional[int]
    ) -> None:
        now_fb = self._fb_now()
        order = self._loop_order_of(tup)
        if not order:
            self._return_to_loop(FALLBACK_NODE, tup)
            return
        nxt, skipped = self.fallback.next_hop(after, order)
        remaining = len(order) - order.index(nxt) if nxt is not None else 0
        self._implicit_split(tup, now_fb, remaining)
        if overflow_owner is not None:
            self.fallback.serve_overflow(tup, overflow_owner, now_fb)
        for nid in skipped:
            self.fallback.compensate_missing(tup, nid, now_fb)
        self._from_fallback(tup, nxt)

    def _implicit_split(self, tup: RequestTuple, now_fb: int, remaining: int) -> None:
        if not self.fallback.collocated:
            return
        order = self._loop_order_of(tup)
        rtrip = None
        if tup.origin_loop < len(self.controller.loop_roundtrip):
            rtrip = self.controller.loop_roundtrip[tup.origin_loop]
        mean_hop = (
            rtrip // (len(order) + 1) if rtrip and order else self.link.base_latency
        )
        self.fallback.pass_through(tup, now_fb, remaining, mean_hop)

    def _from_fallback(self, tup: RequestTuple, nxt: Optional[int]) -> None:
        if nxt is None:
            self._return_to_loop(FALLBACK_NODE, tup)
            return

        def deliver() -> None:
            self._handle_request(nxt, tup)

        def failed() -> None:
            tup.saw_timeout = True
            self._mark_unreachable(nxt)
            now_fb = self._fb_now()
            order = self._loop_order_of(tup)
            self.fallback.compensate_missing(tup, nxt, now_fb)
            nxt2, skipped = self.fallback.next_hop(nxt, order)
            for nid in skipped:
                self.fallback.compensate_missing(tup, nid, now_fb)
            self._from_fallback(tup, nxt2)

        self.send(FALLBACK_NODE, nxt, deliver, on_fail=failed)

    def _return_to_loop(self, frm: int, tup: RequestTuple) -> None:
        def deliver() -> None:
            self.loop_clock.advance_to(self.now)
            result = self.controller.on_loop_return(tup, self.loop_clock.now())
            if result is not None:
                self._emit(result)

        local = self.fallback.collocated and frm == FALLBACK_NODE
        self.send(frm, LOOP_NODE, deliver, local=local)

    def _request_timeout(self, seq: int) -> None:
        self.loop_clock.advance_to(self.now)
        result = self.controller.on_timeout(seq, self.loop_clock.now())
        if result is not None:
            self._emit(result)

    def _emit(self, result: ResultTuple) -> None:
        self.results.append(result)
        if self.fallback.collocated:
            self.fallback.update_cache(result.values, self.now)
        self._trace(
            "emit", LOOP_NODE,
            f"seq={result.seq} cg={result.c_g} ce={result.c_e} loops={result.loop_count}",
        )

    # ---- failures, probes, config changes ------------------------------

    def _mark_unreachable(self, nid: int) -> None:
        if nid in (LOOP_NODE, FALLBACK_NODE):
            return
        self.fallback.unreachable.add(nid)
        self.controller.notify_disturbance()
        self._trace("unreachable", nid, "")

    def _recheck(self) -> None:
        for nid in sorted(self.fallback.unreachable):
            def make_ack(n: int) -> Callable:
                def ack() -> None:
                    self.fallback.unreachable.discard(n)
                    self.controller.notify_disturbance()
                    self._trace("reachable", n, "")
                return ack

            self.send(LOOP_NODE, nid, None, on_ack=make_ack(nid))
        nxt = self.now + 10 * self.sc.request_period
        if nxt <= self.sc.duration:
            self._schedule(nxt, "timer", LOOP_NODE, self._recheck)

    def _crash(self, nid: int) -> None:
        self.nodes[nid].alive = False
        self._trace("crash", nid, "")

    def _recover(self, nid: int) -> None:
        rt = self.nodes[nid]
        rt.alive = True
        self._trace("recover", nid, "")
        if not isinstance(rt.node.scheduler, AdHoc):
            self._scheduled_read(nid)

    def _set_cgmax(self, value: int) -> None:
        self.controller.set_cgmax(value)
        self._trace("cgmax", LOOP_NODE, str(value))

    def _trace(self, kind: str, node: int, detail: str) -> None:
        if self.trace_enabled:
            self.trace.append((self.now, kind, node, detail))

    # ---- main loop -------------------------------------------------------

    def run(self) -> list[ResultTuple]:
        sc = self.sc
        for nid, rt in self.nodes.items():
            if isinstance(rt.node.scheduler, Periodic):
                # Stagger the read cadence per node (random boot phase);
                # otherwise every node samples on one shared grid and the
                # common phase sweeps coherently through the age extremes.
                phase = int(self.sched_rng.integers(1, rt.node.scheduler.period + 1))
                self._schedule(phase, "timer", nid, self._periodic_tick, nid)
        self._schedule(0, "timer", LOOP_NODE, self._dispatch)
        self._schedule(10 * sc.request_period, "timer", LOOP_NODE, self._recheck)
        for when, nid in sc.crashes:
            self._schedule(when, "crash", nid, self._crash, nid)
        for when, nid in sc.recoveries:
            self._schedule(when, "recover", nid, self._recover, nid)
        for when, value in sc.cgmax_schedule:
            self._schedule(when, "config", LOOP_NODE, self._set_cgmax, value)

        horizon = self._drain_horizon + 1
        while self._heap:
            when, _tb, kind, node, fn, args = heapq.heappop(self._heap)
            if when > horizon:
                break
            self.now = when
            fn(*args)
        return self.results

    # ---- post-run helpers ----------------------------------------------

    def real_coherence(self, result: ResultTuple) -> Optional[int]:
        return self.ground_truth.real_coherence(result)

    def read_counts(self) -> dict[int, int]:
        return {nid: rt.node.read_count for nid, rt in sorted(self.nodes.items())}
