"""Scenario configuration.

One structured YAML file per experiment with a fixed key set; unknown keys
are hard errors so runs stay reproducible.  Durations accept ns/us/ms/s
suffixes; everything is normalized to integer nanoseconds.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np
import yaml

from .clocks import CLOCK_PRESETS, ClockSpec
from .netsim import LINK_PRESETS, LinkModel
from .sensor import AdHoc, Periodic, ScheduleNextRead, SchedulerKind


class ConfigError(Exception):
    """Invalid configuration; ``problems`` lists the offending keys/values."""

    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


_DURATION_RE = re.compile(r"^\s*(-?\d+(?:\.\d+)?(?:[eE][+-]?\d+)?)\s*(ns|us|ms|s)\s*$")
_UNIT_NS = {"ns": 1, "us": 10**3, "ms": 10**6, "s": 10**9}


def parse_duration(value: Any, key: str = "duration") -> int:
    """Parse a duration into integer nanoseconds.

    Integers pass through as nanoseconds; strings need a unit suffix."""
    if isinstance(value, bool):
        raise ConfigError([f"{key}: expected a duration, got a boolean"])
    if isinstance(value, int):
        return value
    if isinstance(value, float):
        raise ConfigError([f"{key}: bare floats are ambiguous, add a unit suffix"])
    if isinstance(value, str):
        m = _DURATION_RE.match(value)
        if m:
            return int(round(float(m.group(1)) * _UNIT_NS[m.group(2)]))
    raise ConfigError([f"{key}: cannot parse duration {value!r}"])


@dataclass
class Scenario:
    """Fully resolved experiment description consumed by the simulator."""

    name: str
    duration: int
    seed: int
    node_count: int
    link: LinkModel
    clock_spec: ClockSpec
    scheduler: SchedulerKind
    request_period: int
    c_gmax: int
    node_offsets: dict[int, int] = field(default_factory=dict)
    deterministic_clocks: bool = False
    request_time_offset: int = 0
    cgmax_schedule: list[tuple[int, int]] = field(default_factory=list)
    crashes: list[tuple[int, int]] = field(default_factory=list)
    recoveries: list[tuple[int, int]] = field(default_factory=list)
    max_loops: int = 8
    latency_limit: Optional[int] = None
    buffer_capacity: int = 256
    fallback_collocated: bool = True
    alternative_sensors: dict[int, int] = field(default_factory=dict)
    banded_costs: bool = False
    strict_age_margins: bool = False
    latency_shift: bool = False
    node_processing: int = 0
    request_timeout: Optional[int] = None
    trace: bool = False


_SCENARIO_KEYS = {
    "name", "duration", "seed", "node_count", "link", "clock", "clock_offsets",
    "clock_mode", "scheduler", "request_period", "request_time_offset", "cgmax",
    "cgmax_schedule", "crashes", "recoveries", "max_loops", "latency_limit",
    "buffer_capacity", "fallback", "alternative_sensors", "banded_costs",
    "strict_age_margins", "latency_shift", "node_processing", "request_timeout",
}

_LINK_KEYS = {"base_latency", "jitter_sigma", "jitter_kind", "drop_probability",
              "ack_timeout"}
_CLOCK_KEYS = {"frequency", "ppm"}
_SCHEDULER_KEYS = {"kind", "period", "extra_samples", "jitter_width", "jitter_guard"}


def _require(raw: dict, key: str, problems: list[str]) -> Any:
    if key not in raw:
        problems.append(f"{key}: required key missing")
        return None
    return raw[key]


def _build_link(value: Any, problems: list[str]) -> Optional[LinkModel]:
    if isinstance(value, str):
        if value in LINK_PRESETS:
            return LINK_PRESETS[value]
        problems.append(f"link: unknown preset {value!r} (have {sorted(LINK_PRESETS)})")
        return None
    if isinstance(value, dict):
        unknown = set(value) - _LINK_KEYS
        if unknown:
            problems.append(f"link: unknown keys {sorted(unknown)}")
            return None
        try:
            return LinkModel(
                base_latency=parse_duration(value["base_latency"], "link.base_latency"),
                jitter_sigma=parse_duration(value.get("jitter_sigma", 0), "link.jitter_sigma"),
                jitter_kind=value.get("jitter_kind", "normal"),
                drop_probability=float(value.get("drop_probability", 0.0)),
                ack_timeout=parse_duration(value.get("ack_timeout", "500ms"), "link.ack_timeout"),
            )
        except (ConfigError, ValueError, KeyError) as exc:
            problems.append(f"link: {exc}")
            return None
    problems.append("link: expected a preset name or a mapping")
    return None


def _build_clock(value: Any, problems: list[str]) -> Optional[ClockSpec]:
    if value is None:
        return CLOCK_PRESETS["raspi-sys"]
    if isinstance(value, str):
        if value in CLOCK_PRESETS:
            return CLOCK_PRESETS[value]
        problems.append(f"clock: unknown preset {value!r} (have {sorted(CLOCK_PRESETS)})")
        return None
    if isinstance(value, dict):
        unknown = set(value) - _CLOCK_KEYS
        if unknown:
            problems.append(f"clock: unknown keys {sorted(unknown)}")
            return None
        try:
            return ClockSpec(frequency=int(value["frequency"]),
                             ppm_bound=float(value["ppm"]), label="custom")
        except (ValueError, KeyError) as exc:
            problems.append(f"clock: {exc}")
            return None
    problems.append("clock: expected a preset name or a mapping")
    return None


def _build_scheduler(
    value: Any,
    request_period: Optional[int],
    link: Optional[LinkModel],
    problems: list[str],
) -> Optional[SchedulerKind]:
    if not isinstance(value, dict) or "kind" not in value:
        problems.append("scheduler: expected a mapping with a 'kind' key")
        return None
    unknown = set(value) - _SCHEDULER_KEYS
    if unknown:
        problems.append(f"scheduler: unknown keys {sorted(unknown)}")
        return None
    kind = value["kind"]
    try:
        if kind == "adhoc":
            return AdHoc()
        if kind == "periodic":
            return Periodic(period=parse_duration(value["period"], "scheduler.period"))
        if kind == "snr":
            period = (
                parse_duration(value["period"], "scheduler.period")
                if "period" in value
                else request_period
            )
            if period is None:
                problems.append("scheduler: snr needs a period or request_period")
                return None
            if "jitter_guard" in value:
                guard = parse_duration(value["jitter_guard"], "scheduler.jitter_guard")
            else:
                # Default guard: the expected early-arrival scale of the next
                # request, bounded by a small fraction of the cadence.
                guard = min(period // 32, 4 * (link.jitter_sigma if link else 0))
            return ScheduleNextRead(
                period=period,
                jitter_width=parse_duration(value.get("jitter_width", 0), "scheduler.jitter_width"),
                extra_samples=int(value.get("extra_samples", 0)),
                jitter_guard=guard,
            )
    except (ConfigError, ValueError, KeyError) as exc:
        problems.append(f"scheduler: {exc}")
        return None
    problems.append(f"scheduler: unknown kind {kind!r} (adhoc | periodic | snr)")
    return None


def _build_offsets(
    value: Any, node_count: int, seed: int, problems: list[str]
) -> dict[int, int]:
    if value is None:
        return {}
    if isinstance(value, dict) and value.get("kind") == "uniform":
        unknown = set(value) - {"kind", "max_abs"}
        if unknown:
            problems.append(f"clock_offsets: unknown keys {sorted(unknown)}")
            return {}
        max_abs = parse_duration(value.get("max_abs", "10s"), "clock_offsets.max_abs")
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC10C]))
        return {
            nid: int(rng.integers(-max_abs, max_abs + 1))
            for nid in range(1, node_count + 1)
        }
    if isinstance(value, dict):
        out = {}
        for k, v in value.items():
            try:
                nid = int(k)
            except (TypeError, ValueError):
                problems.append(f"clock_offsets: bad node id {k!r}")
                continue
            if not 1 <= nid <= node_count:
                problems.append(f"clock_offsets: node {nid} out of range")
                continue
            out[nid] = parse_duration(v, f"clock_offsets.{k}")
        return out
    problems.append("clock_offsets: expected a mapping")
    return {}


def _build_schedule(value: Any, key: str, problems: list[str], value_key: str) -> list:
    if value is None:
        return []
    out = []
    if not isinstance(value, list):
        problems.append(f"{key}: expected a list")
        return []
    for i, entry in enumerate(value):
        if not isinstance(entry, dict):
            problems.append(f"{key}[{i}]: expected a mapping")
            continue
        allowed = {"at", value_key, f"{value_key}s"}
        unknown = set(entry) - allowed
        if unknown:
            problems.append(f"{key}[{i}]: unknown keys {sorted(unknown)}")
            continue
        try:
            at = parse_duration(entry["at"], f"{key}[{i}].at")
        except (ConfigError, KeyError) as exc:
            problems.append(f"{key}[{i}]: {exc}")
            continue
        if f"{value_key}s" in entry:
            for v in entry[f"{value_key}s"]:
                out.append((at, v))
        elif value_key in entry:
            out.append((at, entry[value_key]))
        else:
            problems.append(f"{key}[{i}]: missing {value_key!r}")
    return sorted(out)


def scenario_from_dict(raw: dict, seed_override: Optional[int] = None) -> Scenario:
    """Validate and resolve a raw mapping into a Scenario.

    Raises :class:`ConfigError` with one entry per offending key."""
    problems: list[str] = []
    if not isinstance(raw, dict):
        raise ConfigError(["top level: expected a mapping"])
    unknown = set(raw) - _SCENARIO_KEYS
    if unknown:
        problems.append(f"unknown keys {sorted(unknown)}")

    duration = node_count = request_period = c_gmax = None
    v = _require(raw, "duration", problems)
    if v is not None:
        try:
            duration = parse_duration(v, "duration")
            if duration <= 0:
                problems.append("duration: must be positive")
        except ConfigError as exc:
            problems.extend(exc.problems)
    v = _require(raw, "node_count", problems)
    if v is not None:
        node_count = int(v)
        if node_count < 1:
            problems.append("node_count: must be at least 1")
    v = _require(raw, "request_period", problems)
    if v is not None:
        try:
            request_period = parse_duration(v, "request_period")
            if request_period <= 0:
                problems.append("request_period: must be positive")
        except ConfigError as exc:
            problems.extend(exc.problems)
    v = _require(raw, "cgmax", problems)
    if v is not None:
        try:
            c_gmax = parse_duration(v, "cgmax")
        except ConfigError as exc:
            problems.extend(exc.problems)

    seed = seed_override if seed_override is not None else int(raw.get("seed", 0))
    link = _build_link(raw.get("link", "lan"), problems)
    clock_spec = _build_clock(raw.get("clock"), problems)
    scheduler = _build_scheduler(
        raw.get("scheduler", {"kind": "adhoc"}), request_period, link, problems
    )
    offsets = (
        _build_offsets(raw.get("clock_offsets"), node_count, seed, problems)
        if node_count
        else {}
    )
    clock_mode = raw.get("clock_mode", "stochastic")
    if clock_mode not in ("stochastic", "deterministic"):
        problems.append(f"clock_mode: {clock_mode!r} (stochastic | deterministic)")
    fallback_mode = raw.get("fallback", "collocated")
    if fallback_mode not in ("collocated", "detached"):
        problems.append(f"fallback: {fallback_mode!r} (collocated | detached)")

    cgmax_schedule = []
    for at, value in _build_schedule(raw.get("cgmax_schedule"), "cgmax_schedule", problems, "value"):
        try:
            cgmax_schedule.append((at, parse_duration(value, "cgmax_schedule.value")))
        except ConfigError as exc:
            problems.extend(exc.problems)
    crashes = [(at, int(n)) for at, n in _build_schedule(raw.get("crashes"), "crashes", problems, "node")]
    recoveries = [(at, int(n)) for at, n in _build_schedule(raw.get("recoveries"), "recoveries", problems, "node")]

    alternatives = {}
    alt_raw = raw.get("alternative_sensors", {})
    if not isinstance(alt_raw, dict):
        problems.append("alternative_sensors: expected a mapping")
    else:
        alternatives = {int(k): int(v) for k, v in alt_raw.items()}

    latency_limit = None
    if raw.get("latency_limit") is not None:
        try:
            latency_limit = parse_duration(raw["latency_limit"], "latency_limit")
        except ConfigError as exc:
            problems.extend(exc.problems)
    request_timeout = None
    if raw.get("request_timeout") is not None:
        try:
            request_timeout = parse_duration(raw["request_timeout"], "request_timeout")
        except ConfigError as exc:
            problems.extend(exc.problems)

    if problems:
        raise ConfigError(problems)

    return Scenario(
        name=str(raw.get("name", "scenario")),
        duration=duration,
        seed=seed,
        node_count=node_count,
        link=link,
        clock_spec=clock_spec,
        scheduler=scheduler,
        request_period=request_period,
        c_gmax=c_gmax,
        node_offsets=offsets,
        deterministic_clocks=clock_mode == "deterministic",
        request_time_offset=parse_duration(raw.get("request_time_offset", 0), "request_time_offset"),
        cgmax_schedule=cgmax_schedule,
        crashes=crashes,
        recoveries=recoveries,
        max_loops=int(raw.get("max_loops", 8)),
        latency_limit=latency_limit,
        buffer_capacity=int(raw.get("buffer_capacity", 256)),
        fallback_collocated=fallback_mode == "collocated",
        alternative_sensors=alternatives,
        banded_costs=bool(raw.get("banded_costs", False)),
        strict_age_margins=bool(raw.get("strict_age_margins", False)),
        latency_shift=bool(raw.get("latency_shift", False)),
        node_processing=parse_duration(raw.get("node_processing", 0), "node_processing"),
        request_timeout=request_timeout,
    )


def load_scenario(path: str, seed_override: Optional[int] = None) -> Scenario:
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    return scenario_from_dict(raw, seed_override)


_SWEEP_KEYS = {"base", "node_counts", "cgmax_values", "cell_duration"}


@dataclass
class SweepGrid:
    base: dict
    node_counts: list[int]
    cgmax_values: list[int]
    cell_duration: int


def load_sweep(path: str) -> SweepGrid:
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    problems: list[str] = []
    if not isinstance(raw, dict):
        raise ConfigError(["top level: expected a mapping"])
    unknown = set(raw) - _SWEEP_KEYS
    if unknown:
        problems.append(f"unknown keys {sorted(unknown)}")
    base = raw.get("base")
    if not isinstance(base, dict):
        problems.append("base: required mapping with scenario keys")
    counts = raw.get("node_counts")
    if not isinstance(counts, list) or not counts:
        problems.append("node_counts: required non-empty list")
    values = raw.get("cgmax_values")
    if not isinstance(values, list) or not values:
        problems.append("cgmax_values: required non-empty list")
    try:
        cell_duration = parse_duration(raw.get("cell_duration", "30s"), "cell_duration")
    except ConfigError as exc:
        problems.extend(exc.problems)
        cell_duration = 0
    if problems:
        raise ConfigError(problems)
    return SweepGrid(
        base=base,
        node_counts=[int(c) for c in counts],
        cgmax_values=[parse_duration(v, "cgmax_values") for v in values],
        cell_duration=cell_duration,
    )
