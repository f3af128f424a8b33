"""Oscillator-level simulated clocks with bounded drift, plus the trusted
reference clock used by loop nodes.

A clock instance owns one drift rate sampled uniformly within the
manufacturer's PPM bound; drift stays constant for the life of the instance.
Tick counting follows the oscillator model: over an ideal tick count ``n`` the
drift adds (or removes) extra ticks, Bernoulli per tick with probability
``|p|``, so the reported tick count has mean ``n * (1 + p)``.  A deterministic
mode (``ticks = round(n * (1 + p))``) exists for reproducible protocol tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

NS = 10**9

# Normal approximation cutoff for the binomial drift-tick draw; above this the
# two are statistically indistinguishable and the draw stays O(1).
_BINOM_NORMAL_CUTOFF = 10**6


@dataclass(frozen=True)
class ClockSpec:
    """Oscillator datasheet values: frequency in Hz and drift bound in PPM."""

    frequency: int
    ppm_bound: float
    label: str = ""

    def __post_init__(self) -> None:
        if self.frequency <= 0:
            raise ValueError("clock frequency must be positive")
        if self.ppm_bound < 0:
            raise ValueError("ppm bound must be non-negative")


# Specifications at 30 degrees C: a Raspberry Pi system clock, a mid-range
# real-time clock chip, and a temperature-compensated crystal oscillator.
CLOCK_PRESETS: dict[str, ClockSpec] = {
    "raspi-sys": ClockSpec(frequency=1_000_000, ppm_bound=40.0, label="raspi-sys"),
    "pcf2127": ClockSpec(frequency=32_768, ppm_bound=3.0, label="pcf2127"),
    "tcvxo": ClockSpec(frequency=19_200_000, ppm_bound=0.1, label="tcvxo"),
    "perfect": ClockSpec(frequency=1_000_000_000, ppm_bound=0.0, label="perfect"),
}


def sample_drift_rate(spec: ClockSpec, rng: np.random.Generator) -> float:
    """Draw the instance drift rate uniformly from [-ppm, +ppm] * 1e-6."""
    bound = spec.ppm_bound * 1e-6
    if bound == 0.0:
        return 0.0
    return float(rng.uniform(-bound, bound))


class ClockInstance:
    """One simulated drifting clock.

    ``offset`` is the initial clock error in nanoseconds (scenario parameter,
    default 0), so adversarial desynchronization can be injected directly.
    """

    def __init__(
        self,
        spec: ClockSpec,
        rng: np.random.Generator,
        offset: int = 0,
        deterministic: bool = False,
        drift_rate: float | None = None,
    ) -> None:
        self.spec = spec
        self.offset = offset
        self.deterministic = deterministic
        self.rng = rng
        self.p = sample_drift_rate(spec, rng) if drift_rate is None else drift_rate
        bound = spec.ppm_bound * 1e-6
        if abs(self.p) > bound + 1e-18:
            raise ValueError(f"drift rate {self.p} outside +-{bound}")
        self._ideal_ticks = 0  # drift-free tick total
        self._ticks = 0  # reported tick total (monotone)
        self._budget = 0  # sub-tick remainder, in units of ticks/1e9

    def _ticks_to_ns(self, ticks: int) -> int:
        return ticks * NS // self.spec.frequency

    def advance(self, true_elapsed: int) -> int:
        """Advance by a true duration; returns the elapsed time the clock saw."""
        if true_elapsed < 0:
            raise ValueError("cannot advance a clock backwards")
        before = self._ticks_to_ns(self._ticks)
        self._budget += true_elapsed * self.spec.frequency
        n, self._budget = divmod(self._budget, NS)
        self._ideal_ticks += n
        if self.deterministic:
            self._ticks = self._ideal_ticks + round(self._ideal_ticks * self.p)
        elif n > 0 and self.p != 0.0:
            q = abs(self.p)
            if n * q > _BINOM_NORMAL_CUTOFF:
                extra = int(round(self.rng.normal(n * q, math.sqrt(n * q * (1 - q)))))
                extra = min(max(extra, 0), n)
            else:
                extra = int(self.rng.binomial(n, q))
            self._ticks += n + (extra if self.p > 0 else -extra)
        else:
            self._ticks += n
        return self._ticks_to_ns(self._ticks) - before

    def now(self) -> int:
        """Current reading in nanoseconds (offset plus accumulated ticks)."""
        return self.offset + self._ticks_to_ns(self._ticks)

    def true_delay_for(self, target_reading: int) -> int:
        """True time until this clock will read ``target_reading``.

        Inverts the drift factor; sub-tick error only, which is enough for
        scheduling sensor reads.
        """
        remaining = target_reading - self.now()
        if remaining <= 0:
            return 0
        return max(0, int(round(remaining / (1.0 + self.p))))


class TrustedClock:
    """Reference clock of a loop node: always equal to global simulator time."""

    p = 0.0

    def __init__(self) -> None:
        self._now = 0

    def advance_to(self, true_now: int) -> None:
        if true_now < self._now:
            raise ValueError("trusted clock cannot move backwards")
        self._now = true_now

    def now(self) -> int:
        return self._now
