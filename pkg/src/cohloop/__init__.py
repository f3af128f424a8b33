"""Time-coherent acquisition of sensor tuples over sensing loops.

The package pairs a sensing-loop protocol (per-tuple coherence guarantees
independent of clock synchronization, a feedback controller trading guarantee
against estimate quality, loop split/merge, and fallback-node fault
tolerance) with a deterministic discrete-event simulator that knows the
ground truth and can therefore check every guarantee.
"""

from .coherence import (
    Interval,
    JoinedValue,
    RequestTuple,
    Sample,
    coherence_estimate,
    coherence_guarantee,
    interval_hull,
    read_time_deviation,
    shifted_request_time,
    unshift_read_time,
)
from .clocks import CLOCK_PRESETS, ClockInstance, ClockSpec, TrustedClock, sample_drift_rate
from .config import ConfigError, Scenario, load_scenario, parse_duration, scenario_from_dict
from .controller import (
    DeltaStats,
    LoopController,
    ResultTuple,
    init_mu,
    joint_result,
    target_dmax,
    update_mu,
)
from .fallback import FallbackState
from .multilat import Region, Scene, estimate_region, guarantee_region, locate
from .netsim import LINK_PRESETS, GroundTruth, LinkModel, Simulator
from .sensor import (
    AdHoc,
    HistoryBuffer,
    Periodic,
    ScheduleNextRead,
    SensorNode,
    join_cost,
    next_read_times,
    select_value,
)

__version__ = "0.1.0"
