"""HotBox chamber model: heater plant, Newton cooling, mote lag and the
anti-overshoot controller, all on a simulated clock.

The plant is first order in the air temperature,

    dT_air/dt  = duty * heat_rate_full - (T_air - T_env) / cooling_time_constant
    dT_mote/dt = (T_air - T_mote) / mote_lag_constant

integrated with explicit Euler steps of at most one second.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import List, Sequence

import numpy as np

from .errors import TargetAboveLimit
from .fileio import atomic_write_text

SETTLE_TOLERANCE = 0.5    # degC, mote within this of the target counts as settled
DEFAULT_DT = 0.5
MAX_SETTLE_SECONDS = 48 * 3600.0


@dataclass(frozen=True)
class ThermalState:
    air_temp: float
    mote_temp: float
    env_temp: float = 22.0
    heater_duty: float = 0.0
    sim_time: float = 0.0

    @classmethod
    def at_rest(cls, temp: float, env_temp: float = 22.0) -> "ThermalState":
        return cls(temp, temp, env_temp)


@dataclass(frozen=True)
class PlantParams:
    heat_rate_full: float = 0.061          # degC/s at full duty
    cooling_time_constant: float = 3364.0  # s
    mote_lag_constant: float = 90.0        # s
    max_temp: float = 90.0
    # Rate (1/s) at which the controller lets the air close the remaining gap
    # once it is out of saturation.
    approach_rate: float = 1.0 / 300.0

    def __post_init__(self):
        for name in ("heat_rate_full", "cooling_time_constant", "mote_lag_constant",
                     "max_temp", "approach_rate"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_temp > 90.0:
            raise ValueError("max_temp must not exceed 90 degC")

    @classmethod
    def from_calibration(cls, cal) -> "PlantParams":
        return cls(cal.heat_rate_full, cal.cooling_time_constant, cal.mote_lag_constant,
                   cal.max_temp, cal.approach_rate)


@dataclass(frozen=True)
class ScheduleStep:
    target_temp: float
    dwell_seconds: float = 1200.0

    def __post_init__(self):
        if self.dwell_seconds < 0:
            raise ValueError("dwell_seconds must be >= 0")


@dataclass(frozen=True)
class ThermalEvent:
    kind: str             # "dwell_start" or "dwell_end"
    sim_time: float
    step_index: int
    targets: tuple


@dataclass
class ThermalRun:
    """Sampled trajectory of one or more chambers stepped in lockstep.

    Arrays are indexed ``[sample]`` for ``time`` and ``[sample, chamber]``
    for everything else.
    """

    time: np.ndarray
    air: np.ndarray
    mote: np.ndarray
    target: np.ndarray
    duty: np.ndarray
    events: List[ThermalEvent] = field(default_factory=list)

    def dwell_windows(self):
        """(step_index, start, end) for every completed dwell."""
        starts = {e.step_index: e.sim_time for e in self.events if e.kind == "dwell_start"}
        return [(e.step_index, starts[e.step_index], e.sim_time)
                for e in self.events if e.kind == "dwell_end"]

    def state_at(self, t: float, chamber: int = 0):
        """(air, mote, target) at the last sample not after ``t``."""
        k = int(np.searchsorted(self.time, t, side="right")) - 1
        k = min(max(k, 0), len(self.time) - 1)
        return self.air[k, chamber], self.mote[k, chamber], self.target[k, chamber]

    def first_time(self, mask) -> float:
        """Time of the first sample where ``mask`` holds, NaN if never."""
        hit = np.flatnonzero(mask)
        return float(self.time[hit[0]]) if hit.size else math.nan

    def to_csv_text(self, chamber: int = 0) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sim_time_s", "air_temp_c", "mote_temp_c", "target_c", "duty"])
        for row in zip(self.time, self.air[:, chamber], self.mote[:, chamber],
                       self.target[:, chamber], self.duty[:, chamber]):
            w.writerow(["nan" if math.isnan(v) else f"{v:.6f}" for v in row])
        return buf.getvalue()

    def to_csv(self, path, chamber: int = 0):
        atomic_write_text(path, self.to_csv_text(chamber))


def plant_step(state: ThermalState, params: PlantParams, dt: float = DEFAULT_DT) -> ThermalState:
    if not 0 < dt <= 1.0:
        raise ValueError("dt must lie in (0, 1] seconds")
    duty = state.heater_duty if state.air_temp < params.max_temp else 0.0
    air = state.air_temp + dt * (duty * params.heat_rate_full
                                 - (state.air_temp - state.env_temp) / params.cooling_time_constant)
    mote = state.mote_temp + dt * (state.air_temp - state.mote_temp) / params.mote_lag_constant
    return replace(state, air_temp=air, mote_temp=mote, heater_duty=duty, sim_time=state.sim_time + dt)


def controller_duty(state: ThermalState, target: float, params: PlantParams,
                    dt: float = DEFAULT_DT) -> float:
    """Heater duty for the next step.

    The duty cancels the current heat loss and closes ``approach_rate`` of the
    remaining gap per second, so heating slows down as air and target
    converge.  It is capped so the one-step-ahead prediction stays at or
    below the target.
    """
    if target > params.max_temp:
        raise TargetAboveLimit(f"target {target} degC above limit {params.max_temp} degC")
    gap = target - state.air_temp
    if gap <= 0:
        return 0.0
    loss = (state.air_temp - state.env_temp) / params.cooling_time_constant
    wanted = (loss + params.approach_rate * gap) / params.heat_rate_full
    ceiling = (loss + gap / dt) / params.heat_rate_full
    return float(min(max(min(wanted, ceiling), 0.0), 1.0))


def run_lockstep(initial: Sequence[ThermalState], step_targets: Sequence[Sequence[float]],
                 dwell_seconds: Sequence[float], params: PlantParams, dt: float = DEFAULT_DT,
                 settle: Sequence[bool] = None) -> ThermalRun:
    """Step several chambers on one clock through a common list of phases.

    Phase ``i`` drives chamber ``c`` toward ``step_targets[i][c]``; it waits
    until every chamber flagged in ``settle`` has its mote within
    tolerance, then holds for ``dwell_seconds[i]``.
    """
    states = list(initial)
    nch = len(states)
    settle = [True] * nch if settle is None else list(settle)
    for targets in step_targets:
        for t in targets:
            if t > params.max_temp:
                raise TargetAboveLimit(f"target {t} degC above limit {params.max_temp} degC")
    times, airs, motes, tgts, duties, events = [], [], [], [], [], []

    def record(targets):
        times.append(states[0].sim_time)
        airs.append([s.air_temp for s in states])
        motes.append([s.mote_temp for s in states])
        tgts.append(list(targets))
        duties.append([s.heater_duty for s in states])

    def advance(targets):
        for c in range(nch):
            d = controller_duty(states[c], targets[c], params, dt)
            states[c] = plant_step(replace(states[c], heater_duty=d), params, dt)
        record(targets)

    record(step_targets[0])
    for idx, (targets, dwell) in enumerate(zip(step_targets, dwell_seconds)):
        start = states[0].sim_time
        while not all(abs(states[c].mote_temp - targets[c]) <= SETTLE_TOLERANCE
                      for c in range(nch) if settle[c]):
            if states[0].sim_time - start > MAX_SETTLE_SECONDS:
                raise ValueError(f"step {idx} never settles at {targets}")
            advance(targets)
        t0 = states[0].sim_time
        events.append(ThermalEvent("dwell_start", t0, idx, tuple(targets)))
        n_hold = int(math.ceil(dwell / dt - 1e-9))
        for _ in range(n_hold):
            advance(targets)
        events.append(ThermalEvent("dwell_end", t0 + n_hold * dt, idx, tuple(targets)))

    return ThermalRun(np.array(times), np.array(airs), np.array(motes), np.array(tgts),
                      np.array(duties), events)


def run_schedule(initial: ThermalState, steps: Sequence[ScheduleStep], params: PlantParams,
                 dt: float = DEFAULT_DT) -> ThermalRun:
    """Closed-loop run of a single chamber through ``steps``."""
    if not steps:
        raise ValueError("schedule must contain at least one step")
    return run_lockstep([initial], [[s.target_temp] for s in steps],
                        [s.dwell_seconds for s in steps], params, dt)


def run_open_loop(initial: ThermalState, duty: float, seconds: float, params: PlantParams,
                  dt: float = DEFAULT_DT) -> ThermalRun:
    """Constant-duty run, e.g. passive cooling with ``duty=0``."""
    state = replace(initial, heater_duty=duty)
    rows = [state]
    for _ in range(int(round(seconds / dt))):
        state = plant_step(replace(state, heater_duty=duty), params, dt)
        rows.append(state)
    col = lambda name: np.array([[getattr(s, name)] for s in rows])
    return ThermalRun(np.array([s.sim_time for s in rows]), col("air_temp"), col("mote_temp"),
                      np.full((len(rows), 1), math.nan), col("heater_duty"))


def staircase(start: float = 30.0, stop: float = 90.0, step: float = 5.0,
              dwell_seconds: float = 1200.0) -> List[ScheduleStep]:
    """Evenly spaced heating schedule, ``start`` and ``stop`` included."""
    n = int(round((stop - start) / step))
    return [ScheduleStep(start + k * step, dwell_seconds) for k in range(n + 1)]
