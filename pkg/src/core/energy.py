from __future__ import annotations

from collections import deque
from collections.abc import Iterable, Mapping
from dataclasses import dataclass
from types import MappingProxyType
from typing import NamedTuple, Protocol

import numpy as np

from src.core.model import ServerState

SECONDS_PER_HOUR = 3600.0
WH_PER_MWH = 1_000_000.0
DEFAULT_BUFFER_FRACTION = 0.20
DEFAULT_DISCHARGE_HORIZON_S = 3600.0


@dataclass(frozen=True, slots=True)
class EnergyState:
    location_id: str
    battery_level: float
    battery_capacity: float
    max_discharge_rate: float
    buffer_fraction: float = DEFAULT_BUFFER_FRACTION
    solar_output: float = 0.0
    charged_wh: float = 0.0
    discharged_wh: float = 0.0

    def __post_init__(self) -> None:
        if not self.battery_capacity > 0:
            raise ValueError(f"battery_capacity must be > 0 at {self.location_id!r}")
        if not 0.0 <= self.battery_level <= self.battery_capacity:
            raise ValueError(
                f"battery_level {self.battery_level} outside [0, {self.battery_capacity}] "
                f"at {self.location_id!r}"
            )
        if not self.max_discharge_rate > 0:
            raise ValueError(f"max_discharge_rate must be > 0 at {self.location_id!r}")
        if not 0.0 <= self.buffer_fraction < 1.0:
            raise ValueError(f"buffer_fraction must be in [0,1), got {self.buffer_fraction}")

    @property
    def buffer_wh(self) -> float:
        return self.buffer_fraction * self.battery_capacity

    @property
    def soc(self) -> float:
        return self.battery_level / self.battery_capacity


class EnergyProfileMsg(NamedTuple):
    location_id: str
    timestamp: int
    deliver_at: int
    carbon_intensity: float | None = None
    battery_level: float = 0.0
    battery_capacity: float = 0.0
    max_discharge_rate: float = 0.0
    solar_output: float = 0.0
    function_load_w: float = 0.0


def power_draw(s: ServerState, load: float) -> float:
    if not 0.0 <= load <= 1.0:
        raise ValueError(f"load must be in [0,1], got {load}")
    if not s.online:
        return 0.0
    return s.p_idle + load * (s.p_peak - s.p_idle)


def dynamic_power_per_container(s: ServerState) -> float:
    """Power one running function adds on top of idle."""
    return (s.p_peak - s.p_idle) / len(s.containers)


def location_power(servers: Iterable[ServerState], dynamic_watts: float) -> float:
    """Idle draw of the online servers plus the location's function power."""
    return sum(s.p_idle for s in servers if s.online) + dynamic_watts


def op_time(e: EnergyState, p_max: float) -> float:
    """
    Seconds the energy buffer sustains a server drawing p_max watts.
    """
    if not p_max > 0:
        raise ValueError(f"p_max must be > 0, got {p_max}")
    return e.buffer_wh * SECONDS_PER_HOUR / p_max


def _usable(
    level: float, capacity: float, max_rate: float, buffer_fraction: float, horizon_s: float
) -> float:
    headroom_wh = level - buffer_fraction * capacity
    if headroom_wh <= 0:
        return 0.0
    return min(max_rate, headroom_wh * SECONDS_PER_HOUR / horizon_s)


def usable_discharge(e: EnergyState, horizon_s: float = DEFAULT_DISCHARGE_HORIZON_S) -> float:
    """Discharge power that would spend the headroom above the buffer within horizon_s."""
    return _usable(
        e.battery_level, e.battery_capacity, e.max_discharge_rate, e.buffer_fraction, horizon_s
    )


def avail_energy(
    e: EnergyState,
    running_load_watts: float,
    horizon_s: float = DEFAULT_DISCHARGE_HORIZON_S,
) -> float:
    if running_load_watts < 0:
        raise ValueError(f"running_load_watts must be >= 0, got {running_load_watts}")
    return usable_discharge(e, horizon_s) + e.solar_output - running_load_watts


def battery_step(
    e: EnergyState, solar: float, load: float, dt: float
) -> tuple[EnergyState, bool]:
    """
    Advance one location battery by dt seconds.
    The buffer is not enforced here; running work may drain the battery to empty.
    """
    if not dt > 0:
        raise ValueError(f"dt must be > 0, got {dt}")

    hours = dt / SECONDS_PER_HOUR
    net = solar - load
    level = e.battery_level
    charged = 0.0
    discharged = 0.0
    shutdown = False

    if net >= 0:
        headroom = e.battery_capacity - level
        if net * hours >= headroom:
            charged = headroom
            level = e.battery_capacity
        else:
            charged = net * hours
            level += charged
    else:
        demand = -net
        rate = min(demand, e.max_discharge_rate)
        wanted = rate * hours
        if wanted >= level:
            discharged = level
            level = 0.0
            shutdown = wanted > discharged
        else:
            discharged = wanted
            level -= discharged
        shutdown = shutdown or rate < demand

    new_state = EnergyState(
        e.location_id,
        level,
        e.battery_capacity,
        e.max_discharge_rate,
        e.buffer_fraction,
        solar,
        e.charged_wh + charged,
        e.discharged_wh + discharged,
    )
    return new_state, shutdown


def scaled_emissions(energy_wh: float, moer: float) -> float:
    """Pounds of CO2 for energy_wh at moer lbs/MWh."""
    return energy_wh / WH_PER_MWH * moer


def hold_last_value(
    timestamps: np.ndarray, values: np.ndarray, n_ticks: int, tick: int = 1
) -> np.ndarray:
    """
    Expand samples to one value per tick, holding the last sample.
    Ticks before the first sample take the first value.
    """
    ticks = np.arange(n_ticks, dtype=np.int64) * tick
    idx = np.searchsorted(timestamps, ticks, side="right") - 1
    return np.asarray(values, dtype=float)[np.clip(idx, 0, None)]


def publish_profile(
    e: EnergyState | None,
    tick: int,
    delay: int = 0,
    *,
    location_id: str | None = None,
    carbon_intensity: float | None = None,
    function_load_w: float = 0.0,
) -> EnergyProfileMsg:
    if delay < 0:
        raise ValueError(f"delay must be >= 0, got {delay}")
    if e is None:
        if location_id is None:
            raise ValueError("location_id is required when no EnergyState is given")
        return EnergyProfileMsg(location_id, tick, tick + delay, carbon_intensity)
    return EnergyProfileMsg(
        e.location_id,
        tick,
        tick + delay,
        carbon_intensity,
        e.battery_level,
        e.battery_capacity,
        e.max_discharge_rate,
        e.solar_output,
        function_load_w,
    )


def avail_from_profile(
    msg: EnergyProfileMsg,
    buffer_fraction: float = DEFAULT_BUFFER_FRACTION,
    horizon_s: float = DEFAULT_DISCHARGE_HORIZON_S,
) -> float:
    """avail_energy as the controller computes it from a (possibly stale) snapshot."""
    usable = _usable(
        msg.battery_level,
        msg.battery_capacity,
        msg.max_discharge_rate,
        buffer_fraction,
        horizon_s,
    )
    return usable + msg.solar_output - max(0.0, msg.function_load_w)


class ProfileChannel:
    """
    Ordered message list between locations and the controller.
    The controller sees, per location, the newest message already delivered.
    """

    def __init__(self, delay: int = 0):
        if delay < 0:
            raise ValueError(f"delay must be >= 0, got {delay}")
        self.delay = delay
        self._in_flight: deque[EnergyProfileMsg] = deque()
        self._latest: dict[str, EnergyProfileMsg] = {}

    def publish(self, msg: EnergyProfileMsg) -> None:
        self._in_flight.append(msg)

    def deliver(self, now: int) -> int:
        delivered = 0
        while self._in_flight and self._in_flight[0].deliver_at <= now:
            msg = self._in_flight.popleft()
            self._latest[msg.location_id] = msg
            delivered += 1
        return delivered

    def next_delivery(self) -> int | None:
        return self._in_flight[0].deliver_at if self._in_flight else None

    def snapshot(self, location_id: str) -> EnergyProfileMsg | None:
        return self._latest.get(location_id)

    def snapshots(self) -> Mapping[str, EnergyProfileMsg]:
        return MappingProxyType(self._latest)


class EnergyProvider(Protocol):
    """Per-location energy interface queried by the profile publisher."""

    location_id: str

    def get_carbon_intensity(self, t: int) -> float: ...

    def get_battery_level(self) -> float: ...

    def get_battery_capacity(self) -> float: ...

    def get_discharge_rate(self) -> float: ...

    def get_solar(self, t: int) -> float: ...


class TraceEnergyProvider:
    """
    Energy interface backed by per-tick carbon/solar series and a battery state.
    Tick index t selects the series entry.
    """

    def __init__(
        self,
        location_id: str,
        moer_per_tick: np.ndarray | None = None,
        solar_per_tick: np.ndarray | None = None,
        state: EnergyState | None = None,
    ):
        self.location_id = location_id
        self._moer = moer_per_tick
        self._solar = solar_per_tick
        self.state = state

    def get_carbon_intensity(self, t: int) -> float:
        if self._moer is None:
            return 0.0
        return float(self._moer[t])

    def get_battery_level(self) -> float:
        return self.state.battery_level if self.state is not None else 0.0

    def get_battery_capacity(self) -> float:
        return self.state.battery_capacity if self.state is not None else 0.0

    def get_discharge_rate(self) -> float:
        return self.state.max_discharge_rate if self.state is not None else 0.0

    def get_solar(self, t: int) -> float:
        if self._solar is None:
            return 0.0
        return float(self._solar[t])

    def profile(
        self, t: int, tick: int, delay: int, function_load_w: float, grid: bool
    ) -> EnergyProfileMsg:
        if grid:
            return publish_profile(
                None,
                tick,
                delay,
                location_id=self.location_id,
                carbon_intensity=self.get_carbon_intensity(t),
            )
        msg = publish_profile(self.state, tick, delay, function_load_w=max(0.0, function_load_w))
        return msg._replace(solar_output=self.get_solar(t))
