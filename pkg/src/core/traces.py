from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from src.core.hash_ring import hash_to_unit
from src.core.model import FunctionDef

MIN_EXEC_TIME_S = 0.1
MAX_EXEC_TIME_S = 2.0


class TraceProfile(str, Enum):
    RARE = "rare"
    MEDIUM = "medium"
    HIGH = "high"

    @property
    def num_functions(self) -> int:
        return {"rare": 125, "medium": 50, "high": 50}[self.value]

    @property
    def requests_per_minute(self) -> float:
        return {"rare": 15.0, "medium": 54.0, "high": 354.0}[self.value]


def default_exec_time(function_id: str) -> float:
    """Execution time for traces that do not carry one, fixed by the function id."""
    u = hash_to_unit(f"{function_id}#exec").position
    return MIN_EXEC_TIME_S + u * (MAX_EXEC_TIME_S - MIN_EXEC_TIME_S)


@dataclass(frozen=True, eq=False)
class FunctionTrace:
    functions: tuple[FunctionDef, ...]
    counts: np.ndarray  # (minutes, functions) invocations per minute

    def __post_init__(self) -> None:
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[1] != len(self.functions):
            raise ValueError(
                f"counts must be shaped (minutes, {len(self.functions)}), got {counts.shape}"
            )
        if (counts < 0).any():
            raise ValueError("Invocation counts must be >= 0")
        ids = [f.id for f in self.functions]
        if len(set(ids)) != len(ids):
            raise ValueError("Function ids must be unique")
        object.__setattr__(self, "counts", counts)

    @property
    def minutes(self) -> int:
        return int(self.counts.shape[0])

    @property
    def total_invocations(self) -> int:
        return int(self.counts.sum())

    @property
    def requests_per_minute(self) -> float:
        return self.total_invocations / self.minutes if self.minutes else 0.0


def _check_series(location_id: str, timestamps: np.ndarray, values: np.ndarray, what: str) -> None:
    if timestamps.ndim != 1 or timestamps.shape != values.shape:
        raise ValueError(f"{what} trace for {location_id!r}: timestamps and values differ in shape")
    if timestamps.size > 1 and not (np.diff(timestamps) > 0).all():
        raise ValueError(f"{what} trace for {location_id!r}: timestamps must strictly increase")
    if (values < 0).any():
        raise ValueError(f"{what} trace for {location_id!r}: values must be >= 0")


@dataclass(frozen=True, eq=False)
class CarbonTrace:
    location_id: str
    timestamps: np.ndarray  # seconds since start
    values: np.ndarray  # MOER lbs/MWh

    def __post_init__(self) -> None:
        ts = np.asarray(self.timestamps, dtype=np.int64)
        vals = np.asarray(self.values, dtype=float)
        _check_series(self.location_id, ts, vals, "Carbon")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "values", vals)

    def mean(self) -> float:
        return float(self.values.mean()) if self.values.size else 0.0


@dataclass(frozen=True, eq=False)
class SolarTrace:
    location_id: str
    timestamps: np.ndarray
    gti: np.ndarray  # W/m2
    array_watts: float = 1000.0

    def __post_init__(self) -> None:
        ts = np.asarray(self.timestamps, dtype=np.int64)
        gti = np.asarray(self.gti, dtype=float)
        _check_series(self.location_id, ts, gti, "Solar")
        if self.array_watts < 0:
            raise ValueError(f"array_watts must be >= 0, got {self.array_watts}")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "gti", gti)

    @property
    def output_watts(self) -> np.ndarray:
        """Panel output: GTI normalized to a 1 W panel, scaled to the array."""
        return self.gti / 1000.0 * self.array_watts

    def with_array(self, array_watts: float) -> SolarTrace:
        return SolarTrace(self.location_id, self.timestamps, self.gti, array_watts)


@dataclass(frozen=True)
class LocationConfig:
    location_id: str
    avg_moer: float
    avg_gti: float
    solar_array_w: float = 1000.0
    battery_wh: float = 3800.0
    servers: int = 2
    utc_offset_h: float = 0.0
    name: str = ""
    balancing_authority: str = ""

    def __post_init__(self) -> None:
        if self.servers < 1:
            raise ValueError(f"Location {self.location_id!r} needs at least one server")
        if self.avg_moer < 0 or self.avg_gti < 0:
            raise ValueError(f"Location {self.location_id!r} has negative averages")
        if self.battery_wh <= 0 or self.solar_array_w < 0:
            raise ValueError(f"Location {self.location_id!r} has invalid battery/solar sizing")


@dataclass(frozen=True)
class TraceBundle:
    functions: FunctionTrace | None
    carbon: Mapping[str, CarbonTrace] = field(default_factory=dict)
    solar: Mapping[str, SolarTrace] = field(default_factory=dict)
