from __future__ import annotations

import logging
import math
import time
from collections.abc import Sequence

import numpy as np

from src.core.model import DEFAULT_NUM_TYPES, FunctionDef
from src.core.traces import (
    MAX_EXEC_TIME_S,
    MIN_EXEC_TIME_S,
    CarbonTrace,
    FunctionTrace,
    LocationConfig,
    SolarTrace,
    TraceBundle,
    TraceProfile,
)

logger = logging.getLogger(__name__)

CARBON_CADENCE_S = 300
SOLAR_CADENCE_S = 300
SECONDS_PER_DAY = 86_400

# 20% of functions carry 80% of the aggregate rate.
HOT_FUNCTION_SHARE = 0.20
HOT_RATE_SHARE = 0.80

DEFAULT_LOCATIONS: tuple[LocationConfig, ...] = (
    LocationConfig("henderson-nv", 991, 271, utc_offset_h=-8, name="Henderson, NV", balancing_authority="NEVP"),
    LocationConfig("the-dalles-or", 1068, 201, utc_offset_h=-8, name="The Dalles, OR", balancing_authority="BPA"),
    LocationConfig("douglas-county-ga", 1169, 203, utc_offset_h=-5, name="Douglas County, GA", balancing_authority="SOCO"),
    LocationConfig("new-albany-oh", 1283, 174, utc_offset_h=-5, name="New Albany, OH", balancing_authority="PJM"),
    LocationConfig("storey-county-nv", 991, 265, utc_offset_h=-8, name="Storey County, NV", balancing_authority="NEVP"),
    LocationConfig("montgomery-county-tn", 1139, 192, utc_offset_h=-6, name="Montgomery County, TN", balancing_authority="TVA"),
    LocationConfig("papillion-ne", 1108, 211, utc_offset_h=-6, name="Papillion, NE", balancing_authority="SPP"),
    LocationConfig("midlothian-tx", 1099, 216, utc_offset_h=-6, name="Midlothian, TX", balancing_authority="ERCOT"),
    LocationConfig("mayes-county-ok", 1350, 204, utc_offset_h=-6, name="Mayes County, OK", balancing_authority="SPP"),
)

_STREAMS = {"functions": 1, "carbon": 2, "solar": 3}


def child_seed(seed: int, stream: str, index: int = 0) -> int:
    """Independent, reproducible seed for one generator stream."""
    ss = np.random.SeedSequence([int(seed), _STREAMS[stream], int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def gen_function_trace(
    profile: TraceProfile | str,
    duration_s: int,
    seed: int,
    num_types: int = DEFAULT_NUM_TYPES,
) -> FunctionTrace:
    """
    Synthetic per-minute invocation counts calibrated to a trace profile.

    Per-function rates come from a seeded heavy-tail split. Counts use a seeded
    phase accumulator, so each function's total stays within one invocation of
    rate x minutes and a shorter trace is a prefix of a longer one.
    """
    profile = TraceProfile(profile)
    rng = np.random.default_rng(seed)
    n = profile.num_functions
    total_rate = profile.requests_per_minute

    n_hot = max(1, round(HOT_FUNCTION_SHARE * n))
    order = rng.permutation(n)
    hot, cold = order[:n_hot], order[n_hot:]
    rates = np.zeros(n)
    rates[hot] = rng.dirichlet(np.ones(n_hot)) * total_rate * HOT_RATE_SHARE
    if cold.size:
        rates[cold] = rng.dirichlet(np.ones(cold.size)) * total_rate * (1 - HOT_RATE_SHARE)

    phases = rng.random(n)
    exec_times = rng.uniform(MIN_EXEC_TIME_S, MAX_EXEC_TIME_S, n)
    types = rng.integers(0, num_types, n)

    minutes = max(0, math.ceil(int(duration_s) / 60))
    edges = np.floor(np.outer(np.arange(minutes + 1), rates) + phases)
    counts = np.diff(edges, axis=0).astype(np.int64)

    functions = tuple(
        FunctionDef(f"fn-{i:04d}", int(types[i]), float(exec_times[i])) for i in range(n)
    )
    return FunctionTrace(functions, counts.reshape(minutes, n))


def _sample_times(duration_s: int, cadence_s: int) -> np.ndarray:
    n = max(1, math.ceil(duration_s / cadence_s))
    return np.arange(n, dtype=np.int64) * cadence_s


def _local_hours(t: np.ndarray, utc_offset_h: float) -> np.ndarray:
    return (t / 3600.0 + utc_offset_h) % 24.0


def gen_carbon_trace(
    avg: float,
    duration_s: int,
    seed: int,
    *,
    location_id: str = "location",
    amplitude: float = 0.25,
    noise: float = 0.10,
    peak_hour: float = 19.0,
    utc_offset_h: float = 0.0,
    cadence_s: int = CARBON_CADENCE_S,
) -> CarbonTrace:
    """
    Diurnal MOER curve around avg: a 24 h cosine peaking at peak_hour local time
    plus seeded zero-mean noise, sampled every cadence_s seconds.
    """
    if not avg > 0:
        raise ValueError(f"Average MOER must be > 0, got {avg}")

    t = _sample_times(duration_s, cadence_s)
    diurnal = amplitude * np.cos(2 * np.pi * (_local_hours(t, utc_offset_h) - peak_hour) / 24.0)

    rng = np.random.default_rng(seed)
    eps = rng.uniform(-noise, noise, t.size) if noise > 0 else np.zeros(t.size)
    if t.size > 1:
        eps = eps - eps.mean()

    values = np.clip(avg * (1.0 + diurnal + eps), 0.0, None)
    return CarbonTrace(location_id, t, values)


def gen_solar_trace(
    avg_gti: float,
    array_watts: float,
    duration_s: int,
    seed: int,
    *,
    location_id: str = "location",
    cloud_depth: float = 0.3,
    utc_offset_h: float = 0.0,
    cadence_s: int = SOLAR_CADENCE_S,
) -> SolarTrace:
    """
    Half-sine daylight between 06:00 and 18:00 local time with seeded cloud dips.
    The curve is generated over whole days and rescaled so its mean GTI equals avg_gti.
    """
    if avg_gti < 0:
        raise ValueError(f"Average GTI must be >= 0, got {avg_gti}")

    t = _sample_times(duration_s, cadence_s)
    days = max(1, math.ceil(t.size * cadence_s / SECONDS_PER_DAY))
    full_t = np.arange(days * SECONDS_PER_DAY // cadence_s, dtype=np.int64) * cadence_s

    hours = _local_hours(full_t, utc_offset_h)
    daylight = (hours >= 6.0) & (hours < 18.0)
    shape = np.where(daylight, np.sin(np.pi * (hours - 6.0) / 12.0), 0.0)

    rng = np.random.default_rng(seed)
    cloudiness = rng.random(days)
    day_index = (full_t // SECONDS_PER_DAY).astype(int)
    dips = cloud_depth * cloudiness[day_index] * rng.random(full_t.size) ** 2
    raw = shape * (1.0 - dips)

    if avg_gti == 0 or raw.sum() <= 0:
        gti = np.zeros(full_t.size)
    else:
        gti = raw * (avg_gti / raw.mean())
    return SolarTrace(location_id, t, gti[: t.size], array_watts)


def build_trace_bundle(
    locations: Sequence[LocationConfig],
    profile: TraceProfile | str,
    duration_s: int,
    seed: int,
    num_types: int = DEFAULT_NUM_TYPES,
) -> TraceBundle:
    t0 = time.perf_counter()
    functions = gen_function_trace(profile, duration_s, child_seed(seed, "functions"), num_types)
    carbon = {}
    solar = {}
    for i, loc in enumerate(locations):
        carbon[loc.location_id] = gen_carbon_trace(
            loc.avg_moer,
            duration_s,
            child_seed(seed, "carbon", i),
            location_id=loc.location_id,
            utc_offset_h=loc.utc_offset_h,
        )
        solar[loc.location_id] = gen_solar_trace(
            loc.avg_gti,
            loc.solar_array_w,
            duration_s,
            child_seed(seed, "solar", i),
            location_id=loc.location_id,
            utc_offset_h=loc.utc_offset_h,
        )
    logger.info(
        "Synthesized traces: profile=%s, locations=%s, invocations=%s, seconds=%.3f",
        TraceProfile(profile).value,
        len(locations),
        functions.total_invocations,
        time.perf_counter() - t0,
    )
    return TraceBundle(functions=functions, carbon=carbon, solar=solar)
