from __future__ import annotations

import heapq
import logging
import math
import time
from collections import defaultdict
from collections.abc import Callable, Iterable, Iterator, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import NamedTuple

import numpy as np
import pandas as pd

from src.core.balancer import (
    Balancer,
    BalancerPolicy,
    BalancerSettings,
    ControllerView,
    Outcome,
    RetryQueue,
)
from src.core.energy import (
    DEFAULT_BUFFER_FRACTION,
    DEFAULT_DISCHARGE_HORIZON_S,
    SECONDS_PER_HOUR,
    EnergyState,
    ProfileChannel,
    TraceEnergyProvider,
    battery_step,
    dynamic_power_per_container,
    hold_last_value,
    location_power,
    power_draw,
    scaled_emissions,
)
from src.core.hash_ring import hash_to_unit
from src.core.health import CRITICAL_FRACTION, crossed_below
from src.core.metrics import RunMetrics, with_baseline
from src.core.model import (
    DEFAULT_CONTAINERS,
    DEFAULT_NUM_TYPES,
    ContainerSlot,
    InvocationRequest,
    Mode,
    ServerState,
    validate_server,
)
from src.core.traces import LocationConfig, TraceBundle

logger = logging.getLogger(__name__)

SECONDS_PER_MINUTE = 60
MAX_SEED = 2**64
ARRIVAL_CHUNK_MINUTES = 60

# Booked and cancelled work leaves float residue in the running load.
LEDGER_EPS_WS = 1e-9

EVENT_COLUMNS = [
    "tick",
    "event",
    "server_id",
    "location_id",
    "function_id",
    "func_type",
    "start",
    "status",
    "retries",
    "latency_s",
    "energy_wh",
    "emissions_lbs",
]
BATTERY_LOG_COLUMNS = [
    "tick",
    "location_id",
    "battery_level_wh",
    "capacity_wh",
    "soc",
    "charged_wh",
    "discharged_wh",
    "solar_w",
    "load_w",
    "online",
]


class StartKind(str, Enum):
    COLD = "cold"
    WARM = "warm"
    NO_CAPACITY = "no-capacity"


class InvocationOutcome(NamedTuple):
    queue_delay: float
    start: StartKind
    exec_time: float


@dataclass(frozen=True)
class EnergySettings:
    buffer_fraction: float = DEFAULT_BUFFER_FRACTION
    max_discharge_w: float = 1000.0
    discharge_horizon_s: float = DEFAULT_DISCHARGE_HORIZON_S
    initial_soc: float = 1.0
    restart_fraction: float = 0.05
    critical_fraction: float = CRITICAL_FRACTION

    def __post_init__(self) -> None:
        if not 0.0 <= self.buffer_fraction < 1.0:
            raise ValueError(f"buffer_fraction must be in [0,1), got {self.buffer_fraction}")
        if not self.max_discharge_w > 0:
            raise ValueError(f"max_discharge_w must be > 0, got {self.max_discharge_w}")
        if not self.discharge_horizon_s > 0:
            raise ValueError(f"discharge_horizon_s must be > 0, got {self.discharge_horizon_s}")
        for name in ("initial_soc", "restart_fraction", "critical_fraction"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0,1], got {value}")


@dataclass(frozen=True)
class SimConfig:
    mode: Mode
    policy: BalancerPolicy
    seed: int
    duration: int
    servers: tuple[ServerState, ...]
    locations: tuple[LocationConfig, ...]
    tick: int = 1
    num_function_types: int = DEFAULT_NUM_TYPES
    containers_per_server: int = DEFAULT_CONTAINERS
    cold_start_penalty: float = 0.5
    warm_start_penalty: float = 0.005
    profile_delay: int = 0
    profile_period: int = 1
    retry_interval: int = 60
    stagger_arrivals: bool = True
    balancer: BalancerSettings = field(default_factory=BalancerSettings)
    energy: EnergySettings = field(default_factory=EnergySettings)

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "policy", BalancerPolicy(self.policy))
        object.__setattr__(self, "servers", tuple(self.servers))
        object.__setattr__(self, "locations", tuple(self.locations))

        if not 0 <= self.seed < MAX_SEED:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if self.tick <= 0 or SECONDS_PER_MINUTE % self.tick:
            raise ValueError(f"tick must divide 60 seconds, got {self.tick}")
        if self.duration <= 0 or self.duration % self.tick:
            raise ValueError(f"duration must be a positive multiple of tick, got {self.duration}")
        if self.profile_delay < 0:
            raise ValueError(f"profile_delay must be >= 0, got {self.profile_delay}")
        if self.profile_period <= 0 or self.profile_period % self.tick:
            raise ValueError(f"profile_period must be a positive multiple of tick, got {self.profile_period}")
        if self.retry_interval <= 0:
            raise ValueError(f"retry_interval must be > 0, got {self.retry_interval}")
        if self.cold_start_penalty < 0 or self.warm_start_penalty < 0:
            raise ValueError("Start penalties must be >= 0")
        if self.num_function_types < 1:
            raise ValueError(f"num_function_types must be >= 1, got {self.num_function_types}")
        if not self.servers:
            raise ValueError("At least one server is required")

        ids = [s.id for s in self.servers]
        if len(set(ids)) != len(ids):
            raise ValueError("Server ids must be unique")
        known = {loc.location_id for loc in self.locations}
        for s in self.servers:
            validate_server(s)
            if s.location_id not in known:
                raise ValueError(f"Server {s.id!r} references unknown location {s.location_id!r}")
            if len(s.containers) != self.containers_per_server:
                raise ValueError(
                    f"Server {s.id!r} has {len(s.containers)} containers, "
                    f"expected {self.containers_per_server}"
                )


@dataclass(frozen=True)
class SimulationResult:
    metrics: RunMetrics
    events: pd.DataFrame
    battery_log: pd.DataFrame | None = None


def place_in_container(
    server: ServerState, func_type: int, now: float, until: float | None = None
) -> StartKind:
    """
    Warm start on a free container already holding func_type, otherwise a cold start
    on a free container (untyped ones first) which switches to func_type.
    `until` marks the chosen container busy until that time.
    """
    if not server.online:
        raise ValueError(f"Server {server.id!r} is offline")

    first_free = untyped = None
    for c in server.containers:
        if not c.is_free(now):
            continue
        if c.current_type == func_type:
            if until is not None:
                c.busy_until = until
            return StartKind.WARM
        if first_free is None:
            first_free = c
        if untyped is None and c.current_type is None:
            untyped = c

    if first_free is None:
        return StartKind.NO_CAPACITY
    slot = untyped or first_free
    slot.current_type = func_type
    if until is not None:
        slot.busy_until = until
    return StartKind.COLD


def spread_arrivals(count: int, minute_index: int, offset: int = 0) -> list[int]:
    """Arrival seconds of `count` invocations spread evenly over one minute."""
    if count < 0:
        raise ValueError(f"count must be >= 0, got {count}")
    start = minute_index * SECONDS_PER_MINUTE
    return sorted(
        start + ((k * SECONDS_PER_MINUTE) // count + offset) % SECONDS_PER_MINUTE
        for k in range(count)
    )


def iter_arrivals(
    counts: np.ndarray,
    offsets: Sequence[int],
    duration: int,
    chunk_minutes: int = ARRIVAL_CHUNK_MINUTES,
) -> Iterator[tuple[int, int]]:
    """
    (arrival second, function index) of every invocation in a (minutes, functions)
    count matrix, ordered by time then function index. Each minute holds the
    spread_arrivals of its counts; arrivals at or past `duration` are dropped.
    """
    if chunk_minutes < 1:
        raise ValueError(f"chunk_minutes must be >= 1, got {chunk_minutes}")
    offsets = np.asarray(offsets, dtype=np.int64)
    minutes = min(counts.shape[0], math.ceil(duration / SECONDS_PER_MINUTE))
    for m0 in range(0, minutes, chunk_minutes):
        block = counts[m0 : min(m0 + chunk_minutes, minutes)]
        rows, cols = np.nonzero(block)
        if rows.size == 0:
            continue
        per = block[rows, cols].astype(np.int64)
        k = np.arange(int(per.sum()), dtype=np.int64) - np.repeat(np.cumsum(per) - per, per)
        fn = np.repeat(cols, per)
        count = np.repeat(per, per)
        sec = (m0 + np.repeat(rows, per)) * SECONDS_PER_MINUTE + (
            (k * SECONDS_PER_MINUTE) // count + offsets[fn]
        ) % SECONDS_PER_MINUTE
        order = np.lexsort((fn, sec))
        sec, fn = sec[order], fn[order]
        keep = sec < duration
        yield from zip(sec[keep].tolist(), fn[keep].tolist(), strict=True)


def latency_of(
    outcome: InvocationOutcome,
    cold_start_penalty: float = 0.5,
    warm_start_penalty: float = 0.005,
) -> float:
    if outcome.start is StartKind.NO_CAPACITY:
        raise ValueError("Latency is only defined for executed invocations")
    penalty = cold_start_penalty if outcome.start is StartKind.COLD else warm_start_penalty
    return outcome.queue_delay + penalty + outcome.exec_time


def arrival_offset(function_id: str) -> int:
    return math.floor(hash_to_unit(function_id).position * SECONDS_PER_MINUTE)


def tick_watt_seconds(
    loc: np.ndarray,
    start: np.ndarray,
    end: np.ndarray,
    watts: np.ndarray,
    n_locs: int,
    n_ticks: int,
    tick: int = 1,
) -> np.ndarray:
    """
    Watt-seconds per (location, tick) of constant-power intervals [start, end).
    Intervals must lie within [0, n_ticks * tick].
    """
    width = n_ticks + 2
    loc = np.asarray(loc, dtype=np.int64)
    start = np.asarray(start, dtype=float)
    end = np.asarray(end, dtype=float)
    watts = np.asarray(watts, dtype=float)
    busy = end > start
    loc, start, end, watts = loc[busy], start[busy], end[busy], watts[busy]

    i0 = (start // tick).astype(np.int64)
    i1 = (end // tick).astype(np.int64)
    size = n_locs * width
    # first partial tick and the ramp of full ticks, then the same cancelled from `end`
    part = np.bincount(loc * width + i0, watts * ((i0 + 1) * tick - start), size)
    part -= np.bincount(loc * width + i1, watts * ((i1 + 1) * tick - end), size)
    slope = np.bincount(loc * width + i0 + 1, watts * tick, size)
    slope -= np.bincount(loc * width + i1 + 1, watts * tick, size)

    part = part.reshape(n_locs, width)
    slope = slope.reshape(n_locs, width)
    ws = part[:, :n_ticks] + np.cumsum(slope, axis=1)[:, :n_ticks]
    ws[np.abs(ws) < LEDGER_EPS_WS] = 0.0
    return ws


def mean_intensity(
    moer: np.ndarray, tick: int, loc: np.ndarray, start: np.ndarray, end: np.ndarray
) -> np.ndarray:
    """
    Time-averaged per-tick MOER over each [start, end) at its location.
    Empty intervals get 0.
    """
    n_ticks = moer.shape[1]
    cum = np.zeros((moer.shape[0], n_ticks + 1))
    cum[:, 1:] = np.cumsum(moer * tick, axis=1)

    def integral(t: np.ndarray) -> np.ndarray:
        i = np.minimum((t // tick).astype(np.int64), n_ticks - 1)
        return cum[loc, i] + moer[loc, i] * (t - i * tick)

    span = end - start
    total = integral(end) - integral(start)
    return np.divide(total, span, out=np.zeros_like(span), where=span > 0)


@dataclass(slots=True)
class _InvocationLog:
    seq: list[int] = field(default_factory=list)
    tick: list[int] = field(default_factory=list)
    server: list[int] = field(default_factory=list)
    function: list[int] = field(default_factory=list)
    start: list[float] = field(default_factory=list)
    end: list[float] = field(default_factory=list)
    retries: list[int] = field(default_factory=list)
    latency: list[float] = field(default_factory=list)


class _Run:
    """State of one simulation run. Use simulate()."""

    def __init__(self, config: SimConfig, traces: TraceBundle, battery_log_interval: int):
        fn = traces.functions
        if fn is None:
            raise ValueError("A function trace is required")
        minutes = math.ceil(config.duration / SECONDS_PER_MINUTE)
        if fn.minutes < minutes:
            raise ValueError(
                f"Function trace covers {fn.minutes} minutes, the run needs {minutes}"
            )
        untyped = [f for f in fn.functions if f.func_type >= config.num_function_types]
        if untyped:
            f = untyped[0]
            raise ValueError(
                f"Function {f.id!r} has func_type {f.func_type}; the run defines "
                f"{config.num_function_types} types (0..{config.num_function_types - 1})"
            )
        if battery_log_interval < 0:
            raise ValueError(f"battery_log_interval must be >= 0, got {battery_log_interval}")

        self.cfg = config
        self.tick = config.tick
        self.n_ticks = config.duration // config.tick
        self.horizon = float(config.duration)
        self.isolated = config.mode is Mode.GRID_ISOLATED
        self.settings = config.balancer
        self.mem_cost = config.balancer.mem_per_invocation
        self.functions = fn.functions
        self.fn_index = {f.id: i for i, f in enumerate(self.functions)}
        self.battery_log_interval = battery_log_interval

        self.servers = [s.clone() for s in config.servers]
        self.server_index = {s.id: k for k, s in enumerate(self.servers)}
        groups: dict[str, list[ServerState]] = {}
        for s in self.servers:
            groups.setdefault(s.location_id, []).append(s)
        self.locations = [loc for loc in config.locations if loc.location_id in groups]
        self.loc_ids = [loc.location_id for loc in self.locations]
        self.loc_index = {lid: i for i, lid in enumerate(self.loc_ids)}
        self.loc_servers = [groups[lid] for lid in self.loc_ids]
        self.server_loc = [self.loc_index[s.location_id] for s in self.servers]
        self.watts = [dynamic_power_per_container(s) for s in self.servers]
        self.server_idle_w = [power_draw(s, 0.0) for s in self.servers]
        self.idle_w = [location_power(group, 0.0) for group in self.loc_servers]
        self.online = [True] * len(self.loc_ids)

        n_locs = len(self.loc_ids)
        self.moer = np.zeros((n_locs, self.n_ticks))
        self.solar = np.zeros((n_locs, self.n_ticks))
        self.batteries: list[EnergyState | None] = [None] * n_locs
        self._bind_traces(traces)

        # running function load per (location, tick), isolated mode only
        if self.isolated:
            self.part = np.zeros((n_locs, self.n_ticks + 2))
            self.slope = np.zeros((n_locs, self.n_ticks + 2))
            self.acc = np.zeros(n_locs)

        self.providers = [
            TraceEnergyProvider(
                lid,
                None if self.isolated else self.moer[i],
                self.solar[i] if self.isolated else None,
                self.batteries[i],
            )
            for i, lid in enumerate(self.loc_ids)
        ]
        self.publish_at: dict[int, list[int]] = defaultdict(list)
        if not self.isolated:
            for i in range(n_locs):
                changes = np.flatnonzero(np.diff(self.moer[i]) != 0) + 1
                for ti in [0, *changes.tolist()]:
                    self.publish_at[ti].append(i)
        self.publish_ticks = sorted(self.publish_at)
        self.publish_pos = 0

        self.channel = ProfileChannel(config.profile_delay)
        self.view = ControllerView(mode=config.mode)
        self.retry = RetryQueue(config.retry_interval, self.settings.max_retries)
        rng = np.random.default_rng(config.seed)
        self.balancer = Balancer(config.policy, self.servers, self.settings, rng)

        if config.stagger_arrivals:
            offsets = [arrival_offset(f.id) for f in self.functions]
        else:
            offsets = [0] * len(self.functions)
        self.arrivals = iter_arrivals(fn.counts, offsets, config.duration)
        self.next_arrival = next(self.arrivals, None)

        self.seq = 0
        self.inv = _InvocationLog()
        self.interrupted_at: dict[int, int] = {}
        self.rows: list[list] = []
        self.battery_rows: list[list] = []
        self.completions: list[tuple[float, int, ServerState]] = []
        self.offline_from: list[int | None] = [None] * n_locs
        self.offline_intervals: list[list[tuple[int, int]]] = [[] for _ in range(n_locs)]

        self.submitted = 0
        self.failed = 0
        self.retries = 0
        self.cold = 0
        self.warm = 0
        self.interrupted = 0
        self.shutdowns = 0
        self.restarts = 0
        self.critical = 0
        self.downtime = 0.0
        self.ticks_visited = 0

    def _bind_traces(self, traces: TraceBundle) -> None:
        energy = self.cfg.energy
        for i, loc in enumerate(self.locations):
            lid = loc.location_id
            if self.isolated:
                st = traces.solar.get(lid)
                if st is None:
                    raise ValueError(f"No solar trace for location {lid!r}")
                st = st.with_array(loc.solar_array_w)
                self.solar[i] = hold_last_value(st.timestamps, st.output_watts, self.n_ticks, self.tick)
                self.batteries[i] = EnergyState(
                    lid,
                    energy.initial_soc * loc.battery_wh,
                    loc.battery_wh,
                    energy.max_discharge_w,
                    energy.buffer_fraction,
                )
            else:
                ct = traces.carbon.get(lid)
                if ct is None:
                    raise ValueError(f"No carbon trace for location {lid!r}")
                self.moer[i] = hold_last_value(ct.timestamps, ct.values, self.n_ticks, self.tick)

    def execute(self) -> SimulationResult:
        t0 = time.perf_counter()
        cfg = self.cfg
        logger.info(
            "Run start: policy=%s, mode=%s, servers=%s, duration_s=%s, seed=%s",
            cfg.policy.value,
            cfg.mode.value,
            len(self.servers),
            cfg.duration,
            cfg.seed,
        )
        ti = 0
        while ti < self.n_ticks:
            t = ti * self.tick
            self.ticks_visited += 1
            self._release(t)
            if self.isolated:
                self.acc += self.slope[:, ti]
            self._profiles(ti, t)
            if self.retry:
                for req in self.retry.drain(t):
                    self._admit(self.fn_index[req.function.id], req.arrival, ti, t, req)
            self._admit_arrivals(ti, t)
            if self.isolated:
                self._step_energy(ti, t)
                ti += 1
            else:
                ti = self._next_tick(ti + 1)

        result = self._finish()
        m = result.metrics
        logger.info(
            "Run done: policy=%s, executed=%s, failed=%s, emissions_lbs=%.6f, ticks=%s/%s, seconds=%.3f",
            m.policy,
            m.executed,
            m.failed_invocations,
            m.total_emissions_lbs,
            self.ticks_visited,
            self.n_ticks,
            time.perf_counter() - t0,
        )
        return result

    def _next_tick(self, ti: int) -> int:
        """First tick at or after ti with an arrival, a due retry, a publish or a delivery."""
        tick = self.tick
        nxt = self.n_ticks
        if self.next_arrival is not None:
            nxt = min(nxt, self.next_arrival[0] // tick)
        due = self.retry.next_due()
        if due is not None:
            nxt = min(nxt, -(-due // tick))
        if self.publish_pos < len(self.publish_ticks):
            nxt = min(nxt, self.publish_ticks[self.publish_pos])
        deliver_at = self.channel.next_delivery()
        if deliver_at is not None:
            nxt = min(nxt, -(-deliver_at // tick))
        return max(ti, nxt)

    def _release(self, t: int) -> None:
        completions = self.completions
        cost = self.mem_cost
        while completions and completions[0][0] <= t:
            heapq.heappop(completions)[2].mem_used -= cost

    def _tick_ws(self, ti: int) -> np.ndarray:
        ws = self.part[:, ti] + self.acc
        ws[np.abs(ws) < LEDGER_EPS_WS] = 0.0
        return ws

    def _book(self, li: int, start: float, end: float, watts: float) -> None:
        """Add `watts` over [start, end) to the running load ledger."""
        if end <= start:
            return
        tick = self.tick
        i0 = int(start // tick)
        self.part[li, i0] += watts * ((i0 + 1) * tick - start)
        self.slope[li, i0 + 1] += watts * tick
        i1 = int(end // tick)
        self.part[li, i1] -= watts * ((i1 + 1) * tick - end)
        self.slope[li, i1 + 1] -= watts * tick

    def _profiles(self, ti: int, t: int) -> None:
        delay = self.cfg.profile_delay
        if self.isolated:
            if t % self.cfg.profile_period == 0:
                load_w = self._tick_ws(ti) / self.tick
                for i, provider in enumerate(self.providers):
                    self.channel.publish(
                        provider.profile(ti, t, delay, float(load_w[i]), grid=False)
                    )
        else:
            ticks = self.publish_ticks
            while self.publish_pos < len(ticks) and ticks[self.publish_pos] <= ti:
                pt = ticks[self.publish_pos]
                for i in self.publish_at[pt]:
                    self.channel.publish(
                        self.providers[i].profile(pt, pt * self.tick, delay, 0.0, grid=True)
                    )
                self.publish_pos += 1

        if self.channel.deliver(t):
            energy = self.cfg.energy
            changed = self.view.refresh(
                self.channel.snapshots(),
                buffer_fraction=energy.buffer_fraction,
                horizon_s=energy.discharge_horizon_s,
            )
            if changed:
                self.view.version += 1
            self.view.reset_pending()

    def _admit_arrivals(self, ti: int, t: int) -> None:
        horizon = t + self.tick
        nxt = self.next_arrival
        while nxt is not None and nxt[0] < horizon:
            arrival, fi = nxt
            request_id = self.submitted
            self.submitted += 1
            self._admit(fi, arrival, ti, max(arrival, t), request_id=request_id)
            nxt = next(self.arrivals, None)
        self.next_arrival = nxt

    def _admit(
        self,
        fi: int,
        arrival: int,
        ti: int,
        start: float,
        request: InvocationRequest | None = None,
        request_id: int = 0,
    ) -> None:
        retry_count = request.retry_count if request is not None else 0
        fn = self.functions[fi]
        sel = self.balancer.choose(fn.id, retry_count, self.view)
        outcome = sel.outcome
        if outcome is Outcome.ASSIGNED:
            if self._start(fi, arrival, retry_count, sel.server, ti, start):
                return
            outcome = (
                Outcome.ENQUEUED if retry_count < self.settings.max_retries else Outcome.FAILED
            )

        if outcome is Outcome.ENQUEUED:
            if request is None:
                request = InvocationRequest(fn, arrival, request_id=request_id)
            self.retry.add(request, ti * self.tick)
            self.retries += 1
            return

        self.failed += 1
        self._event(
            ti * self.tick, "failed", None, None, fn.id, fn.func_type, None, "failed",
            retry_count, None, 0.0, 0.0,
        )

    def _start(
        self, fi: int, arrival: int, retry_count: int, server: ServerState, ti: int, start: float
    ) -> bool:
        fn = self.functions[fi]
        end = start + fn.mean_exec_time
        kind = place_in_container(server, fn.func_type, start, until=end)
        if kind is StartKind.NO_CAPACITY:
            return False

        server.mem_used += self.mem_cost
        k = self.server_index[server.id]
        if self.isolated:
            watts = self.watts[k]
            self.view.commit(server.location_id, watts)
            self._book(self.server_loc[k], start, min(end, self.horizon), watts)
        if kind is StartKind.COLD:
            self.cold += 1
        else:
            self.warm += 1

        inv = self.inv
        idx = len(inv.start)
        inv.seq.append(self.seq)
        self.seq += 1
        inv.tick.append(ti * self.tick)
        inv.server.append(k)
        inv.function.append(fi)
        inv.start.append(start)
        inv.end.append(end)
        inv.retries.append(retry_count)
        inv.latency.append(
            latency_of(
                InvocationOutcome(start - arrival, kind, fn.mean_exec_time),
                self.cfg.cold_start_penalty,
                self.cfg.warm_start_penalty,
            )
        )
        heapq.heappush(self.completions, (end, idx, server))
        return True

    def _event(self, *values) -> None:
        self.rows.append([self.seq, *values])
        self.seq += 1

    def _step_energy(self, ti: int, t: int) -> None:
        energy = self.cfg.energy
        load_w = self._tick_ws(ti) / self.tick
        for li, state in enumerate(self.batteries):
            online = self.online[li]
            load = location_power(self.loc_servers[li], float(load_w[li]))
            solar = float(self.solar[li, ti])
            new_state, short = battery_step(state, solar, load, self.tick)
            if crossed_below(
                state.battery_level,
                new_state.battery_level,
                state.battery_capacity,
                energy.critical_fraction,
            ):
                self.critical += 1
            self.batteries[li] = new_state
            self.providers[li].state = new_state

            if online and short:
                self._shutdown(li, t + self.tick)
            elif not online and new_state.battery_level >= (
                energy.restart_fraction * new_state.battery_capacity
            ):
                self._restart(li, t + self.tick)

            if self.battery_log_interval and ti % self.battery_log_interval == 0:
                self.battery_rows.append(
                    [t, self.loc_ids[li], new_state.battery_level, new_state.battery_capacity,
                     new_state.soc, new_state.charged_wh, new_state.discharged_wh, solar, load,
                     self.online[li]]
                )

    def _shutdown(self, li: int, at: int) -> None:
        """Take a location offline from `at`; running work there is interrupted."""
        lid = self.loc_ids[li]
        live = []
        for entry in self.completions:
            end, idx, server = entry
            if server.location_id != lid:
                live.append(entry)
            elif end > at:
                self.interrupted_at[idx] = at
                self._book(li, at, min(end, self.horizon), -self.watts[self.server_index[server.id]])
                self.interrupted += 1
        heapq.heapify(live)
        self.completions = live

        self.online[li] = False
        self.offline_from[li] = at // self.tick
        for s in self.loc_servers[li]:
            s.online = False
            s.mem_used = 0
            s.containers = [ContainerSlot() for _ in s.containers]
            self._event(at, "shutdown", s.id, lid, None, None, None, None, None, None, 0.0, 0.0)
        self.shutdowns += len(self.loc_servers[li])
        logger.debug("Shutdown: location=%s, t=%s", lid, at)

    def _restart(self, li: int, at: int) -> None:
        self.online[li] = True
        self.offline_intervals[li].append((self.offline_from[li], at // self.tick))
        self.offline_from[li] = None
        for s in self.loc_servers[li]:
            s.online = True
            self._event(at, "restart", s.id, s.location_id, None, None, None, None, None, None, 0.0, 0.0)
        self.restarts += len(self.loc_servers[li])
        logger.debug("Restart: location=%s, t=%s", self.loc_ids[li], at)

    def _hour_starts(self) -> np.ndarray:
        return np.arange(0, self.n_ticks, int(SECONDS_PER_HOUR) // self.tick)

    def _idle_accounting(self) -> np.ndarray:
        """Append per-server per-hour idle rows and return the hourly idle emissions."""
        tick = self.tick
        hour_starts = self._hour_starts()
        hourly = np.zeros(hour_starts.size)
        downtime = 0.0

        for li, lid in enumerate(self.loc_ids):
            if self.offline_from[li] is not None:
                self.offline_intervals[li].append((self.offline_from[li], self.n_ticks))
                self.offline_from[li] = None
            online_s = np.full(self.n_ticks, float(tick))
            for lo, hi in self.offline_intervals[li]:
                online_s[lo:hi] = 0.0
                downtime += (hi - lo) * tick * len(self.loc_servers[li])

            online_h = np.add.reduceat(online_s, hour_starts)
            # lbs per idle watt, by hour
            per_watt_h = np.add.reduceat(
                scaled_emissions(online_s / SECONDS_PER_HOUR, self.moer[li]), hour_starts
            )
            for s in self.loc_servers[li]:
                idle_w = self.server_idle_w[self.server_index[s.id]]
                for h in range(hour_starts.size):
                    hour_t = int(hour_starts[h]) * tick
                    self._event(
                        hour_t, "idle", s.id, lid, None, None, float(hour_t), None, None, None,
                        idle_w * online_h[h] / SECONDS_PER_HOUR, idle_w * per_watt_h[h],
                    )
            hourly += self.idle_w[li] * per_watt_h

        self.downtime = downtime
        return hourly

    def _invocation_frame(self) -> tuple[pd.DataFrame, np.ndarray, np.ndarray]:
        """
        Invocation events with energy and emissions over each one's effective run
        [start, min(end, interruption, horizon)), the hourly function emissions and
        the latencies of completed invocations.
        """
        inv = self.inv
        server = np.asarray(inv.server, dtype=np.int64)
        fn = np.asarray(inv.function, dtype=np.int64)
        start = np.asarray(inv.start, dtype=float)
        end = np.minimum(np.asarray(inv.end, dtype=float), self.horizon)
        latency = np.asarray(inv.latency, dtype=float)
        status = np.full(start.size, "completed", dtype=object)
        if self.interrupted_at:
            idx = np.fromiter(self.interrupted_at.keys(), dtype=np.int64)
            at = np.fromiter(self.interrupted_at.values(), dtype=float)
            end[idx] = np.minimum(end[idx], at)
            status[idx] = "interrupted"
            latency[idx] = np.nan
        end = np.maximum(end, start)

        loc = np.asarray(self.server_loc, dtype=np.int64)[server]
        watts = np.asarray(self.watts, dtype=float)[server]
        energy_wh = watts * (end - start) / SECONDS_PER_HOUR
        emissions = scaled_emissions(energy_wh, mean_intensity(self.moer, self.tick, loc, start, end))

        ws = tick_watt_seconds(loc, start, end, watts, len(self.loc_ids), self.n_ticks, self.tick)
        hourly = np.add.reduceat(
            scaled_emissions(ws / SECONDS_PER_HOUR, self.moer), self._hour_starts(), axis=1
        ).sum(axis=0)

        server_ids = np.array([s.id for s in self.servers], dtype=object)
        server_locs = np.array([s.location_id for s in self.servers], dtype=object)
        fn_ids = np.array([f.id for f in self.functions], dtype=object)
        fn_types = np.array([f.func_type for f in self.functions], dtype=np.int64)
        frame = pd.DataFrame(
            {
                "seq": np.asarray(inv.seq, dtype=np.int64),
                "tick": np.asarray(inv.tick, dtype=np.int64),
                "event": "invocation",
                "server_id": server_ids[server],
                "location_id": server_locs[server],
                "function_id": fn_ids[fn],
                "func_type": fn_types[fn],
                "start": start,
                "status": status,
                "retries": np.asarray(inv.retries, dtype=np.int64),
                "latency_s": latency,
                "energy_wh": energy_wh,
                "emissions_lbs": emissions,
            }
        )
        return frame, hourly, latency[status == "completed"]

    def _finish(self) -> SimulationResult:
        invocations, function_hourly, completed = self._invocation_frame()
        hourly = self._idle_accounting() + function_hourly

        others = pd.DataFrame(self.rows, columns=["seq", *EVENT_COLUMNS])
        frames = [f for f in (invocations, others) if not f.empty]
        events = (
            pd.concat(frames, ignore_index=True)
            .sort_values("seq", kind="stable")
            .drop(columns="seq")
            .reset_index(drop=True)
        )
        for col in ("func_type", "retries"):
            events[col] = events[col].astype("Int64")
        for col in ("start", "latency_s", "energy_wh", "emissions_lbs"):
            events[col] = events[col].astype(float)

        if completed.size:
            p50, p95, p99 = np.percentile(completed, [50, 95, 99]).tolist()
            mean = float(completed.mean())
        else:
            p50 = p95 = p99 = mean = 0.0

        cfg = self.cfg
        metrics = RunMetrics(
            policy=cfg.policy.value,
            mode=cfg.mode.value,
            seed=cfg.seed,
            duration_s=cfg.duration,
            num_servers=len(self.servers),
            submitted=self.submitted,
            executed=self.cold + self.warm,
            failed_invocations=self.failed,
            queued_at_end=len(self.retry),
            interrupted_invocations=self.interrupted,
            retries=self.retries,
            cold_starts=self.cold,
            warm_starts=self.warm,
            total_energy_wh=math.fsum(events["energy_wh"].tolist()),
            total_emissions_lbs=math.fsum(events["emissions_lbs"].tolist()),
            hourly_emissions_lbs=tuple(hourly.tolist()),
            downtime_s=self.downtime,
            shutdown_count=self.shutdowns,
            restart_count=self.restarts,
            critical_battery_events=self.critical,
            latency_mean_s=mean,
            latency_p50_s=p50,
            latency_p95_s=p95,
            latency_p99_s=p99,
        )

        battery_log = None
        if self.isolated and self.battery_log_interval:
            battery_log = pd.DataFrame(self.battery_rows, columns=BATTERY_LOG_COLUMNS)
        return SimulationResult(metrics, events, battery_log)


def simulate(
    config: SimConfig, traces: TraceBundle, *, battery_log_interval: int = 0
) -> SimulationResult:
    """
    Replay the function trace against the configured servers.
    battery_log_interval > 0 records battery state every that many ticks (grid-isolated).
    """
    return _Run(config, traces, battery_log_interval).execute()


def run(config: SimConfig, traces: TraceBundle) -> RunMetrics:
    return simulate(config, traces).metrics


ResultSink = Callable[[BalancerPolicy, SimulationResult], None]


def _run_one(
    config: SimConfig, traces: TraceBundle, sink: ResultSink | None, battery_log_interval: int
) -> RunMetrics:
    result = simulate(config, traces, battery_log_interval=battery_log_interval)
    if sink is not None:
        sink(config.policy, result)
    return result.metrics


def run_sweep(
    config: SimConfig,
    traces: TraceBundle,
    policies: Iterable[BalancerPolicy | str],
    *,
    jobs: int = 1,
    sink: ResultSink | None = None,
    battery_log_interval: int = 0,
) -> dict[BalancerPolicy, RunMetrics]:
    """
    Run each policy on the same traces and seed, plus the OpenWhisk baseline, and
    attach the baseline to every result. `sink` receives each requested policy's
    full result inside the worker; it must be picklable when jobs > 1.
    """
    requested = list(dict.fromkeys(BalancerPolicy(p) for p in policies))
    if not requested:
        raise ValueError("At least one policy is required")

    order = [BalancerPolicy.OPENWHISK] + [
        p for p in requested if p is not BalancerPolicy.OPENWHISK
    ]
    tasks: list[tuple[SimConfig, TraceBundle, ResultSink | None, int]] = [
        (replace(config, policy=p), traces, sink if p in requested else None, battery_log_interval)
        for p in order
    ]

    t0 = time.perf_counter()
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
            results = list(pool.map(_run_one, *zip(*tasks, strict=True)))
    else:
        results = [_run_one(*task) for task in tasks]
    logger.info(
        "Sweep done: policies=%s, jobs=%s, seconds=%.3f",
        ",".join(p.value for p in order),
        jobs,
        time.perf_counter() - t0,
    )

    by_policy = dict(zip(order, results, strict=True))
    baseline = by_policy[BalancerPolicy.OPENWHISK]
    return {p: with_baseline(by_policy[p], baseline) for p in requested}
