from __future__ import annotations

import heapq
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import NamedTuple

import numpy as np

from src.core.energy import (
    DEFAULT_BUFFER_FRACTION,
    DEFAULT_DISCHARGE_HORIZON_S,
    EnergyProfileMsg,
    avail_from_profile,
    dynamic_power_per_container,
)
from src.core.hash_ring import RingPoint, clockwise_order, ring_key, sort_servers
from src.core.model import InvocationRequest, Mode, ServerState

# A zero MOER sample counts as the cleanest grid the weights can express.
MIN_CARBON_INTENSITY = 1e-6


class BalancerPolicy(str, Enum):
    CARBON_AWARE = "carbon-aware"
    OPENWHISK = "openwhisk"
    CONSISTENT_HASHING = "consistent-hashing"
    GREEDY = "greedy"

    @property
    def energy_aware(self) -> bool:
        return self in (BalancerPolicy.CARBON_AWARE, BalancerPolicy.GREEDY)


class Outcome(str, Enum):
    ASSIGNED = "assigned"
    ENQUEUED = "enqueued"
    FAILED = "failed"


class Selection(NamedTuple):
    outcome: Outcome
    server: ServerState | None = None


_ENQUEUED = Selection(Outcome.ENQUEUED)
_FAILED = Selection(Outcome.FAILED)


@dataclass(frozen=True)
class BalancerSettings:
    max_retries: int = 3
    mem_per_invocation: int = 1
    retry_on_high_carbon: bool = False
    carbon_threshold: float = 1200.0


@dataclass
class ControllerView:
    """
    What the controller believes about each location.
    carbon: lbs/MWh per location (grid-connected)
    avail: avail_energy watts per location (grid-isolated)
    pending_w: power estimate of assignments made since the last reset
    """

    mode: Mode
    carbon: dict[str, float] = field(default_factory=dict)
    avail: dict[str, float] = field(default_factory=dict)
    pending_w: dict[str, float] = field(default_factory=dict)
    version: int = 0

    @classmethod
    def from_snapshots(
        cls,
        mode: Mode,
        snapshots: Mapping[str, EnergyProfileMsg],
        *,
        buffer_fraction: float = DEFAULT_BUFFER_FRACTION,
        horizon_s: float = DEFAULT_DISCHARGE_HORIZON_S,
        version: int = 0,
    ) -> ControllerView:
        view = cls(mode=mode, version=version)
        view.refresh(snapshots, buffer_fraction=buffer_fraction, horizon_s=horizon_s)
        return view

    def refresh(
        self,
        snapshots: Mapping[str, EnergyProfileMsg],
        *,
        buffer_fraction: float = DEFAULT_BUFFER_FRACTION,
        horizon_s: float = DEFAULT_DISCHARGE_HORIZON_S,
    ) -> bool:
        """Rebuild the view from delivered snapshots. Returns whether any value changed."""
        if self.mode is Mode.GRID_CONNECTED:
            carbon = {
                loc: max(float(msg.carbon_intensity or 0.0), MIN_CARBON_INTENSITY)
                for loc, msg in snapshots.items()
            }
            changed = carbon != self.carbon
            self.carbon = carbon
        else:
            avail = {
                loc: avail_from_profile(msg, buffer_fraction, horizon_s)
                for loc, msg in snapshots.items()
            }
            changed = avail != self.avail
            self.avail = avail
        return changed

    def known(self, location_id: str) -> bool:
        if self.mode is Mode.GRID_CONNECTED:
            return location_id in self.carbon
        return location_id in self.avail

    def headroom(self, location_id: str) -> float:
        return self.avail[location_id] - self.pending_w.get(location_id, 0.0)

    def commit(self, location_id: str, watts: float) -> None:
        self.pending_w[location_id] = self.pending_w.get(location_id, 0.0) + watts

    def reset_pending(self) -> None:
        self.pending_w.clear()


def isolated_weights(
    servers: Sequence[ServerState], avail: Mapping[str, float]
) -> dict[str, float]:
    """
    Clamp each location's avail_energy at 0 and normalize over the servers.
    All-zero input gives all-zero weights.
    """
    clamped = {s.id: max(0.0, avail[s.location_id]) for s in servers if s.location_id in avail}
    total = sum(clamped.values())
    if total <= 0:
        return {sid: 0.0 for sid in clamped}
    return {sid: v / total for sid, v in clamped.items()}


def grid_weights(servers: Sequence[ServerState], carbon: Mapping[str, float]) -> dict[str, float]:
    """Inverse-normalized carbon intensity: cleaner grids weigh more."""
    inverse: dict[str, float] = {}
    for s in servers:
        ci = carbon[s.location_id]
        if not ci > 0:
            raise ValueError(f"Carbon intensity must be > 0 at {s.location_id!r}, got {ci}")
        inverse[s.id] = 1.0 / ci
    total = sum(inverse.values())
    return {sid: v / total for sid, v in inverse.items()}


def weight_grid_isolated(
    server: ServerState, servers: Sequence[ServerState], avail: Mapping[str, float]
) -> float:
    return isolated_weights(servers, avail).get(server.id, 0.0)


def weight_grid_conn(
    server: ServerState, servers: Sequence[ServerState], carbon: Mapping[str, float]
) -> float:
    return grid_weights(servers, carbon)[server.id]


def candidate_weights(
    servers: Sequence[ServerState], view: ControllerView
) -> list[tuple[ServerState, float]]:
    """Servers at known locations that carry a positive weight, paired with it."""
    known = [s for s in servers if view.known(s.location_id)]
    if not known:
        return []
    if view.mode is Mode.GRID_CONNECTED:
        weights = grid_weights(known, view.carbon)
    else:
        weights = isolated_weights(known, view.avail)
    return [(s, weights[s.id]) for s in known if weights[s.id] > 0]


def ordered_candidates(
    policy: BalancerPolicy,
    servers: Sequence[ServerState],
    function: RingPoint | float,
    view: ControllerView,
    weighted: Sequence[tuple[ServerState, float]] | None = None,
) -> list[ServerState]:
    """
    Servers in the order the policy tries them.
    `weighted` may pass candidate_weights already computed for this view.
    """
    if policy in (BalancerPolicy.OPENWHISK, BalancerPolicy.CONSISTENT_HASHING):
        return clockwise_order(servers, function) if servers else []

    if policy is BalancerPolicy.GREEDY:
        known = [s for s in servers if view.known(s.location_id)]
        if view.mode is Mode.GRID_CONNECTED:
            return sorted(known, key=lambda s: (view.carbon[s.location_id], s.id))
        return sorted(known, key=lambda s: (-max(0.0, view.avail[s.location_id]), s.id))

    if weighted is None:
        weighted = candidate_weights(servers, view)
    if not weighted:
        return []
    return sort_servers(weighted, function)


def request_power(server: ServerState) -> float:
    return dynamic_power_per_container(server)


def is_feasible(
    policy: BalancerPolicy,
    server: ServerState,
    view: ControllerView,
    settings: BalancerSettings,
) -> bool:
    if not server.online:
        return False
    if server.mem_used + settings.mem_per_invocation > server.mem_limit:
        return False
    if policy.energy_aware:
        if not view.known(server.location_id):
            return False
        if view.mode is Mode.GRID_ISOLATED and view.headroom(server.location_id) < request_power(
            server
        ):
            return False
    return True


def _exhausted(retry_count: int, settings: BalancerSettings) -> Selection:
    return _FAILED if retry_count >= settings.max_retries else _ENQUEUED


def resolve(
    policy: BalancerPolicy,
    order: Sequence[ServerState],
    servers: Sequence[ServerState],
    retry_count: int,
    view: ControllerView,
    settings: BalancerSettings,
    rng: np.random.Generator | None = None,
) -> Selection:
    """Walk a precomputed candidate order and apply the policy's feasibility rules."""
    if policy is BalancerPolicy.OPENWHISK:
        if not order:
            return _exhausted(retry_count, settings)
        home = order[0]
        if is_feasible(policy, home, view, settings):
            return Selection(Outcome.ASSIGNED, home)
        others = [s for s in servers if s is not home and is_feasible(policy, s, view, settings)]
        if not others:
            return _exhausted(retry_count, settings)
        if rng is None:
            raise ValueError("OpenWhisk redirect needs the run's seeded generator")
        return Selection(Outcome.ASSIGNED, others[int(rng.integers(len(others)))])

    for s in order:
        if not is_feasible(policy, s, view, settings):
            continue
        if (
            policy is BalancerPolicy.CARBON_AWARE
            and view.mode is Mode.GRID_CONNECTED
            and settings.retry_on_high_carbon
            and view.carbon[s.location_id] > settings.carbon_threshold
            and retry_count < settings.max_retries
        ):
            return _ENQUEUED
        return Selection(Outcome.ASSIGNED, s)
    return _exhausted(retry_count, settings)


def select_server(
    policy: BalancerPolicy,
    servers: Sequence[ServerState],
    request: InvocationRequest,
    mode: Mode,
    view: ControllerView,
    *,
    settings: BalancerSettings | None = None,
    rng: np.random.Generator | None = None,
) -> Selection:
    if view.mode is not mode:
        raise ValueError(f"Controller view is for {view.mode.value}, run mode is {mode.value}")
    settings = settings or BalancerSettings()
    order = ordered_candidates(policy, servers, ring_key(request.function.id), view)
    return resolve(policy, order, servers, request.retry_count, view, settings, rng)


class Balancer:
    """
    select_server for one run. Ring points are computed once. Weights are computed
    once per controller view version and each function's candidate order is reused
    until the version changes; OpenWhisk and consistent-hashing orders never change.
    """

    def __init__(
        self,
        policy: BalancerPolicy,
        servers: Sequence[ServerState],
        settings: BalancerSettings,
        rng: np.random.Generator | None = None,
    ):
        self.policy = policy
        self.servers = list(servers)
        self.settings = settings
        self.rng = rng
        self._points: dict[str, float] = {}
        self._orders: dict[str, list[ServerState]] = {}
        self._weighted: list[tuple[ServerState, float]] | None = None
        self._version: int | None = None
        self.rebuilds = 0

    def _point(self, function_id: str) -> float:
        p = self._points.get(function_id)
        if p is None:
            p = ring_key(function_id).position
            self._points[function_id] = p
        return p

    def choose(self, function_id: str, retry_count: int, view: ControllerView) -> Selection:
        policy = self.policy
        if policy.energy_aware and view.version != self._version:
            self._orders.clear()
            self._version = view.version
            self._weighted = None
            if policy is BalancerPolicy.CARBON_AWARE:
                self._weighted = candidate_weights(self.servers, view)

        # greedy ignores the ring position
        key = "" if policy is BalancerPolicy.GREEDY else function_id
        order = self._orders.get(key)
        if order is None:
            order = ordered_candidates(
                policy, self.servers, self._point(function_id), view, self._weighted
            )
            self._orders[key] = order
            self.rebuilds += 1
        return resolve(policy, order, self.servers, retry_count, view, self.settings, self.rng)

    def select(self, request: InvocationRequest, view: ControllerView) -> Selection:
        return self.choose(request.function.id, request.retry_count, view)


class RetryQueue:
    """
    Controller-side queue of deferred invocations.
    Entries become due retry_interval seconds after their latest enqueue and leave
    oldest-first by first enqueue time.
    """

    def __init__(self, retry_interval: int = 60, max_retries: int = 3):
        if retry_interval <= 0:
            raise ValueError(f"retry_interval must be > 0, got {retry_interval}")
        if max_retries < 0:
            raise ValueError(f"max_retries must be >= 0, got {max_retries}")
        self.retry_interval = retry_interval
        self.max_retries = max_retries
        self._heap: list[tuple[int, int, int, InvocationRequest]] = []

    def __len__(self) -> int:
        return len(self._heap)

    def add(self, request: InvocationRequest, now: int) -> InvocationRequest:
        if request.retry_count >= self.max_retries:
            raise ValueError(
                f"Request {request.request_id} already retried {request.retry_count} times"
            )
        first = request.first_enqueued if request.first_enqueued is not None else now
        queued = replace(request, retry_count=request.retry_count + 1, first_enqueued=first)
        heapq.heappush(self._heap, (now + self.retry_interval, first, queued.request_id, queued))
        return queued

    def next_due(self) -> int | None:
        """Time the earliest entry becomes due, None when empty."""
        return self._heap[0][0] if self._heap else None

    def drain(self, now: int) -> list[InvocationRequest]:
        due: list[tuple[int, int, int, InvocationRequest]] = []
        while self._heap and self._heap[0][0] <= now:
            due.append(heapq.heappop(self._heap))
        due.sort(key=lambda e: (e[1], e[2]))
        return [e[3] for e in due]


def drain_retry_queue(queue: RetryQueue, now: int) -> list[InvocationRequest]:
    return queue.drain(now)
