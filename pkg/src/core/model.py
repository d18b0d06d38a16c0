from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import NewType

SimTick = NewType("SimTick", int)

DEFAULT_CONTAINERS = 3
DEFAULT_NUM_TYPES = 5


class Mode(str, Enum):
    GRID_CONNECTED = "grid"
    GRID_ISOLATED = "isolated"


class ServerValidationError(ValueError):
    def __init__(self, server_id: str, violations: list[str]):
        self.server_id = server_id
        self.violations = violations
        super().__init__(f"Invalid server {server_id!r}: {'; '.join(violations)}")


@dataclass(frozen=True)
class FunctionDef:
    id: str
    func_type: int
    mean_exec_time: float

    def __post_init__(self) -> None:
        if self.func_type < 0:
            raise ValueError(f"func_type must be >= 0, got {self.func_type} for {self.id!r}")
        if self.mean_exec_time <= 0:
            raise ValueError(
                f"mean_exec_time must be > 0, got {self.mean_exec_time} for {self.id!r}"
            )


@dataclass(frozen=True)
class InvocationRequest:
    function: FunctionDef
    arrival: int
    retry_count: int = 0
    first_enqueued: int | None = None
    request_id: int = 0


@dataclass(slots=True)
class ContainerSlot:
    current_type: int | None = None
    busy_until: float | None = None

    def is_free(self, now: float) -> bool:
        return self.busy_until is None or self.busy_until <= now


def make_containers(n: int = DEFAULT_CONTAINERS) -> list[ContainerSlot]:
    return [ContainerSlot() for _ in range(n)]


@dataclass(slots=True)
class ServerState:
    id: str
    location_id: str
    ring_position: float
    p_idle: float
    p_peak: float
    mem_limit: int = DEFAULT_CONTAINERS
    mem_used: int = 0
    containers: list[ContainerSlot] = field(default_factory=make_containers)
    online: bool = True

    def clone(self) -> ServerState:
        """Fresh copy with its own container list."""
        return ServerState(
            id=self.id,
            location_id=self.location_id,
            ring_position=self.ring_position,
            p_idle=self.p_idle,
            p_peak=self.p_peak,
            mem_limit=self.mem_limit,
            mem_used=self.mem_used,
            containers=[ContainerSlot(c.current_type, c.busy_until) for c in self.containers],
            online=self.online,
        )


def server_violations(s: ServerState) -> list[str]:
    violations: list[str] = []
    if not 0.0 <= s.ring_position < 1.0:
        violations.append("ring_position out of [0,1)")
    if s.mem_used < 0:
        violations.append("mem_used negative")
    if s.mem_used > s.mem_limit:
        violations.append("memory overcommit")
    if s.p_idle <= 0:
        violations.append("p_idle must be > 0")
    if s.p_idle > s.p_peak:
        violations.append("p_idle exceeds p_peak")
    if not s.containers:
        violations.append("no containers")
    return violations


def validate_server(s: ServerState) -> None:
    """
    Fail-fast check of every ServerState invariant.
    Raises ServerValidationError listing all violations at once.
    """
    violations = server_violations(s)
    if violations:
        raise ServerValidationError(s.id, violations)
