from __future__ import annotations

import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass

from src.core.model import ServerState

FNV64_OFFSET_BASIS = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

# FNV-1a places ids differing only in their last bytes next to each other on the circle.
RING_KEY_SUFFIX = "#ring"


@dataclass(frozen=True)
class RingPoint:
    position: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.position < 1.0:
            raise ValueError(f"Ring position out of [0,1): {self.position}")


def fnv1a_64(data: bytes) -> int:
    h = FNV64_OFFSET_BASIS
    for b in data:
        h ^= b
        h = (h * FNV64_PRIME) & _MASK64
    return h


def hash_to_unit(key: bytes | str) -> RingPoint:
    """
    FNV-1a 64 digest scaled to [0,1).
    The low 11 bits are dropped so the float division can never round up to 1.0.
    """
    data = key.encode("utf-8") if isinstance(key, str) else key
    return RingPoint((fnv1a_64(data) >> 11) / float(1 << 53))


def ring_key(identifier: str) -> RingPoint:
    return hash_to_unit(f"{identifier}{RING_KEY_SUFFIX}")


def _pos(p: RingPoint | float) -> float:
    return p.position if isinstance(p, RingPoint) else float(p)


def distance(server: RingPoint | float, function: RingPoint | float) -> float:
    """-ln((1 - (server - function)) mod 1), with 0 at equal positions."""
    v = (1.0 - (_pos(server) - _pos(function))) % 1.0
    if v == 0.0:
        return 0.0
    return -math.log(v)


def sort_key(server: ServerState, weight: float, function: RingPoint | float) -> float:
    return distance(server.ring_position, function) / weight


def sort_servers(
    servers: Sequence[tuple[ServerState, float]], function: RingPoint | float
) -> list[ServerState]:
    """
    Order servers by distance / weight ascending, ties by id.
    """
    if not servers:
        raise ValueError("sort_servers needs at least one server")
    for s, w in servers:
        if not w > 0:
            raise ValueError(f"Weight must be > 0 for server {s.id!r}, got {w}")

    keyed = [(sort_key(s, w, function), s.id, s) for s, w in servers]
    keyed.sort(key=lambda t: (t[0], t[1]))
    return [s for _, _, s in keyed]


def clockwise_order(servers: Iterable[ServerState], function: RingPoint | float) -> list[ServerState]:
    """Unweighted clockwise walk starting from the function's position."""
    return sort_servers([(s, 1.0) for s in servers], function)
