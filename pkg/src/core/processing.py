from __future__ import annotations

from collections.abc import Sequence
from dataclasses import replace

from src.core.hash_ring import ring_key
from src.core.model import DEFAULT_CONTAINERS, ServerState, make_containers, validate_server
from src.core.traces import LocationConfig

DEFAULT_P_IDLE_W = 40.0
DEFAULT_P_PEAK_W = 340.0


def select_locations(
    locations: Sequence[LocationConfig],
    limit: int | None = None,
    ids: Sequence[str] | None = None,
) -> list[LocationConfig]:
    """
    Subset of the manifest: the listed ids (manifest order kept), then the first `limit` rows.
    """
    out = list(locations)
    if ids:
        wanted = set(ids)
        unknown = sorted(wanted - {loc.location_id for loc in out})
        if unknown:
            raise ValueError(f"Unknown locations: {unknown}")
        out = [loc for loc in out if loc.location_id in wanted]
    if limit is not None:
        if limit < 1:
            raise ValueError(f"Location limit must be >= 1, got {limit}")
        out = out[:limit]
    return out


def scale_locations(
    locations: Sequence[LocationConfig],
    servers_per_location: int | None,
    scale_energy: bool = True,
) -> list[LocationConfig]:
    """
    Override the server count per location. With scale_energy the solar array and
    battery grow in proportion to the new count.
    """
    if servers_per_location is None:
        return list(locations)
    if servers_per_location < 1:
        raise ValueError(f"servers_per_location must be >= 1, got {servers_per_location}")

    out = []
    for loc in locations:
        factor = servers_per_location / loc.servers if scale_energy else 1.0
        out.append(
            replace(
                loc,
                servers=servers_per_location,
                solar_array_w=loc.solar_array_w * factor,
                battery_wh=loc.battery_wh * factor,
            )
        )
    return out


def build_topology(
    locations: Sequence[LocationConfig],
    servers_per_location: int | None = None,
    p_idle: float = DEFAULT_P_IDLE_W,
    p_peak: float = DEFAULT_P_PEAK_W,
    containers: int = DEFAULT_CONTAINERS,
    mem_limit: int | None = None,
) -> list[ServerState]:
    servers = []
    for loc in locations:
        count = servers_per_location if servers_per_location is not None else loc.servers
        for k in range(count):
            server_id = f"{loc.location_id}-{k}"
            s = ServerState(
                id=server_id,
                location_id=loc.location_id,
                ring_position=ring_key(server_id).position,
                p_idle=p_idle,
                p_peak=p_peak,
                mem_limit=containers if mem_limit is None else mem_limit,
                containers=make_containers(containers),
            )
            validate_server(s)
            servers.append(s)
    return servers
