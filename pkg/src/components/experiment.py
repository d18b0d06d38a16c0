from __future__ import annotations

import argparse
import json
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

from src.core.balancer import BalancerPolicy, BalancerSettings
from src.core.engine import EnergySettings, SimConfig
from src.core.model import Mode, ServerValidationError
from src.core.processing import (
    DEFAULT_P_IDLE_W,
    DEFAULT_P_PEAK_W,
    build_topology,
    scale_locations,
    select_locations,
)
from src.core.traces import LocationConfig, TraceProfile
from src.database.loader import load_manifest
from src.database.synthetic import DEFAULT_LOCATIONS, SECONDS_PER_DAY

ALL_POLICIES = tuple(p.value for p in BalancerPolicy)
REPORT_FORMATS = ("csv", "xlsx")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentSpec:
    mode: str = Mode.GRID_CONNECTED.value
    policies: tuple[str, ...] = ALL_POLICIES
    seed: int = 42
    days: float = 7.0
    duration_s: int | None = None
    profile: str = TraceProfile.HIGH.value
    locations: int | tuple[str, ...] | None = None
    servers_per_location: int | None = None
    scale_energy_with_servers: bool = True
    traces: str | None = None
    manifest: str | None = None
    p_idle_w: float = DEFAULT_P_IDLE_W
    p_peak_w: float = DEFAULT_P_PEAK_W
    containers_per_server: int = 3
    mem_limit: int | None = None
    mem_per_invocation: int = 1
    num_function_types: int = 5
    cold_start_penalty_s: float = 0.5
    warm_start_penalty_s: float = 0.005
    profile_delay_s: int = 0
    profile_period_s: int = 1
    max_retries: int = 3
    retry_interval_s: int = 60
    retry_on_high_carbon: bool = False
    carbon_threshold: float = 1200.0
    buffer_fraction: float = 0.2
    max_discharge_w: float = 1000.0
    discharge_horizon_s: float = 3600.0
    initial_soc: float = 1.0
    restart_fraction: float = 0.05
    critical_fraction: float = 0.2
    stagger_arrivals: bool = True
    battery_log_s: int = 0
    formats: tuple[str, ...] = ("csv",)
    jobs: int = 1
    out: str | None = None

    def __post_init__(self) -> None:
        try:
            Mode(self.mode)
        except ValueError:
            raise ConfigError(
                f"Unknown mode {self.mode!r}; expected one of {[m.value for m in Mode]}"
            ) from None
        try:
            TraceProfile(self.profile)
        except ValueError:
            raise ConfigError(
                f"Unknown profile {self.profile!r}; expected one of {[p.value for p in TraceProfile]}"
            ) from None

        policies = tuple(self.policies)
        if not policies:
            raise ConfigError("At least one policy is required")
        unknown = [p for p in policies if p not in ALL_POLICIES]
        if unknown:
            raise ConfigError(f"Unknown policies {unknown}; expected any of {list(ALL_POLICIES)}")
        object.__setattr__(self, "policies", tuple(dict.fromkeys(policies)))

        formats = tuple(self.formats)
        bad = [f for f in formats if f not in REPORT_FORMATS]
        if bad or not formats:
            raise ConfigError(f"Unknown report formats {bad}; expected any of {list(REPORT_FORMATS)}")
        object.__setattr__(self, "formats", formats)

        if isinstance(self.locations, list):
            object.__setattr__(self, "locations", tuple(self.locations))
        if self.duration_s is None and not self.days > 0:
            raise ConfigError(f"days must be > 0, got {self.days}")
        if self.duration_s is not None and self.duration_s <= 0:
            raise ConfigError(f"duration_s must be > 0, got {self.duration_s}")
        if self.battery_log_s < 0:
            raise ConfigError(f"battery_log_s must be >= 0, got {self.battery_log_s}")
        if self.jobs < 1:
            raise ConfigError(f"jobs must be >= 1, got {self.jobs}")

    @property
    def duration(self) -> int:
        if self.duration_s is not None:
            return int(self.duration_s)
        return int(round(self.days * SECONDS_PER_DAY))


_SPEC_KEYS = {f.name for f in fields(ExperimentSpec)}


def load_config(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    unknown = sorted(set(raw) - _SPEC_KEYS)
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {unknown}")
    return raw


def make_spec(values: Mapping[str, Any]) -> ExperimentSpec:
    unknown = sorted(set(values) - _SPEC_KEYS)
    if unknown:
        raise ConfigError(f"Unknown config keys {unknown}")
    data = dict(values)
    for key in ("policies", "formats"):
        if isinstance(data.get(key), str):
            data[key] = tuple(_split(data[key]))
        elif key in data:
            data[key] = tuple(data[key])
    try:
        return ExperimentSpec(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _split(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def _policy_list(value: str) -> tuple[str, ...]:
    items = _split(value)
    unknown = [p for p in items if p not in ALL_POLICIES]
    if not items or unknown:
        raise argparse.ArgumentTypeError(
            f"invalid policy list {value!r}; choose from {','.join(ALL_POLICIES)}"
        )
    return tuple(items)


def _format_list(value: str) -> tuple[str, ...]:
    items = _split(value)
    if not items or any(f not in REPORT_FORMATS for f in items):
        raise argparse.ArgumentTypeError(
            f"invalid format list {value!r}; choose from {','.join(REPORT_FORMATS)}"
        )
    return tuple(items)


def _seed(value: str) -> int:
    seed = int(value)
    if not 0 <= seed < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be a 64-bit unsigned integer, got {value}")
    return seed


def _locations(value: str) -> int | tuple[str, ...]:
    if value.isdigit():
        return int(value)
    return tuple(_split(value))


# argparse dest -> ExperimentSpec field, for flags that override config values
_FLAG_FIELDS = {
    "seed": "seed",
    "mode": "mode",
    "policy": "policies",
    "days": "days",
    "out": "out",
    "traces": "traces",
    "manifest": "manifest",
    "profile": "profile",
    "servers_per_location": "servers_per_location",
    "locations": "locations",
    "jobs": "jobs",
    "format": "formats",
    "battery_log": "battery_log_s",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="carbon-sim",
        description="Carbon-aware FaaS load-balancing simulator.",
    )
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING (default: LOG_LEVEL or INFO)")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run one or more balancing policies")
    sim.add_argument("--config", help="JSON experiment config")
    sim.add_argument("--seed", type=_seed)
    sim.add_argument("--mode", choices=[m.value for m in Mode])
    sim.add_argument("--policy", type=_policy_list, help="comma separated policy names")
    sim.add_argument("--days", type=float)
    sim.add_argument("--out", help="results directory (default: RESULTS_DIR)")
    sim.add_argument("--traces", help="directory with functions.csv, carbon.csv, solar.csv")
    sim.add_argument("--manifest", help="locations manifest (JSON)")
    sim.add_argument("--profile", choices=[p.value for p in TraceProfile])
    sim.add_argument("--servers-per-location", type=int)
    sim.add_argument("--locations", type=_locations, help="first N manifest rows, or comma separated ids")
    sim.add_argument("--jobs", type=int)
    sim.add_argument("--format", type=_format_list, help="csv and/or xlsx summary")
    sim.add_argument(
        "--battery-log",
        type=int,
        metavar="SECONDS",
        help="grid-isolated: write battery.csv sampled every SECONDS (0 = off)",
    )

    gen = sub.add_parser("gen-traces", help="write synthetic traces and a locations manifest")
    gen.add_argument("--profile", choices=[p.value for p in TraceProfile], default=TraceProfile.HIGH.value)
    gen.add_argument("--days", type=float, default=7.0)
    gen.add_argument("--locations", type=_locations)
    gen.add_argument("--seed", type=_seed, default=42)
    gen.add_argument("--manifest", help="source manifest (default: built-in locations)")
    gen.add_argument("--out", help="output directory (default: TRACE_DIR)")

    rep = sub.add_parser("report", help="compare finished runs")
    rep.add_argument("dirs", nargs="+", help="policy run directories or sweep directories")
    rep.add_argument("--hourly", action="store_true", help="write hourly_emissions.csv")
    rep.add_argument("--out", help="directory for hourly_emissions.csv (default: RESULTS_DIR)")
    return parser


def spec_from_args(args: argparse.Namespace) -> ExperimentSpec:
    """Defaults, then the --config file, then explicit flags."""
    values: dict[str, Any] = {}
    if getattr(args, "config", None):
        values.update(load_config(args.config))
    for dest, key in _FLAG_FIELDS.items():
        value = getattr(args, dest, None)
        if value is not None:
            values[key] = value
    if "days" in values and getattr(args, "days", None) is not None:
        values.pop("duration_s", None)
    return make_spec(values)


def resolve_locations(
    manifest: str | None,
    locations: int | Sequence[str] | None = None,
    servers_per_location: int | None = None,
    scale_energy: bool = True,
) -> list[LocationConfig]:
    base = load_manifest(manifest) if manifest else list(DEFAULT_LOCATIONS)
    try:
        if isinstance(locations, int):
            chosen = select_locations(base, limit=locations)
        else:
            chosen = select_locations(base, ids=locations)
        return scale_locations(chosen, servers_per_location, scale_energy)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def build_sim_config(
    spec: ExperimentSpec, locations: Sequence[LocationConfig], policy: str | None = None
) -> SimConfig:
    try:
        servers = build_topology(
            locations,
            spec.servers_per_location,
            p_idle=spec.p_idle_w,
            p_peak=spec.p_peak_w,
            containers=spec.containers_per_server,
            mem_limit=spec.mem_limit,
        )
        return SimConfig(
            mode=Mode(spec.mode),
            policy=BalancerPolicy(policy or spec.policies[0]),
            seed=spec.seed,
            duration=spec.duration,
            servers=tuple(servers),
            locations=tuple(locations),
            num_function_types=spec.num_function_types,
            containers_per_server=spec.containers_per_server,
            cold_start_penalty=spec.cold_start_penalty_s,
            warm_start_penalty=spec.warm_start_penalty_s,
            profile_delay=spec.profile_delay_s,
            profile_period=spec.profile_period_s,
            retry_interval=spec.retry_interval_s,
            stagger_arrivals=spec.stagger_arrivals,
            balancer=BalancerSettings(
                max_retries=spec.max_retries,
                mem_per_invocation=spec.mem_per_invocation,
                retry_on_high_carbon=spec.retry_on_high_carbon,
                carbon_threshold=spec.carbon_threshold,
            ),
            energy=EnergySettings(
                buffer_fraction=spec.buffer_fraction,
                max_discharge_w=spec.max_discharge_w,
                discharge_horizon_s=spec.discharge_horizon_s,
                initial_soc=spec.initial_soc,
                restart_fraction=spec.restart_fraction,
                critical_fraction=spec.critical_fraction,
            ),
        )
    except ServerValidationError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
