from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, fields, replace
from typing import Any

import pandas as pd

from src.core.health import (
    CRITICAL_FRACTION,
    classify_battery_band,
    count_critical_transitions,
)

BASELINE_POLICY = "openwhisk"

SUMMARY_COLUMNS = [
    "policy",
    "mode",
    "seed",
    "num_servers",
    "submitted",
    "executed",
    "failed_invocations",
    "queued_at_end",
    "interrupted_invocations",
    "cold_starts",
    "warm_starts",
    "total_energy_wh",
    "total_emissions_lbs",
    "baseline_emissions_lbs",
    "emissions_avoided_lbs",
    "avoided_pct",
    "avoided_per_server_lbs",
    "downtime_s",
    "shutdown_count",
    "restart_count",
    "critical_battery_events",
    "latency_mean_s",
    "latency_p95_s",
]


@dataclass(frozen=True)
class RunMetrics:
    policy: str
    mode: str
    seed: int
    duration_s: int
    num_servers: int
    submitted: int
    executed: int
    failed_invocations: int
    queued_at_end: int
    interrupted_invocations: int
    retries: int
    cold_starts: int
    warm_starts: int
    total_energy_wh: float
    total_emissions_lbs: float
    baseline_emissions_lbs: float | None = None
    emissions_avoided_vs_baseline: float | None = None
    hourly_emissions_lbs: tuple[float, ...] = ()
    baseline_hourly_emissions_lbs: tuple[float, ...] = ()
    downtime_s: float = 0.0
    shutdown_count: int = 0
    restart_count: int = 0
    critical_battery_events: int = 0
    latency_mean_s: float = 0.0
    latency_p50_s: float = 0.0
    latency_p95_s: float = 0.0
    latency_p99_s: float = 0.0

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["hourly_emissions_lbs"] = list(self.hourly_emissions_lbs)
        out["baseline_hourly_emissions_lbs"] = list(self.baseline_hourly_emissions_lbs)
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> RunMetrics:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"Unknown metrics fields: {unknown}")
        values = dict(data)
        for key in ("hourly_emissions_lbs", "baseline_hourly_emissions_lbs"):
            values[key] = tuple(float(v) for v in values.get(key, ()))
        return cls(**values)


def with_baseline(metrics: RunMetrics, baseline: RunMetrics) -> RunMetrics:
    """
    Fill the baseline fields of `metrics` from a baseline run on the same workload.
    """
    if (metrics.mode, metrics.seed, metrics.duration_s) != (
        baseline.mode,
        baseline.seed,
        baseline.duration_s,
    ):
        raise ValueError(
            f"Baseline run ({baseline.mode}, seed={baseline.seed}, {baseline.duration_s}s) does not "
            f"match {metrics.policy} ({metrics.mode}, seed={metrics.seed}, {metrics.duration_s}s)"
        )
    return replace(
        metrics,
        baseline_emissions_lbs=baseline.total_emissions_lbs,
        emissions_avoided_vs_baseline=baseline.total_emissions_lbs - metrics.total_emissions_lbs,
        baseline_hourly_emissions_lbs=baseline.hourly_emissions_lbs,
    )


def summary_table(metrics: Sequence[RunMetrics]) -> pd.DataFrame:
    """
    One row per policy run, in the order given.
    Avoided columns are empty when no baseline was attached.
    """
    if not metrics:
        return pd.DataFrame(columns=SUMMARY_COLUMNS)

    rows = []
    for m in metrics:
        avoided = m.emissions_avoided_vs_baseline
        base = m.baseline_emissions_lbs
        rows.append(
            {
                "policy": m.policy,
                "mode": m.mode,
                "seed": m.seed,
                "num_servers": m.num_servers,
                "submitted": m.submitted,
                "executed": m.executed,
                "failed_invocations": m.failed_invocations,
                "queued_at_end": m.queued_at_end,
                "interrupted_invocations": m.interrupted_invocations,
                "cold_starts": m.cold_starts,
                "warm_starts": m.warm_starts,
                "total_energy_wh": m.total_energy_wh,
                "total_emissions_lbs": m.total_emissions_lbs,
                "baseline_emissions_lbs": base,
                "emissions_avoided_lbs": avoided,
                "avoided_pct": (avoided / base) if avoided is not None and base else None,
                "avoided_per_server_lbs": (avoided / m.num_servers) if avoided is not None else None,
                "downtime_s": m.downtime_s,
                "shutdown_count": m.shutdown_count,
                "restart_count": m.restart_count,
                "critical_battery_events": m.critical_battery_events,
                "latency_mean_s": m.latency_mean_s,
                "latency_p95_s": m.latency_p95_s,
            }
        )
    out = pd.DataFrame(rows, columns=SUMMARY_COLUMNS)
    for col in ("baseline_emissions_lbs", "emissions_avoided_lbs", "avoided_pct", "avoided_per_server_lbs"):
        out[col] = out[col].astype(float)
    return out


def hourly_table(metrics: Sequence[RunMetrics]) -> pd.DataFrame:
    """
    Long table of per-hour emissions: hour, policy, emissions_lbs, avoided_lbs.
    avoided_lbs is baseline hourly minus policy hourly, NaN without a baseline.
    """
    frames = []
    for m in metrics:
        hourly = pd.Series(m.hourly_emissions_lbs, dtype=float)
        base = pd.Series(m.baseline_hourly_emissions_lbs, dtype=float)
        frame = pd.DataFrame(
            {
                "hour": range(len(hourly)),
                "policy": m.policy,
                "emissions_lbs": hourly,
            }
        )
        frame["avoided_lbs"] = base - hourly if len(base) == len(hourly) else float("nan")
        frames.append(frame)
    if not frames:
        return pd.DataFrame(columns=["hour", "policy", "emissions_lbs", "avoided_lbs"])
    return pd.concat(frames, ignore_index=True)


def battery_summary(
    battery_log: pd.DataFrame, critical_fraction: float = CRITICAL_FRACTION
) -> pd.DataFrame:
    """
    Per-location battery health from a battery log.
    Columns: location_id, min_soc, mean_soc, critical_transitions, critical_share, low_share, healthy_share
    """
    columns = [
        "location_id",
        "min_soc",
        "mean_soc",
        "critical_transitions",
        "critical_share",
        "low_share",
        "healthy_share",
    ]
    if battery_log is None or battery_log.empty:
        return pd.DataFrame(columns=columns)

    rows = []
    for location_id, g in battery_log.groupby("location_id", sort=False):
        capacity = float(g["capacity_wh"].iloc[0])
        bands = classify_battery_band(g["soc"]).value_counts(normalize=True)
        rows.append(
            {
                "location_id": location_id,
                "min_soc": float(g["soc"].min()),
                "mean_soc": float(g["soc"].mean()),
                "critical_transitions": count_critical_transitions(
                    g["battery_level_wh"], capacity, critical_fraction
                ),
                "critical_share": float(bands.get("critical", 0.0)),
                "low_share": float(bands.get("low", 0.0)),
                "healthy_share": float(bands.get("healthy", 0.0)),
            }
        )
    return pd.DataFrame(rows, columns=columns)
