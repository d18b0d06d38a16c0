from __future__ import annotations

import argparse
import functools
import json
import logging
import math
import os
import sys
import time
from collections.abc import Sequence
from pathlib import Path

import pandas as pd
from dotenv import load_dotenv

from src.components.experiment import (
    ConfigError,
    ExperimentSpec,
    build_parser,
    build_sim_config,
    resolve_locations,
    spec_from_args,
)
from src.core.balancer import BalancerPolicy
from src.core.engine import SimulationResult, run_sweep
from src.core.formatting import fmt_int, fmt_lbs, fmt_seconds
from src.core.metrics import RunMetrics, battery_summary, hourly_table, summary_table
from src.core.model import ServerValidationError
from src.core.story import headline_emissions_avoided
from src.core.traces import LocationConfig, TraceBundle
from src.database.loader import (
    CARBON_FILE,
    FUNCTIONS_FILE,
    MANIFEST_FILE,
    SOLAR_FILE,
    TraceError,
    get_results_dir,
    get_trace_dir,
    has_traces,
    load_trace_bundle,
    write_manifest,
    write_trace_csv,
)
from src.database.synthetic import SECONDS_PER_DAY, build_trace_bundle

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.json"
EVENTS_FILE = "events.csv"
BATTERY_FILE = "battery.csv"
SUMMARY_FILE = "summary.csv"
SUMMARY_XLSX = "summary.xlsx"
HOURLY_FILE = "hourly_emissions.csv"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def write_run_outputs(policy: BalancerPolicy, result: SimulationResult, out_dir: str) -> None:
    run_dir = Path(out_dir) / BalancerPolicy(policy).value
    run_dir.mkdir(parents=True, exist_ok=True)
    result.events.to_csv(run_dir / EVENTS_FILE, index=False)
    if result.battery_log is not None:
        result.battery_log.to_csv(run_dir / BATTERY_FILE, index=False)


def write_metrics(metrics: RunMetrics, out_dir: Path) -> Path:
    run_dir = out_dir / metrics.policy
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / METRICS_FILE
    path.write_text(json.dumps(metrics.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def _trace_source(spec: ExperimentSpec) -> Path | None:
    """--traces / config, then TRACE_DIR when it holds a functions.csv, else synthetic."""
    if spec.traces:
        return Path(spec.traces)
    default = get_trace_dir()
    return default if has_traces(default) else None


def _load_traces(spec: ExperimentSpec, locations: Sequence[LocationConfig]) -> TraceBundle:
    source = _trace_source(spec)
    if source is not None:
        logger.info("Loading traces from %s", source)
        traces = load_trace_bundle(source, locations, spec.num_function_types)
    else:
        traces = build_trace_bundle(
            locations, spec.profile, spec.duration, spec.seed, spec.num_function_types
        )
    needed = math.ceil(spec.duration / 60)
    if traces.functions.minutes < needed:
        raise TraceError(
            f"Function trace covers {traces.functions.minutes} minutes; "
            f"the run needs {needed} ({spec.duration} s)"
        )
    return traces


def cmd_simulate(spec: ExperimentSpec) -> int:
    t0 = time.perf_counter()
    locations = resolve_locations(
        spec.manifest, spec.locations, spec.servers_per_location, spec.scale_energy_with_servers
    )
    config = build_sim_config(spec, locations)
    traces = _load_traces(spec, locations)

    out_dir = Path(spec.out) if spec.out else get_results_dir()
    out_dir.mkdir(parents=True, exist_ok=True)

    results = run_sweep(
        config,
        traces,
        spec.policies,
        jobs=spec.jobs,
        sink=functools.partial(write_run_outputs, out_dir=str(out_dir)),
        battery_log_interval=spec.battery_log_s,
    )
    for metrics in results.values():
        write_metrics(metrics, out_dir)

    summary = summary_table(list(results.values()))
    summary.to_csv(out_dir / SUMMARY_FILE, index=False)
    if "xlsx" in spec.formats:
        summary.to_excel(out_dir / SUMMARY_XLSX, index=False, sheet_name="summary")

    print(render_table(summary))
    print(headline_emissions_avoided(summary))
    logger.info(
        "Simulate done: out=%s, policies=%s, seconds=%.3f",
        out_dir,
        len(results),
        time.perf_counter() - t0,
    )
    return EXIT_OK


def cmd_gen_traces(args: argparse.Namespace) -> int:
    if not args.days > 0:
        raise ConfigError(f"days must be > 0, got {args.days}")
    locations = resolve_locations(args.manifest, args.locations)
    duration = int(round(args.days * SECONDS_PER_DAY))
    bundle = build_trace_bundle(locations, args.profile, duration, args.seed)

    out_dir = Path(args.out) if args.out else get_trace_dir()
    write_trace_csv(bundle.functions, out_dir / FUNCTIONS_FILE)
    write_trace_csv(bundle.carbon, out_dir / CARBON_FILE)
    write_trace_csv(bundle.solar, out_dir / SOLAR_FILE)
    write_manifest(locations, out_dir / MANIFEST_FILE)
    print(f"Wrote {len(locations)} locations, {fmt_int(bundle.functions.total_invocations)} invocations to {out_dir}")
    return EXIT_OK


def find_metrics(dirs: Sequence[str | Path]) -> list[Path]:
    """metrics.json of each run directory, or of every run inside a sweep directory."""
    found: list[Path] = []
    for d in dirs:
        d = Path(d)
        direct = d / METRICS_FILE
        nested = sorted(d.glob(f"*/{METRICS_FILE}")) if d.is_dir() else []
        if direct.exists():
            found.append(direct)
        elif nested:
            found.extend(nested)
        else:
            raise FileNotFoundError(f"No {METRICS_FILE} found in {d}")
    return list(dict.fromkeys(found))


def load_metrics(path: Path) -> RunMetrics:
    try:
        return RunMetrics.from_dict(json.loads(path.read_text(encoding="utf-8")))
    except (json.JSONDecodeError, TypeError, ValueError) as exc:
        raise TraceError(f"{path}: invalid metrics file: {exc}") from None


def render_table(summary: pd.DataFrame) -> str:
    if summary.empty:
        return "(no runs)"
    view = pd.DataFrame(
        {
            "policy": summary["policy"],
            "emissions": summary["total_emissions_lbs"].map(fmt_lbs),
            "avoided": summary["emissions_avoided_lbs"].map(
                lambda v: fmt_lbs(v) if pd.notna(v) else "-"
            ),
            "downtime": summary["downtime_s"].map(fmt_seconds),
            "shutdowns": summary["shutdown_count"].map(fmt_int),
            "critical": summary["critical_battery_events"].map(fmt_int),
            "cold": summary["cold_starts"].map(fmt_int),
            "warm": summary["warm_starts"].map(fmt_int),
            "failed": summary["failed_invocations"].map(fmt_int),
        }
    )
    return view.to_string(index=False)


def render_battery(metrics_paths: Sequence[Path], metrics: Sequence[RunMetrics]) -> str | None:
    """Per-location battery health for runs that wrote a battery.csv."""
    blocks = []
    for path, m in zip(metrics_paths, metrics, strict=True):
        log_path = path.parent / BATTERY_FILE
        if not log_path.exists():
            continue
        health = battery_summary(pd.read_csv(log_path, dtype={"location_id": str}))
        if health.empty:
            continue
        view = health.assign(
            min_soc=health["min_soc"].map("{:.1%}".format),
            mean_soc=health["mean_soc"].map("{:.1%}".format),
            critical_share=health["critical_share"].map("{:.1%}".format),
            low_share=health["low_share"].map("{:.1%}".format),
            healthy_share=health["healthy_share"].map("{:.1%}".format),
        )
        blocks.append(f"battery ({m.policy}):\n{view.to_string(index=False)}")
    return "\n\n".join(blocks) if blocks else None


def cmd_report(args: argparse.Namespace) -> int:
    paths = find_metrics(args.dirs)
    metrics = [load_metrics(p) for p in paths]
    summary = summary_table(metrics)
    print(render_table(summary))
    print(headline_emissions_avoided(summary))

    battery = render_battery(paths, metrics)
    if battery:
        print(battery)

    if args.hourly:
        out_dir = Path(args.out) if args.out else get_results_dir()
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / HOURLY_FILE
        hourly_table(metrics).to_csv(path, index=False)
        print(f"Wrote {path}")
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    load_dotenv()
    parser = build_parser()
    args = parser.parse_args(argv)

    level_name = (args.log_level or os.getenv("LOG_LEVEL", "INFO")).upper()
    level = logging.getLevelName(level_name)
    if not isinstance(level, int):
        parser.error(f"invalid log level {level_name!r}")
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        if args.command == "simulate":
            return cmd_simulate(spec_from_args(args))
        if args.command == "gen-traces":
            return cmd_gen_traces(args)
        return cmd_report(args)
    except (ConfigError, TraceError, ServerValidationError, OSError) as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG
    except Exception:
        logger.exception("Run failed")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
