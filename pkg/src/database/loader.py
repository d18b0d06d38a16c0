from __future__ import annotations

import json
import logging
import os
import time
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import pandas as pd

from src.core.model import FunctionDef
from src.core.traces import (
    CarbonTrace,
    FunctionTrace,
    LocationConfig,
    SolarTrace,
    TraceBundle,
    default_exec_time,
)

logger = logging.getLogger(__name__)

CARBON_COLUMNS: list[str] = ["timestamp_s", "location_id", "moer_lbs_per_mwh"]
SOLAR_COLUMNS: list[str] = ["timestamp_s", "location_id", "gti_w_per_m2"]
FUNCTION_COLUMNS: list[str] = ["minute_index", "function_id", "func_type", "invocations"]
FUNCTION_OPTIONAL_COLUMNS: list[str] = ["mean_exec_time_s"]

FUNCTIONS_FILE = "functions.csv"
CARBON_FILE = "carbon.csv"
SOLAR_FILE = "solar.csv"
MANIFEST_FILE = "locations.json"

MANIFEST_REQUIRED = ["location_id", "avg_moer", "avg_gti", "solar_array_w", "battery_wh", "servers"]


class TraceError(ValueError):
    pass


def get_trace_dir() -> Path:
    """
    Resolve the local trace directory.
    Priority:
      1) TRACE_DIR env (from .env)
      2) ./data
    """
    return Path(os.getenv("TRACE_DIR", "data")).resolve()


def get_results_dir() -> Path:
    return Path(os.getenv("RESULTS_DIR", "results")).resolve()


def _validate_schema(
    df: pd.DataFrame, required: Iterable[str], optional: Iterable[str], path: Path
) -> None:
    required = list(required)
    allowed = set(required) | set(optional)
    missing = [c for c in required if c not in df.columns]
    unknown = [c for c in df.columns if c not in allowed]
    if missing or unknown:
        raise TraceError(
            f"{path}: schema mismatch. Missing columns: {missing}; unknown columns: {unknown}. "
            f"Expected header: {','.join(required)}"
        )


def _line(idx: int) -> int:
    # header is line 1
    return int(idx) + 2


def _float_column(df: pd.DataFrame, col: str, path: Path) -> pd.Series:
    try:
        values = df[col].astype(float)
    except ValueError:
        coerced = pd.to_numeric(df[col], errors="coerce")
        bad = coerced.isna().idxmax()
        raise TraceError(
            f"{path}, line {_line(bad)}: invalid {col} value {df[col].loc[bad]!r}"
        ) from None
    # "nan" and "inf" parse as floats
    infinite = ~np.isfinite(values)
    if infinite.any():
        bad = infinite.idxmax()
        raise TraceError(
            f"{path}, line {_line(bad)}: {col} must be a finite number, got {df[col].loc[bad]!r}"
        )
    return values


def _int_column(df: pd.DataFrame, col: str, path: Path) -> pd.Series:
    coerced = pd.to_numeric(df[col], errors="coerce")
    bad_mask = coerced.isna() | ~np.isfinite(coerced) | (coerced != coerced.round())
    if bad_mask.any():
        bad = bad_mask.idxmax()
        raise TraceError(f"{path}, line {_line(bad)}: invalid {col} value {df[col].loc[bad]!r}")
    return coerced.astype(np.int64)


def _check_non_negative(values: pd.Series, col: str, path: Path) -> None:
    if (values < 0).any():
        bad = (values < 0).idxmax()
        raise TraceError(f"{path}, line {_line(bad)}: {col} must be >= 0, got {values.loc[bad]}")


def _check_ids(df: pd.DataFrame, col: str, path: Path) -> None:
    empty = df[col].str.strip() == ""
    if empty.any():
        raise TraceError(f"{path}, line {_line(empty.idxmax())}: empty {col}")


def _read_csv(path: Path) -> pd.DataFrame:
    if not path.exists():
        raise FileNotFoundError(f"Trace file not found: {path}")
    try:
        return pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise TraceError(f"{path}: empty file, a header row is required") from None
    except pd.errors.ParserError as exc:
        raise TraceError(f"{path}: malformed row: {exc}") from None


def _series_traces(
    df: pd.DataFrame, value_col: str, path: Path, kind: str
) -> dict[str, CarbonTrace] | dict[str, SolarTrace]:
    _check_ids(df, "location_id", path)
    ts = _int_column(df, "timestamp_s", path)
    values = _float_column(df, value_col, path)
    _check_non_negative(values, value_col, path)

    out = {}
    for loc, idx in df.groupby("location_id", sort=False).groups.items():
        loc_ts = ts.loc[idx]
        step = loc_ts.diff()
        if (step <= 0).any():
            bad = (step <= 0).idxmax()
            raise TraceError(
                f"{path}, line {_line(bad)}: timestamp {loc_ts.loc[bad]} for {loc!r} "
                "does not increase"
            )
        if kind == "carbon":
            out[loc] = CarbonTrace(loc, loc_ts.to_numpy(), values.loc[idx].to_numpy())
        else:
            out[loc] = SolarTrace(loc, loc_ts.to_numpy(), values.loc[idx].to_numpy())
    return out


def _function_trace(df: pd.DataFrame, path: Path, num_types: int | None = None) -> FunctionTrace:
    _check_ids(df, "function_id", path)
    minute = _int_column(df, "minute_index", path)
    ftype = _int_column(df, "func_type", path)
    count = _int_column(df, "invocations", path)
    _check_non_negative(minute, "minute_index", path)
    _check_non_negative(ftype, "func_type", path)
    _check_non_negative(count, "invocations", path)
    if num_types is not None and (ftype >= num_types).any():
        bad = (ftype >= num_types).idxmax()
        raise TraceError(
            f"{path}, line {_line(bad)}: func_type {ftype.loc[bad]} is outside "
            f"0..{num_types - 1} ({num_types} function types)"
        )
    exec_s = (
        _float_column(df, "mean_exec_time_s", path) if "mean_exec_time_s" in df.columns else None
    )

    dup = pd.DataFrame({"m": minute, "f": df["function_id"]}).duplicated()
    if dup.any():
        raise TraceError(f"{path}, line {_line(dup.idxmax())}: duplicate minute/function row")

    ids = list(dict.fromkeys(df["function_id"]))
    col_of = {fid: i for i, fid in enumerate(ids)}
    functions = []
    for fid in ids:
        rows = df.index[df["function_id"] == fid]
        types = ftype.loc[rows].unique()
        if len(types) != 1:
            raise TraceError(f"{path}, line {_line(rows[0])}: function {fid!r} changes type")
        if exec_s is not None:
            t = float(exec_s.loc[rows[0]])
            if not t > 0:
                raise TraceError(f"{path}, line {_line(rows[0])}: mean_exec_time_s must be > 0")
        else:
            t = default_exec_time(fid)
        functions.append(FunctionDef(fid, int(types[0]), t))

    minutes = int(minute.max()) + 1 if len(minute) else 0
    counts = np.zeros((minutes, len(ids)), dtype=np.int64)
    cols = df["function_id"].map(col_of).to_numpy()
    counts[minute.to_numpy(), cols] = count.to_numpy()
    return FunctionTrace(tuple(functions), counts)


def load_trace_csv(
    path: str | Path, kind: str, num_types: int | None = None
) -> FunctionTrace | dict[str, CarbonTrace] | dict[str, SolarTrace]:
    """
    Parse one trace CSV.
    kind: "functions" -> FunctionTrace; "carbon" / "solar" -> {location_id: trace}.
    num_types bounds func_type in a function trace.
    """
    t0 = time.perf_counter()
    path = Path(path)
    if kind == "functions":
        df = _read_csv(path)
        _validate_schema(df, FUNCTION_COLUMNS, FUNCTION_OPTIONAL_COLUMNS, path)
        trace = _function_trace(df, path, num_types)
    elif kind in ("carbon", "solar"):
        columns = CARBON_COLUMNS if kind == "carbon" else SOLAR_COLUMNS
        df = _read_csv(path)
        _validate_schema(df, columns, [], path)
        trace = _series_traces(df, columns[2], path, kind)
    else:
        raise ValueError(f"Unknown trace kind {kind!r}; expected functions, carbon or solar")

    logger.info(
        "Loaded %s trace from %s: rows=%s, seconds=%.3f",
        kind,
        path,
        len(df),
        time.perf_counter() - t0,
    )
    return trace


def _function_frame(trace: FunctionTrace) -> pd.DataFrame:
    minutes, n = trace.counts.shape
    return pd.DataFrame(
        {
            "minute_index": np.repeat(np.arange(minutes), n),
            "function_id": np.tile([f.id for f in trace.functions], minutes),
            "func_type": np.tile([f.func_type for f in trace.functions], minutes),
            "invocations": trace.counts.reshape(-1),
            "mean_exec_time_s": np.tile([f.mean_exec_time for f in trace.functions], minutes),
        }
    )


def _series_frame(traces: Iterable[CarbonTrace | SolarTrace]) -> pd.DataFrame:
    frames = []
    for tr in traces:
        if isinstance(tr, CarbonTrace):
            cols, values = CARBON_COLUMNS, tr.values
        else:
            cols, values = SOLAR_COLUMNS, tr.gti
        frames.append(
            pd.DataFrame({cols[0]: tr.timestamps, cols[1]: tr.location_id, cols[2]: values})
        )
    return pd.concat(frames, ignore_index=True)


def write_trace_csv(
    trace: FunctionTrace | CarbonTrace | SolarTrace | Mapping[str, CarbonTrace | SolarTrace],
    path: str | Path,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(trace, FunctionTrace):
        df = _function_frame(trace)
    elif isinstance(trace, (CarbonTrace, SolarTrace)):
        df = _series_frame([trace])
    else:
        df = _series_frame(trace.values())
    df.to_csv(path, index=False)
    logger.info("Wrote trace: path=%s, rows=%s", path, len(df))
    return path


def load_manifest(path: str | Path) -> list[LocationConfig]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Locations manifest not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise TraceError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(raw, list) or not raw:
        raise TraceError(f"{path}: manifest must be a non-empty JSON array")

    known = {f.name for f in fields(LocationConfig)}
    out = []
    for i, entry in enumerate(raw):
        if not isinstance(entry, dict):
            raise TraceError(f"{path}: entry {i} is not an object")
        missing = [k for k in MANIFEST_REQUIRED if k not in entry]
        unknown = [k for k in entry if k not in known]
        if missing or unknown:
            raise TraceError(
                f"{path}: entry {i} schema mismatch. Missing keys: {missing}; unknown keys: {unknown}"
            )
        try:
            out.append(LocationConfig(**entry))
        except (TypeError, ValueError) as exc:
            raise TraceError(f"{path}: entry {i}: {exc}") from None
    ids = [loc.location_id for loc in out]
    if len(set(ids)) != len(ids):
        raise TraceError(f"{path}: duplicate location_id")
    return out


def write_manifest(locations: Sequence[LocationConfig], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps([asdict(loc) for loc in locations], indent=2) + "\n", encoding="utf-8")
    return path


def _find_csv(trace_dir: Path, filename: str) -> Path | None:
    direct = trace_dir / filename
    if direct.exists():
        return direct

    target = filename.lower()
    for p in sorted(trace_dir.rglob("*.csv")):
        if p.name.lower() == target:
            return p
    return None


def _require_csv(trace_dir: Path, filename: str) -> Path:
    found = _find_csv(trace_dir, filename) if trace_dir.exists() else None
    if not found:
        raise FileNotFoundError(f"Could not find '{filename}' under {trace_dir}")
    return found


def has_traces(trace_dir: str | Path) -> bool:
    trace_dir = Path(trace_dir)
    return trace_dir.is_dir() and _find_csv(trace_dir, FUNCTIONS_FILE) is not None


def load_trace_bundle(
    trace_dir: str | Path, locations: Sequence[LocationConfig], num_types: int | None = None
) -> TraceBundle:
    """
    Read functions.csv, carbon.csv and solar.csv from trace_dir and bind them
    to the manifest locations. Solar output is scaled to each location's array.
    """
    trace_dir = Path(trace_dir)
    functions = load_trace_csv(_require_csv(trace_dir, FUNCTIONS_FILE), "functions", num_types)
    carbon = load_trace_csv(_require_csv(trace_dir, CARBON_FILE), "carbon")
    solar = load_trace_csv(_require_csv(trace_dir, SOLAR_FILE), "solar")

    missing = [
        loc.location_id
        for loc in locations
        if loc.location_id not in carbon or loc.location_id not in solar
    ]
    if missing:
        raise TraceError(f"{trace_dir}: no carbon/solar samples for locations {missing}")

    return TraceBundle(
        functions=functions,
        carbon={loc.location_id: carbon[loc.location_id] for loc in locations},
        solar={loc.location_id: solar[loc.location_id].with_array(loc.solar_array_w) for loc in locations},
    )
