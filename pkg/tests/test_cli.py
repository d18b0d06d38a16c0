import json
import logging

import pandas as pd
import pytest

from src.app import main
from src.components.experiment import (
    ConfigError,
    build_parser,
    load_config,
    make_spec,
    spec_from_args,
)

SHORT_RUN = {
    "duration_s": 900,
    "locations": 2,
    "profile": "rare",
    "policies": ["carbon-aware", "greedy"],
    "seed": 7,
}


@pytest.fixture(autouse=True)
def no_default_traces(tmp_path, monkeypatch):
    monkeypatch.setenv("TRACE_DIR", str(tmp_path / "no-traces"))


def write_config(tmp_path, **overrides):
    path = tmp_path / "experiment.json"
    path.write_text(json.dumps({**SHORT_RUN, **overrides}), encoding="utf-8")
    return path


def run_simulate(tmp_path, name: str = "out", *extra: str) -> tuple[int, object]:
    out = tmp_path / name
    code = main(["simulate", "--config", str(write_config(tmp_path)), "--out", str(out), *extra])
    return code, out


def test_simulate_writes_metrics_events_and_summary(tmp_path, capsys):
    code, out = run_simulate(tmp_path)
    assert code == 0

    for policy in ("carbon-aware", "greedy"):
        metrics = json.loads((out / policy / "metrics.json").read_text(encoding="utf-8"))
        assert metrics["policy"] == policy
        assert metrics["baseline_emissions_lbs"] is not None
        assert (out / policy / "events.csv").exists()
    assert not (out / "openwhisk").exists()

    summary = pd.read_csv(out / "summary.csv")
    assert summary["policy"].tolist() == ["carbon-aware", "greedy"]
    recomputed = summary["baseline_emissions_lbs"] - summary["total_emissions_lbs"]
    assert summary["emissions_avoided_lbs"].tolist() == pytest.approx(recomputed.tolist())
    assert "versus openwhisk" in capsys.readouterr().out


def test_simulate_is_reproducible(tmp_path):
    _, a = run_simulate(tmp_path, "a")
    _, b = run_simulate(tmp_path, "b")
    for name in ("carbon-aware/metrics.json", "carbon-aware/events.csv", "greedy/events.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_flags_override_config(tmp_path):
    args = build_parser().parse_args(
        ["simulate", "--config", str(write_config(tmp_path)), "--seed", "9", "--days", "0.5"]
    )
    spec = spec_from_args(args)
    assert spec.seed == 9
    assert spec.duration == 43_200
    assert spec.policies == ("carbon-aware", "greedy")


def test_xlsx_summary(tmp_path):
    code, out = run_simulate(tmp_path, "x", "--format", "csv,xlsx", "--policy", "greedy")
    assert code == 0
    summary = pd.read_excel(out / "summary.xlsx", sheet_name="summary")
    assert summary["policy"].tolist() == ["greedy"]


def test_missing_traces_exit_code(tmp_path, caplog):
    missing = tmp_path / "no-traces"
    code = main(
        ["simulate", "--config", str(write_config(tmp_path)), "--traces", str(missing), "--out", str(tmp_path / "o")]
    )
    assert code == 2
    assert str(missing) in caplog.text


def test_bad_config_exit_code(tmp_path):
    path = write_config(tmp_path, buffer_fraction=1.5)
    assert main(["simulate", "--config", str(path), "--out", str(tmp_path / "o")]) == 2

    unknown = tmp_path / "unknown.json"
    unknown.write_text(json.dumps({"wind_turbines": 3}), encoding="utf-8")
    assert main(["simulate", "--config", str(unknown)]) == 2


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["simulate", "--profile", "extreme"],
        ["simulate", "--policy", "round-robin"],
        ["simulate", "--seed", "-1"],
        ["report"],
    ],
)
def test_usage_errors(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 2


def test_gen_traces_then_simulate(tmp_path):
    data = tmp_path / "data"
    code = main(
        ["gen-traces", "--profile", "medium", "--days", "0.05", "--locations", "3", "--out", str(data)]
    )
    assert code == 0
    for name in ("functions.csv", "carbon.csv", "solar.csv", "locations.json"):
        assert (data / name).exists()
    manifest = json.loads((data / "locations.json").read_text(encoding="utf-8"))
    assert len(manifest) == 3

    out = tmp_path / "runs"
    code = main(
        [
            "simulate",
            "--traces", str(data),
            "--manifest", str(data / "locations.json"),
            "--days", "0.02",
            "--policy", "consistent-hashing",
            "--mode", "isolated",
            "--out", str(out),
        ]
    )
    assert code == 0
    metrics = json.loads((out / "consistent-hashing" / "metrics.json").read_text(encoding="utf-8"))
    assert metrics["mode"] == "isolated"
    assert metrics["num_servers"] == 6


def test_simulate_rejects_short_trace(tmp_path):
    data = tmp_path / "data"
    assert main(["gen-traces", "--profile", "rare", "--days", "0.01", "--locations", "1", "--out", str(data)]) == 0
    code = main(
        ["simulate", "--traces", str(data), "--manifest", str(data / "locations.json"), "--days", "1", "--out", str(tmp_path / "o")]
    )
    assert code == 2


def test_report(tmp_path, capsys):
    _, out = run_simulate(tmp_path)
    capsys.readouterr()

    code = main(["report", str(out), "--hourly", "--out", str(tmp_path / "rep")])
    assert code == 0
    printed = capsys.readouterr().out
    assert "carbon-aware" in printed and "greedy" in printed

    hourly = pd.read_csv(tmp_path / "rep" / "hourly_emissions.csv")
    assert set(hourly["policy"]) == {"carbon-aware", "greedy"}
    assert hourly["hour"].max() == 0

    assert main(["report", str(out / "greedy")]) == 0
    assert main(["report", str(tmp_path / "nothing-here")]) == 2


def test_load_config_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_make_spec_validation():
    assert make_spec({"policies": "greedy,openwhisk"}).policies == ("greedy", "openwhisk")
    with pytest.raises(ConfigError):
        make_spec({"mode": "offgrid"})
    with pytest.raises(ConfigError):
        make_spec({"days": 0})
    with pytest.raises(ConfigError):
        make_spec({"formats": ["pdf"]})


def test_battery_log_written_and_reported(tmp_path, capsys):
    code, out = run_simulate(tmp_path, "iso", "--mode", "isolated", "--battery-log", "60")
    assert code == 0
    for policy in ("carbon-aware", "greedy"):
        log = pd.read_csv(out / policy / "battery.csv")
        assert (log["tick"] % 60 == 0).all()
        assert log["location_id"].nunique() == 2
        assert log["soc"].between(0.0, 1.0).all()
    capsys.readouterr()

    assert main(["report", str(out)]) == 0
    printed = capsys.readouterr().out
    assert "battery (carbon-aware):" in printed
    assert "battery (greedy):" in printed
    assert "min_soc" in printed


def test_battery_log_only_in_isolated_mode(tmp_path, capsys):
    code, out = run_simulate(tmp_path, "grid", "--battery-log", "60")
    assert code == 0
    assert not (out / "greedy" / "battery.csv").exists()
    capsys.readouterr()
    assert main(["report", str(out)]) == 0
    assert "battery (" not in capsys.readouterr().out


def test_negative_battery_log_is_a_config_error(tmp_path):
    assert run_simulate(tmp_path, "o", "--battery-log", "-5")[0] == 2


def test_simulate_reads_traces_from_trace_dir(tmp_path, monkeypatch, caplog):
    data = tmp_path / "data"
    assert main(["gen-traces", "--profile", "rare", "--days", "0.02", "--locations", "2", "--out", str(data)]) == 0
    monkeypatch.setenv("TRACE_DIR", str(data))

    caplog.set_level(logging.INFO)
    code, out = run_simulate(tmp_path)
    assert code == 0
    assert f"Loading traces from {data.resolve()}" in caplog.text
    assert (out / "greedy" / "metrics.json").exists()


def test_function_type_outside_configured_range_exit_code(tmp_path, monkeypatch, caplog):
    data = tmp_path / "data"
    data.mkdir()
    (data / "functions.csv").write_text(
        "minute_index,function_id,func_type,invocations\n0,f,1,2\n0,g,7,1\n", encoding="utf-8"
    )
    monkeypatch.setenv("TRACE_DIR", str(data))

    code, _ = run_simulate(tmp_path)
    assert code == 2
    assert "line 3: func_type 7 is outside 0..4" in caplog.text
