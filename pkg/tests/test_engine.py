import math

import numpy as np
import pandas as pd
import pytest

from src.core.balancer import BalancerPolicy
from src.core.engine import (
    InvocationOutcome,
    SimConfig,
    StartKind,
    _Run,
    iter_arrivals,
    latency_of,
    mean_intensity,
    place_in_container,
    run,
    run_sweep,
    simulate,
    spread_arrivals,
    tick_watt_seconds,
)
from src.core.model import FunctionDef, Mode, ServerState, ServerValidationError, make_containers
from src.core.processing import build_topology
from src.core.traces import (
    CarbonTrace,
    FunctionTrace,
    LocationConfig,
    SolarTrace,
    TraceBundle,
)
from src.database.synthetic import DEFAULT_LOCATIONS, build_trace_bundle

LOC = LocationConfig("loc-a", 1000, 0, battery_wh=10, servers=1)


def make_trace(counts, exec_time: float = 1.0, n: int | None = None) -> FunctionTrace:
    counts = np.asarray(counts)
    n = counts.shape[1] if n is None else n
    functions = tuple(FunctionDef(f"fn-{i:04d}", 0, exec_time) for i in range(n))
    return FunctionTrace(functions, counts)


def make_config(mode=Mode.GRID_CONNECTED, policy=BalancerPolicy.OPENWHISK, **kw) -> SimConfig:
    locations = kw.pop("locations", (LOC,))
    servers = kw.pop("servers", None) or build_topology(locations)
    values = {"seed": 1, "duration": 60, "stagger_arrivals": False}
    values.update(kw)
    return SimConfig(mode=mode, policy=policy, servers=servers, locations=locations, **values)


def flat_carbon(moer: float = 1000.0, location_id: str = "loc-a") -> dict[str, CarbonTrace]:
    return {location_id: CarbonTrace(location_id, [0], [moer])}


def dark_then_sunny(sunrise: int | None = None) -> dict[str, SolarTrace]:
    if sunrise is None:
        return {"loc-a": SolarTrace("loc-a", [0], [0.0])}
    return {"loc-a": SolarTrace("loc-a", [0, sunrise], [0.0, 500.0])}


def short_bundle(locations, seconds: int = 1800, profile: str = "rare", seed: int = 1):
    return build_trace_bundle(locations, profile, seconds, seed)


# containers and arrivals


def test_place_in_container_warm_cold_and_full():
    s = ServerState("s", "loc-a", 0.1, 40.0, 340.0, containers=make_containers(2))
    assert place_in_container(s, 1, 0.0, until=5.0) is StartKind.COLD
    assert place_in_container(s, 1, 1.0, until=5.0) is StartKind.COLD
    assert place_in_container(s, 1, 2.0) is StartKind.NO_CAPACITY
    assert place_in_container(s, 1, 5.0) is StartKind.WARM
    assert place_in_container(s, 3, 5.0) is StartKind.COLD
    assert [c.current_type for c in s.containers] == [3, 1]


def test_place_in_container_prefers_untyped_slot():
    s = ServerState("s", "loc-a", 0.1, 40.0, 340.0)
    s.containers[0].current_type = 4
    assert place_in_container(s, 2, 0.0) is StartKind.COLD
    assert [c.current_type for c in s.containers] == [4, 2, None]


def test_place_in_container_rejects_offline_server():
    s = ServerState("s", "loc-a", 0.1, 40.0, 340.0, online=False)
    with pytest.raises(ValueError):
        place_in_container(s, 0, 0.0)


@pytest.mark.parametrize(
    "count,expected",
    [
        (60, list(range(60))),
        (15, list(range(0, 60, 4))),
        (0, []),
        (2, [120, 150]),
    ],
)
def test_spread_arrivals(count, expected):
    minute = 2 if count == 2 else 0
    assert spread_arrivals(count, minute) == expected


def test_spread_arrivals_offset_stays_in_minute():
    assert spread_arrivals(3, 1, offset=50) == [70, 90, 110]


@pytest.mark.parametrize("chunk_minutes", [1, 4, 60])
def test_iter_arrivals_matches_per_minute_spread(chunk_minutes):
    rng = np.random.default_rng(3)
    counts = rng.integers(0, 9, size=(10, 4))
    counts[3] = 0
    offsets = [0, 17, 59, 30]
    duration = 9 * 60 + 25

    expected = []
    for m in range(10):
        minute = []
        for i in range(4):
            minute.extend((a, i) for a in spread_arrivals(int(counts[m, i]), m, offsets[i]))
        expected.extend(sorted(minute))
    expected = [(a, i) for a, i in expected if a < duration]

    got = list(iter_arrivals(counts, offsets, duration, chunk_minutes=chunk_minutes))
    assert got == expected


def test_iter_arrivals_empty_trace():
    assert list(iter_arrivals(np.zeros((3, 2), dtype=int), [0, 0], 180)) == []
    with pytest.raises(ValueError):
        list(iter_arrivals(np.ones((1, 1), dtype=int), [0], 60, chunk_minutes=0))


def test_tick_watt_seconds_matches_per_tick_overlap():
    rng = np.random.default_rng(11)
    n_ticks, tick = 40, 2
    horizon = n_ticks * tick
    start = rng.uniform(0, horizon - 1, size=200)
    end = np.minimum(start + rng.uniform(0, 15, size=200), horizon)
    end[:5] = start[:5]
    end[5] = horizon
    loc = rng.integers(0, 3, size=200)
    watts = rng.uniform(1, 100, size=200)

    expected = np.zeros((3, n_ticks))
    for li, s, e, w in zip(loc, start, end, watts, strict=True):
        for ti in range(n_ticks):
            overlap = min(e, (ti + 1) * tick) - max(s, ti * tick)
            if overlap > 0:
                expected[li, ti] += w * overlap

    got = tick_watt_seconds(loc, start, end, watts, 3, n_ticks, tick)
    assert got == pytest.approx(expected, abs=1e-6)
    assert got.sum() == pytest.approx(float((watts * (end - start)).sum()))


def test_mean_intensity_weights_ticks_by_overlap():
    moer = np.array([[1000.0, 2000.0, 3000.0], [500.0, 500.0, 500.0]])
    loc = np.array([0, 0, 1, 0])
    start = np.array([0.0, 0.5, 1.0, 2.0])
    end = np.array([1.5, 0.5, 3.0, 3.0])
    got = mean_intensity(moer, 1, loc, start, end)
    assert got.tolist() == pytest.approx([4000 / 3, 0.0, 500.0, 3000.0])


@pytest.mark.parametrize(
    "outcome,expected",
    [
        (InvocationOutcome(0.0, StartKind.WARM, 1.0), 1.005),
        (InvocationOutcome(0.0, StartKind.COLD, 1.0), 1.5),
        (InvocationOutcome(60.0, StartKind.WARM, 1.0), 61.005),
    ],
)
def test_latency_of(outcome, expected):
    assert latency_of(outcome) == pytest.approx(expected)


def test_latency_of_no_capacity():
    with pytest.raises(ValueError):
        latency_of(InvocationOutcome(0.0, StartKind.NO_CAPACITY, 1.0))


# config validation


@pytest.mark.parametrize(
    "overrides",
    [
        {"tick": 7},
        {"duration": 0},
        {"duration": 61, "tick": 2},
        {"seed": -1},
        {"profile_delay": -1},
        {"profile_period": 0},
    ],
)
def test_sim_config_rejects_bad_values(overrides):
    with pytest.raises(ValueError):
        make_config(**overrides)


def test_sim_config_rejects_bad_topology():
    s = ServerState("s", "loc-a", 0.1, 40.0, 340.0)
    with pytest.raises(ValueError, match="unique"):
        make_config(servers=[s, s.clone()])
    with pytest.raises(ValueError, match="unknown location"):
        make_config(servers=[ServerState("s", "nowhere", 0.1, 40.0, 340.0)])
    with pytest.raises(ValueError, match="containers"):
        make_config(servers=[s], containers_per_server=2)
    with pytest.raises(ServerValidationError):
        make_config(servers=[ServerState("s", "loc-a", 1.0, 40.0, 340.0)])


def test_missing_traces_are_errors():
    config = make_config()
    with pytest.raises(ValueError, match="function trace"):
        simulate(config, TraceBundle(functions=None, carbon=flat_carbon()))
    with pytest.raises(ValueError, match="covers"):
        simulate(make_config(duration=120), TraceBundle(make_trace([[0]]), flat_carbon()))
    with pytest.raises(ValueError, match="carbon"):
        simulate(config, TraceBundle(make_trace([[0]])))
    with pytest.raises(ValueError, match="solar"):
        simulate(make_config(Mode.GRID_ISOLATED), TraceBundle(make_trace([[0]])))


def test_function_type_outside_configured_range_is_rejected():
    functions = (FunctionDef("fn-0000", 0, 1.0), FunctionDef("fn-0001", 9, 1.0))
    traces = TraceBundle(FunctionTrace(functions, [[1, 1]]), flat_carbon())
    with pytest.raises(ValueError, match="fn-0001.*func_type 9"):
        simulate(make_config(num_function_types=5), traces)
    assert run(make_config(num_function_types=10), traces).executed == 2


# grid-connected accounting


def test_idle_only_run_emits_idle_power():
    traces = TraceBundle(make_trace(np.zeros((60, 1))), flat_carbon(1000.0))
    m = run(make_config(duration=3600), traces)
    assert m.submitted == m.executed == 0
    assert m.total_energy_wh == pytest.approx(40.0)
    assert m.total_emissions_lbs == pytest.approx(0.04)
    assert m.hourly_emissions_lbs == pytest.approx((0.04,))
    assert m.downtime_s == 0.0


def test_single_cold_invocation():
    traces = TraceBundle(make_trace([[1]]), flat_carbon(1000.0))
    result = simulate(make_config(), traces)
    m = result.metrics
    assert (m.submitted, m.executed, m.cold_starts, m.warm_starts) == (1, 1, 1, 0)
    assert m.latency_mean_s == pytest.approx(1.5)
    assert m.total_energy_wh == pytest.approx(40 * 60 / 3600 + 100 / 3600)

    inv = result.events[result.events["event"] == "invocation"].iloc[0]
    assert inv["server_id"] == "loc-a-0"
    assert inv["status"] == "completed"
    assert inv["energy_wh"] == pytest.approx(100 / 3600)
    assert inv["emissions_lbs"] == pytest.approx(100 / 3600 / 1e6 * 1000)


def test_second_invocation_is_warm():
    traces = TraceBundle(make_trace([[2]]), flat_carbon())
    m = run(make_config(), traces)
    assert (m.cold_starts, m.warm_starts) == (1, 1)
    assert m.latency_p50_s == pytest.approx((1.5 + 1.005) / 2)


def test_busy_server_enqueues_and_retries_warm():
    s = ServerState("s", "loc-a", 0.1, 40.0, 340.0, mem_limit=1, containers=make_containers(1))
    config = make_config(duration=120, servers=[s], containers_per_server=1)
    traces = TraceBundle(make_trace([[1, 1], [0, 0]]), flat_carbon())
    result = simulate(config, traces)
    m = result.metrics
    assert (m.submitted, m.executed, m.retries, m.queued_at_end) == (2, 2, 1, 0)
    assert (m.cold_starts, m.warm_starts) == (1, 1)

    retried = result.events[(result.events["event"] == "invocation") & (result.events["retries"] == 1)]
    assert retried["latency_s"].tolist() == pytest.approx([61.005])
    assert retried["start"].tolist() == [60.0]


def test_requests_fail_after_max_retries():
    s = ServerState("s", "loc-a", 0.1, 40.0, 340.0, mem_limit=1, containers=make_containers(1))
    config = make_config(duration=300, servers=[s], containers_per_server=1)
    # one long job holds the only container for the whole run
    functions = (FunctionDef("fn-0000", 0, 1000.0), FunctionDef("fn-0001", 0, 1.0))
    counts = np.zeros((5, 2))
    counts[0] = [1, 1]
    result = simulate(config, TraceBundle(FunctionTrace(functions, counts), flat_carbon()))
    m = result.metrics
    assert (m.executed, m.failed_invocations, m.retries) == (1, 1, 3)
    failed = result.events[result.events["event"] == "failed"]
    assert failed["function_id"].tolist() == ["fn-0001"]
    assert failed["tick"].tolist() == [180]


def test_emissions_follow_intensity_during_the_run():
    carbon = {"loc-a": CarbonTrace("loc-a", [0, 1], [1000.0, 2000.0])}
    traces = TraceBundle(make_trace([[1]], exec_time=1.5), carbon)
    result = simulate(make_config(), traces)

    inv = result.events[result.events["event"] == "invocation"].iloc[0]
    # one second at 1000 lbs/MWh, half a second at 2000
    assert inv["energy_wh"] == pytest.approx(100 * 1.5 / 3600)
    assert inv["emissions_lbs"] == pytest.approx(100 * (1000 + 0.5 * 2000) / 3600 / 1e6)
    m = result.metrics
    assert math.fsum(m.hourly_emissions_lbs) == pytest.approx(m.total_emissions_lbs)


def test_grid_run_skips_ticks_without_work():
    counts = np.zeros((24 * 60, 1))
    counts[::60] = 1
    traces = TraceBundle(make_trace(counts), flat_carbon())
    run_state = _Run(make_config(duration=24 * 3600), traces, 0)
    m = run_state.execute().metrics
    assert m.executed == 24
    # one visit per arrival
    assert run_state.ticks_visited == 24
    assert m.total_energy_wh == pytest.approx(40 * 24 + 24 * 100 / 3600)


def test_work_past_horizon_is_not_counted():
    traces = TraceBundle(make_trace([[1]], exec_time=100.0), flat_carbon())
    m = run(make_config(duration=60), traces)
    assert m.total_energy_wh == pytest.approx(40 * 60 / 3600 + 100 * 60 / 3600)


def test_energy_aware_policy_waits_for_first_profile():
    traces = TraceBundle(make_trace([[1], [0]]), flat_carbon())
    m = run(make_config(policy=BalancerPolicy.GREEDY, duration=120, profile_delay=500), traces)
    assert (m.executed, m.queued_at_end) == (0, 1)


def test_sweep_attaches_baseline():
    locations = DEFAULT_LOCATIONS[:2]
    traces = short_bundle(locations, 1200)
    config = make_config(locations=locations, duration=1200, stagger_arrivals=True)
    results = run_sweep(config, traces, ["greedy", "carbon-aware"])
    assert list(results) == [BalancerPolicy.GREEDY, BalancerPolicy.CARBON_AWARE]
    baseline = run(config, traces)
    for m in results.values():
        assert m.baseline_emissions_lbs == pytest.approx(baseline.total_emissions_lbs)
        assert m.emissions_avoided_vs_baseline == pytest.approx(
            baseline.total_emissions_lbs - m.total_emissions_lbs
        )
    with pytest.raises(ValueError):
        run_sweep(config, traces, [])


def test_same_seed_same_events():
    locations = DEFAULT_LOCATIONS[:3]
    traces = short_bundle(locations, 1800, profile="medium")
    config = make_config(
        locations=locations, duration=1800, policy="openwhisk", stagger_arrivals=True
    )
    a = simulate(config, traces)
    b = simulate(config, traces)
    assert a.metrics == b.metrics
    pd.testing.assert_frame_equal(a.events, b.events)


@pytest.mark.parametrize("policy", list(BalancerPolicy))
def test_request_and_emission_totals_reconcile(policy, tmp_path):
    locations = DEFAULT_LOCATIONS[:3]
    traces = short_bundle(locations, 3600, profile="high", seed=3)
    config = make_config(locations=locations, duration=3600, policy=policy, stagger_arrivals=True)
    result = simulate(config, traces)
    m = result.metrics

    assert m.submitted == m.executed + m.failed_invocations + m.queued_at_end
    assert m.executed == m.cold_starts + m.warm_starts
    assert m.downtime_s == 0.0

    path = tmp_path / "events.csv"
    result.events.to_csv(path, index=False)
    events = pd.read_csv(path)
    assert abs(events["emissions_lbs"].sum() - m.total_emissions_lbs) <= 1e-6
    assert abs(math.fsum(m.hourly_emissions_lbs) - m.total_emissions_lbs) <= 1e-6
    assert (events["event"] == "invocation").sum() == m.executed


# grid-isolated


def test_battery_runs_dry_and_interrupts_work():
    traces = TraceBundle(make_trace(np.ones((5, 1)), exec_time=200.0), solar=dark_then_sunny())
    result = simulate(make_config(Mode.GRID_ISOLATED, duration=300), traces)
    m = result.metrics
    assert m.shutdown_count == 1
    assert m.restart_count == 0
    assert m.interrupted_invocations == 3
    assert m.executed == 3
    assert m.downtime_s == 141.0
    assert m.critical_battery_events == 1
    assert m.queued_at_end == 2
    assert m.submitted == m.executed + m.failed_invocations + m.queued_at_end
    assert m.total_emissions_lbs == 0.0

    events = result.events
    interrupted = events[events["status"] == "interrupted"]
    assert len(interrupted) == 3
    assert interrupted["latency_s"].isna().all()
    assert interrupted["energy_wh"].iloc[0] == pytest.approx(100 * 159 / 3600)
    assert events.loc[events["event"] == "shutdown", "tick"].tolist() == [159]


def test_sunrise_restarts_location():
    traces = TraceBundle(
        make_trace(np.ones((5, 1)), exec_time=200.0), solar=dark_then_sunny(sunrise=200)
    )
    result = simulate(make_config(Mode.GRID_ISOLATED, duration=300), traces)
    m = result.metrics
    assert (m.shutdown_count, m.restart_count) == (1, 1)
    assert m.downtime_s == 45.0
    assert m.executed == 5
    assert m.queued_at_end == 0
    assert result.events.loc[result.events["event"] == "restart", "tick"].tolist() == [204]


def test_energy_aware_policy_respects_buffer():
    traces = TraceBundle(make_trace(np.ones((5, 1)), exec_time=200.0), solar=dark_then_sunny())
    m = run(make_config(Mode.GRID_ISOLATED, BalancerPolicy.CARBON_AWARE, duration=300), traces)
    # 10 Wh with a 2 Wh buffer never offers the 100 W one invocation needs
    assert m.executed == 0
    assert m.shutdown_count == 0


def test_battery_log_conserves_energy():
    locations = [
        LocationConfig("a", 900, 230, battery_wh=200, servers=2),
        LocationConfig("b", 1000, 230, battery_wh=200, servers=2),
    ]
    traces = short_bundle(locations, 7200, profile="high", seed=5)
    config = make_config(
        Mode.GRID_ISOLATED, "openwhisk", locations=locations, duration=7200, stagger_arrivals=True
    )
    result = simulate(config, traces, battery_log_interval=1)
    log = result.battery_log
    assert len(log) == 2 * 7200

    hours = 1 / 3600
    for lid, rows in log.groupby("location_id"):
        level = np.concatenate([[200.0], rows["battery_level_wh"].to_numpy()])
        prev = level[:-1]
        charged = np.diff(np.concatenate([[0.0], rows["charged_wh"].to_numpy()]))
        discharged = np.diff(np.concatenate([[0.0], rows["discharged_wh"].to_numpy()]))
        assert np.abs(np.diff(level) - (charged - discharged)).max() <= 1e-6, lid

        # flows follow from the logged solar and load of each tick
        net = rows["solar_w"].to_numpy() - rows["load_w"].to_numpy()
        expect_charged = np.where(net >= 0, np.minimum(np.maximum(net, 0) * hours, 200.0 - prev), 0.0)
        rate = np.minimum(np.maximum(-net, 0), 1000.0)
        expect_discharged = np.where(net < 0, np.minimum(rate * hours, prev), 0.0)
        assert np.abs(charged - expect_charged).max() <= 1e-9, lid
        assert np.abs(discharged - expect_discharged).max() <= 1e-9, lid
        assert ((rows["battery_level_wh"] >= 0) & (rows["battery_level_wh"] <= 200.0)).all()
        # `online` is logged after the step; servers up during a tick draw their idle power
        online = rows["online"].to_numpy(dtype=bool)
        up = np.concatenate([[True], online[:-1]])
        assert (rows["load_w"].to_numpy()[up] >= 2 * 40.0 - 1e-9).all()

    m = result.metrics
    assert m.submitted == m.executed + m.failed_invocations + m.queued_at_end


def test_battery_log_is_isolated_only():
    traces = TraceBundle(make_trace([[1]]), flat_carbon())
    assert simulate(make_config(), traces, battery_log_interval=1).battery_log is None
    with pytest.raises(ValueError):
        simulate(make_config(), traces, battery_log_interval=-1)
