import numpy as np
import pytest

from conftest import perturb
from etadrive.errors import ConfigError, ContractError
from etadrive.models import DrivingModel
from etadrive.scheduler import (BatchPlan, CostModel, Infeasible, PipelineConfig, gantt,
                                offline_oracle, plan_schedule, run_pipeline,
                                run_pipeline_threaded, simulate_schedule, sweep)
from etadrive.toyworld import make_scenario

COSTS = CostModel()


def test_cost_model_defaults():
    assert COSTS.cost_large(1) == 54 and COSTS.cost_large(2) == 78
    assert COSTS.reactive_cost("full") == 50
    assert COSTS.reactive_cost("base") == 102
    assert COSTS.reactive_cost("no_small") == 31 == COSTS.forecast + COSTS.action
    assert COSTS.reactive_cost("gt_forecast") == 124
    assert COSTS.reactive_cost("gt_forecast_test_only") == 124
    assert COSTS.small < COSTS.cost_large(1) / 2
    with pytest.raises(ConfigError):
        CostModel(small=-1.0)
    with pytest.raises(ConfigError):
        COSTS.cost_large(0)


def test_pipeline_config_validation():
    with pytest.raises(ConfigError):
        PipelineConfig(50, 120)
    with pytest.raises(ConfigError):
        PipelineConfig(50, 500, batch_size=0)


def test_plan_examples():
    p = plan_schedule(COSTS, PipelineConfig(100, 500))
    assert isinstance(p, BatchPlan) and p.batch_size == 1 and p.worst_wait == 0
    p = plan_schedule(COSTS, PipelineConfig(50, 500))
    assert p.batch_size == 2 and p.cost_large == 78 and p.worst_wait + p.cost_large == 128
    bad = plan_schedule(COSTS, PipelineConfig(10, 40))
    assert isinstance(bad, Infeasible) and bad.binding == "staleness"
    assert "54" in bad.inequality and bad.fix


def test_reactive_budget_binds_for_base():
    p = plan_schedule(COSTS, PipelineConfig(50, 500), "base")
    assert isinstance(p, Infeasible) and p.binding == "throughput" and "102" in p.inequality


@pytest.mark.parametrize("tick,delta", [(30, 900), (40, 800), (50, 500), (50, 200), (60, 600), (100, 500), (100, 100)])
def test_plan_is_minimal(tick, delta):
    cfg = PipelineConfig(tick, delta)
    p = plan_schedule(COSTS, cfg, enforce_reactive=False)
    assert p.feasible
    b = p.batch_size
    assert COSTS.cost_large(b) <= b * tick and (b - 1) * tick + COSTS.cost_large(b) <= delta
    if b > 1:
        c = COSTS.cost_large(b - 1)
        assert c > (b - 1) * tick or (b - 2) * tick + c > delta


def test_long_run_invariants():
    cfg = PipelineConfig(50, 500)
    trace, plan = simulate_schedule(COSTS, cfg, 10_000)
    assert plan.batch_size == 2
    assert not trace.of("deadline_miss")
    fuses = [e for e in trace.of("fuse") if not e["warmup"]]
    assert len(fuses) == 10_000 - cfg.delta_ticks
    assert all(e["staleness_ms"] == 500.0 for e in fuses)
    seen = [f for e in trace.of("batch_start") for f in e["frames"]]
    assert sorted(seen) == list(range(10_000))
    times = [e["sim_time"] for e in trace.ordered()]
    assert times == sorted(times)
    s = trace.summary(50)
    assert s["deadline_misses"] == 0 and s["ticks"] == 10_000


def test_reactive_path_meets_budget_with_equality():
    trace, _ = simulate_schedule(COSTS, PipelineConfig(50, 500), 100)
    lat = {e["tick"]: e["sim_time"] - e["tick"] * 50 for e in trace.of("act_out")}
    assert set(lat.values()) == {50.0}


def test_base_mode_misses_every_tick():
    trace, _ = simulate_schedule(COSTS, PipelineConfig(50, 500), 500, mode="base")
    misses = trace.of("deadline_miss")
    assert len(misses) == 500 and {e["reason"] for e in misses} == {"budget"}


def test_forced_too_small_batch_misses():
    cfg = PipelineConfig(50, 500, batch_size=1)
    trace, plan = simulate_schedule(COSTS, cfg, 400)
    assert not plan.feasible
    assert any(e["reason"] == "stale" for e in trace.of("deadline_miss"))


def test_timeline_and_gantt():
    cfg = PipelineConfig(50, 500)
    plan = plan_schedule(COSTS, cfg)
    tl = plan.timeline(6)
    assert tl[0] == (0, 50.0, 128.0) and tl[1] == (1, 150.0, 228.0)
    trace, _ = simulate_schedule(COSTS, cfg, 24)
    text = gantt(trace, 50)
    assert text.splitlines()[1].startswith("heavy") and "0" in text


def test_sweep_rows():
    rows = sweep(COSTS)
    r = next(x for x in rows if x["tick_ms"] == 50 and x["delta_ms"] == 500)
    assert r["feasible"] and r["batch"] == 2
    assert not next(x for x in rows if x["tick_ms"] == 25 and x["delta_ms"] == 100)["feasible"]


def test_unknown_event_kind_rejected():
    trace, _ = simulate_schedule(COSTS, PipelineConfig(50, 500), 2)
    with pytest.raises(ContractError):
        trace.add(0.0, "nap")


@pytest.fixture(scope="module")
def generic_full():
    return perturb(DrivingModel("full", seed=11), seed=11)


def test_pipeline_matches_sequential_oracle(generic_full):
    ep = make_scenario("lane_change", 2)
    cfg = PipelineConfig(100, 500)
    res = run_pipeline(ep, generic_full, COSTS, cfg, max_ticks=30)
    oracle = offline_oracle(ep, generic_full, cfg.delta_ticks, max_ticks=30)
    assert len(res.actions) == len(oracle) > 0
    for a, b in zip(res.actions, oracle):
        assert np.array_equal(a.residuals(), b.residuals())
    assert res.stale_misses == 0 and res.latency_ms == 50


def test_threaded_runtime_matches_simulated(generic_full):
    ep = make_scenario("merge", 1)
    cfg = PipelineConfig(100, 500)
    sim = run_pipeline(ep, generic_full, COSTS, cfg, max_ticks=25).actions
    thr, info = run_pipeline_threaded(ep, generic_full, COSTS, cfg, max_ticks=25)
    assert info["processed"] == list(range(len(thr)))
    for a, b in zip(sim, thr):
        assert np.array_equal(a.residuals(), b.residuals())


def test_closed_loop_requires_world_tick(generic_full):
    with pytest.raises(ConfigError):
        run_pipeline(make_scenario("merge", 0), generic_full, COSTS, PipelineConfig(50, 500), max_ticks=2)
