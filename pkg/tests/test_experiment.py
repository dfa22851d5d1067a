import math

import pytest

from decroute.collective import Weights
from decroute.experiment import (DEFAULT_BETAS, RESULTS_HEADER, ExperimentConfig, RunResult, StageError,
                                 SweepTable, TrafficSetting, beta_sweep, cell_seed, demand_seed,
                                 hash64, load_sweep, mine_setting_costs, normalize_cross_setting,
                                 report_rows, router_distribution, run_baselines, run_setting,
                                 write_report_csv)
from decroute.network import generate_city_grid, save_network
from decroute.plans import RouterCostTable, mine_router_costs
from decroute.routing import ROUTER_ORDER, CostMode

NET = generate_city_grid(5, 5, seed=4)
SETTING = TrafficSetting("small", NET, 60, horizon=600)


@pytest.fixture(scope="module")
def costs():
    return mine_setting_costs(SETTING, n_runs=4, seed0=1)


def test_hash64_is_stable():
    assert hash64(0, "a", 1) == hash64(0, "a", 1)
    assert hash64(0, "a", 1) != hash64(0, "a", 2)
    assert 0 <= hash64("x") < 2 ** 64
    # documented rule: BLAKE2b-64 over the 0x1f-joined parts, big-endian
    import hashlib
    assert hash64(7, "s") == int.from_bytes(hashlib.blake2b(b"7\x1fs", digest_size=8).digest(), "big")
    assert demand_seed(0, "s", 1) != cell_seed(0, "s", 0, 1)


def test_setting_validation():
    with pytest.raises(ValueError):
        TrafficSetting("bad", NET, 0)


def test_router_distribution_examples():
    assert router_distribution([CostMode.MIN_LENGTH] * 3) == (1.0, 0.0, 0.0)
    ml, ms, ba = ROUTER_ORDER
    assert router_distribution([ml, ml, ms, ba]) == (0.5, 0.25, 0.25)
    with pytest.raises(ValueError):
        router_distribution([])


def test_baselines_single_vehicle():
    setting = TrafficSetting("one", NET, 1, horizon=600)
    logs = run_baselines(setting, n_runs=1, seed0=3)
    assert len(logs) == 1
    agent, router, overhead = logs[0]
    assert agent == 0 and router in ROUTER_ORDER and overhead >= 1.0
    assert run_baselines(setting, 1, 3) == logs
    with pytest.raises(ValueError):
        run_baselines(setting, 0, 3)


def test_run_setting_selfish_uses_preferred_routers(costs):
    res, plan_sets = run_setting(SETTING, Weights(0, 1), seed=11, cost_table=costs)
    preferred = [ps.plans[ps.preferred].router for ps in plan_sets]
    assert res.router_distribution == router_distribution(preferred)
    assert math.isclose(sum(res.router_distribution), 1.0, abs_tol=1e-9)
    assert res.iterations <= 40 and res.status == "ok"
    assert res.mean_overhead >= 1.0 and math.isfinite(res.local_cost)


def test_run_setting_altruism_never_raises_global_cost(costs):
    for seed in range(3):
        a, _ = run_setting(SETTING, Weights(0, 0), seed, costs, opt_seed=seed)
        s, _ = run_setting(SETTING, Weights(0, 1), seed, costs, opt_seed=seed)
        assert a.global_cost <= s.global_cost


def test_run_setting_stage_attribution():
    empty = RouterCostTable({})
    with pytest.raises(StageError) as info:
        run_setting(SETTING, Weights(0, 0), 0, empty)
    assert info.value.stage == "plans"


def test_beta_sweep_shape_and_order(costs):
    table = beta_sweep(SETTING, costs, betas=(0.0, 0.5, 1.0), seeds=2, workers=1)
    assert [(r.beta, r.seed) for r in table.rows] == [(1.0, 0), (1.0, 1), (0.5, 0), (0.5, 1),
                                                      (0.0, 0), (0.0, 1)]
    one = beta_sweep(SETTING, costs, betas=(0.3,), seeds=1, workers=1)
    assert len(one.rows) == 1


def test_default_beta_grid():
    assert DEFAULT_BETAS == (1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1, 0.0)


def test_paired_demand_across_beta(costs):
    # same seed index -> same trips regardless of beta, so selfish runs coincide
    table = beta_sweep(SETTING, costs, betas=(1.0, 0.9), seeds=1, workers=1)
    a, b = table.rows
    assert a.mean_overhead == b.mean_overhead and a.local_cost == b.local_cost


def test_failed_cell_is_flagged_not_fatal():
    table = beta_sweep(SETTING, RouterCostTable({}), betas=(1.0,), seeds=2, workers=1)
    assert [r.status for r in table.rows] == ["failed:plans"] * 2
    assert all(math.isnan(r.mean_overhead) for r in table.rows)


def test_csv_round_trip_and_resume(tmp_path, costs):
    table = beta_sweep(SETTING, costs, betas=(1.0, 0.0), seeds=2, workers=1)
    path = tmp_path / "r.csv"
    table.write_csv(path)
    assert path.read_text().splitlines()[0] == ",".join(RESULTS_HEADER)
    again = SweepTable.read_csv(path)
    again.write_csv(tmp_path / "r2.csv")
    assert path.read_bytes() == (tmp_path / "r2.csv").read_bytes()
    # resume with every cell present recomputes nothing
    resumed = beta_sweep(SETTING, RouterCostTable({}), betas=(1.0, 0.0), seeds=2, workers=1,
                         resume=again.rows)
    resumed.write_csv(tmp_path / "r3.csv")
    assert path.read_bytes() == (tmp_path / "r3.csv").read_bytes()


def test_worker_pool_matches_serial(tmp_path, costs):
    serial = beta_sweep(SETTING, costs, betas=(1.0, 0.0), seeds=2, workers=1)
    pooled = beta_sweep(SETTING, costs, betas=(1.0, 0.0), seeds=2, workers=2)
    serial.write_csv(tmp_path / "a.csv")
    pooled.write_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_load_sweep_small(tmp_path):
    table = load_sweep(NET, loads=(20, 40), betas=(0.0, 1.0), seeds=2, horizon=400,
                       baseline_runs=2, workers=1)
    assert len(table.rows) == 2 * 2 * 2
    assert [(m["load"], m["beta"]) for m in table.medians] == [(20, 1.0), (20, 0.0), (40, 1.0),
                                                              (40, 0.0)]
    table.write_medians_csv(tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "setting,load,beta,median_overhead,median_global,median_local"
    # light load: both policies run near free flow
    for m in table.medians[:2]:
        assert 1.0 <= m["median_overhead"] < 1.2


def _row(setting, value):
    return RunResult(setting, 1.0, 0.0, 0, value, value * 2, 1.0 + value, (1.0, 0.0, 0.0), 1)


def test_normalization_pooled():
    t1 = SweepTable([_row("a", 0.1), _row("a", 0.3)])
    t2 = SweepTable([_row("b", 0.5)])
    pooled = normalize_cross_setting([t1, t2])
    lo, hi = pooled.normalization["local_cost"]
    assert (lo, hi) == (0.1, 0.5)
    norm = pooled.normalized("local_cost")
    assert norm[0] == 0.0 and norm[-1] == 1.0
    for r, v in zip(pooled.rows, norm):
        assert 0.0 <= v <= 1.0
        assert math.isclose(lo + v * (hi - lo), r.local_cost, rel_tol=1e-12)


def test_normalization_range_zero(tmp_path):
    pooled = normalize_cross_setting([SweepTable([_row("a", 0.2), _row("a", 0.2)])])
    assert pooled.normalized("mean_overhead") == [0.0, 0.0]
    pooled.write_normalized_csv(tmp_path / "n.csv")
    pooled.write_normalization_csv(tmp_path / "meta.csv")
    header = (tmp_path / "n.csv").read_text().splitlines()[0]
    assert header.endswith("local_cost_norm,global_cost_norm,mean_overhead_norm")
    assert (tmp_path / "meta.csv").read_text().splitlines()[0] == "metric,min,max,range"


def test_report_rows():
    table = SweepTable([_row("a", 0.1), _row("a", 0.3)],
                       medians=[{"setting": "a", "load": 100, "beta": 0.0, "median_overhead": 1.1,
                                 "median_global": 0.2, "median_local": 0.3}])
    rows = report_rows(table)
    figures = {r[0] for r in rows}
    assert figures == {"beta", "routers", "load"}
    assert ["routers", "a", "1.0", "minlength", "share", "1.0"] in rows


def test_config_round_trip(tmp_path):
    save_network(NET, tmp_path / "net.json")
    cfg = ExperimentConfig(settings=[{"label": "s", "network": "net.json", "vehicles": 10}],
                           master_seed=5, seeds=2)
    (tmp_path / "cfg.json").write_text(cfg.to_json())
    loaded = ExperimentConfig.from_json(tmp_path / "cfg.json")
    assert loaded.master_seed == 5 and loaded.sim == cfg.sim
    (setting,) = loaded.traffic_settings()
    assert setting.vehicles == 10 and setting.network.edge_count == NET.edge_count
    (tmp_path / "bad.json").write_text('{"bogus": 1}')
    with pytest.raises(ValueError, match="bogus"):
        ExperimentConfig.from_json(tmp_path / "bad.json")
