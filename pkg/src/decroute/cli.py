"""Command-line entry point (``decroute <subcommand>``)."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import experiment as ex
from .collective import Weights, optimize, write_trace_csv
from .demand import (build_districts, compute_fleet_size, read_population_csv, sample_trips,
                     sample_uniform_trips, write_trips_csv)
from .mesosim import SimConfig, make_respawner
from .mesosim import run as run_sim
from .network import (NetworkStats, generate_city_grid, generate_grid, load_network, network_stats,
                      save_network)
from .plans import RouterCostTable, build_plan_sets, mine_router_costs, write_baseline_csv
from .routing import CostMode, candidate_routes, shortest_route


def _read_trips(path) -> list[tuple[str, str]]:
    with open(path, newline="") as fh:
        return [(r["origin_edge"], r["dest_edge"]) for r in csv.DictReader(fh)]


def cmd_grid(args) -> int:
    if args.city:
        net = generate_city_grid(args.rows, args.cols, args.edge_length, seed=args.seed,
                                 lanes=args.lanes)
    else:
        net = generate_grid(args.rows, args.cols, args.edge_length, args.speed, args.lanes)
    save_network(net, args.out)
    return 0


def cmd_stats(args) -> int:
    print(NetworkStats.CSV_HEADER)
    print(network_stats(load_network(args.net)).csv_row())
    return 0


def cmd_route(args) -> int:
    net = load_network(args.net)
    route = shortest_route(net, args.origin, args.dest, CostMode.parse(args.mode))
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["step", "edge", "length_m", "max_speed_mps"])
    for i, eid in enumerate(route.edges):
        e = net.edges[eid]
        w.writerow([i, eid, repr(e.length), repr(e.max_speed)])
    w.writerow(["total", len(route.edges), repr(route.total_length), repr(route.free_flow_time)])
    return 0


def cmd_demand(args) -> int:
    net = load_network(args.net)
    if args.pop:
        grid = build_districts(read_population_csv(args.pop), net, args.cell)
        trips = sample_trips(grid, net, args.n, args.seed)
    else:
        trips = sample_uniform_trips(net, args.n, args.seed)
    write_trips_csv(trips, args.out)
    return 0


def cmd_fleet(args) -> int:
    size = compute_fleet_size(args.population, args.share, args.periods)
    print(f"{size.cars},{size.exact!r}")
    return 0


def cmd_simulate(args) -> int:
    net = load_network(args.net)
    mode = CostMode.parse(args.mode)
    routes = [shortest_route(net, o, d, mode) for o, d in _read_trips(args.trips)]
    config = SimConfig(record_occupancy=bool(args.dump_occupancy),
                       check_invariants=args.check_invariants)
    respawn = make_respawner(net, [mode] * len(routes))
    out = run_sim(net, routes, args.horizon, args.seed, respawn, config)
    out.write_trips_csv(args.out)
    if args.dump_occupancy:
        out.write_occupancy_csv(args.dump_occupancy)
    return 0


def cmd_optimize(args) -> int:
    net = load_network(args.net)
    trips = _read_trips(args.trips)
    routes = {a: candidate_routes(net, o, d) for a, (o, d) in enumerate(trips)}
    plan_sets = build_plan_sets(net, routes, RouterCostTable.read_csv(args.costs), args.horizon)
    selections, trace = optimize(plan_sets, Weights(args.alpha, args.beta), args.seed,
                                 args.max_iterations, args.fanout)
    selections.write_csv(plan_sets, args.selections)
    if args.trace:
        write_trace_csv(trace, args.trace)
    return 0


def _settings(config: ex.ExperimentConfig, label: str | None) -> list[ex.TrafficSetting]:
    settings = config.traffic_settings()
    if label is not None:
        settings = [s for s in settings if s.label == label]
        if not settings:
            raise SystemExit(f"no setting labelled {label!r} in config")
    if not settings:
        raise SystemExit("config defines no settings")
    return settings


def cmd_baseline(args) -> int:
    config = ex.ExperimentConfig.from_json(args.config)
    runs = args.runs or config.baseline_runs
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for s in _settings(config, args.setting):
        records = ex.run_baselines(s, runs, config.master_seed, config.sim)
        write_baseline_csv(records, out_dir / f"{s.label}_baseline.csv")
        table = mine_router_costs(records, agents=range(s.vehicles), impute_missing=True)
        table.write_csv(out_dir / f"{s.label}_costs.csv")
    return 0


def cmd_sweep_beta(args) -> int:
    config = ex.ExperimentConfig.from_json(args.config)
    workers = args.workers or config.workers
    resume = ex.SweepTable.read_csv(args.out).rows if args.resume and Path(args.out).exists() else []
    rows = []
    for s in _settings(config, args.setting):
        cost_path = Path(args.costs_dir) / f"{s.label}_costs.csv" if args.costs_dir else None
        if cost_path is not None and cost_path.exists():
            table = RouterCostTable.read_csv(cost_path)
        else:
            table = ex.mine_setting_costs(s, config.baseline_runs, config.master_seed, config.sim)
        sweep = ex.beta_sweep(s, table, config.betas, config.seeds, config.master_seed,
                              config.sim, config.optimizer, workers, resume=resume)
        rows.extend(sweep.rows)
    ex.SweepTable(rows).write_csv(args.out)
    return 0


def cmd_sweep_load(args) -> int:
    config = ex.ExperimentConfig.from_json(args.config)
    if not config.load_network:
        raise SystemExit("config has no load_network")
    net = load_network(config.resolve(config.load_network))
    table = ex.load_sweep(net, config.loads, config.load_betas, config.seeds, config.load_horizon,
                          config.master_seed, config.baseline_runs, args.label, config.sim,
                          config.optimizer, args.workers or config.workers)
    table.write_csv(args.out)
    table.write_medians_csv(args.medians)
    return 0


def cmd_normalize(args) -> int:
    table = ex.normalize_cross_setting([ex.SweepTable.read_csv(p) for p in args.inputs])
    table.write_normalized_csv(args.out)
    if args.meta:
        table.write_normalization_csv(args.meta)
    return 0


def _read_medians(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{"setting": r["setting"], "load": int(r["load"]), "beta": float(r["beta"]),
                 "median_overhead": float(r["median_overhead"]),
                 "median_global": float(r["median_global"]),
                 "median_local": float(r["median_local"])} for r in csv.DictReader(fh)]


def cmd_report(args) -> int:
    tables = [ex.SweepTable.read_csv(p) for p in args.inputs]
    table = ex.normalize_cross_setting(tables)
    if args.medians:
        table.medians = [m for p in args.medians for m in _read_medians(p)]
    ex.write_report_csv(table, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="decroute", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("grid", help="write a synthetic grid network")
    g.add_argument("--rows", type=int, default=10)
    g.add_argument("--cols", type=int, default=10)
    g.add_argument("--edge-length", type=float, default=100.0)
    g.add_argument("--speed", type=float, default=13.9)
    g.add_argument("--lanes", type=int, default=1)
    g.add_argument("--city", action="store_true", help="jittered grid with faster arterials")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_grid)

    s = sub.add_parser("stats", help="print network statistics as CSV")
    s.add_argument("--net", required=True)
    s.set_defaults(func=cmd_stats)

    r = sub.add_parser("route", help="shortest route between two edges")
    r.add_argument("--net", required=True)
    r.add_argument("--from", dest="origin", required=True)
    r.add_argument("--to", dest="dest", required=True)
    r.add_argument("--mode", choices=[m.value for m in CostMode], default="minlength")
    r.set_defaults(func=cmd_route)

    d = sub.add_parser("demand", help="sample origin/destination trips")
    d.add_argument("--net", required=True)
    d.add_argument("--pop", help="population CSV; uniform origins when omitted")
    d.add_argument("--cell", type=float, default=1000.0)
    d.add_argument("--n", type=int, required=True)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_demand)

    f = sub.add_parser("fleet", help="vehicles per planning period")
    f.add_argument("--population", type=float, required=True)
    f.add_argument("--share", type=float, required=True)
    f.add_argument("--periods", type=int, default=6)
    f.set_defaults(func=cmd_fleet)

    m = sub.add_parser("simulate", help="simulate trips with a single router")
    m.add_argument("--net", required=True)
    m.add_argument("--trips", required=True)
    m.add_argument("--mode", choices=[c.value for c in CostMode], default="minlength")
    m.add_argument("--horizon", type=int, default=1800)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", required=True)
    m.add_argument("--dump-occupancy")
    m.add_argument("--check-invariants", action="store_true")
    m.set_defaults(func=cmd_simulate)

    o = sub.add_parser("optimize", help="select one route per trip")
    o.add_argument("--net", required=True)
    o.add_argument("--trips", required=True)
    o.add_argument("--costs", required=True, help="agent,router,cost CSV")
    o.add_argument("--alpha", type=float, default=0.0)
    o.add_argument("--beta", type=float, default=0.0)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--horizon", type=float, default=1800.0)
    o.add_argument("--fanout", type=int, default=2)
    o.add_argument("--max-iterations", type=int, default=40)
    o.add_argument("--selections", required=True)
    o.add_argument("--trace")
    o.set_defaults(func=cmd_optimize)

    b = sub.add_parser("baseline", help="random-router runs and mined cost tables")
    b.add_argument("--config", required=True)
    b.add_argument("--setting")
    b.add_argument("--runs", type=int)
    b.add_argument("--out-dir", required=True)
    b.set_defaults(func=cmd_baseline)

    sb = sub.add_parser("sweep-beta", help="beta sweep for each configured setting")
    sb.add_argument("--config", required=True)
    sb.add_argument("--setting")
    sb.add_argument("--costs-dir", help="directory with <label>_costs.csv from `baseline`")
    sb.add_argument("--workers", type=int)
    sb.add_argument("--resume", action="store_true", help="reuse completed rows from --out")
    sb.add_argument("--out", required=True)
    sb.set_defaults(func=cmd_sweep_beta)

    sl = sub.add_parser("sweep-load", help="beta 0 vs 1 across vehicle counts")
    sl.add_argument("--config", required=True)
    sl.add_argument("--label", default="load")
    sl.add_argument("--workers", type=int)
    sl.add_argument("--out", required=True)
    sl.add_argument("--medians", required=True)
    sl.set_defaults(func=cmd_sweep_load)

    n = sub.add_parser("normalize", help="pooled min-max normalization of result tables")
    n.add_argument("inputs", nargs="+")
    n.add_argument("--out", required=True)
    n.add_argument("--meta")
    n.set_defaults(func=cmd_normalize)

    rp = sub.add_parser("report", help="plot-ready long-format CSV")
    rp.add_argument("inputs", nargs="+")
    rp.add_argument("--medians", nargs="*", default=[])
    rp.add_argument("--out", required=True)
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
