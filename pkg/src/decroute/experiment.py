"""Study orchestration: baseline cost mining, beta sweeps, load sweeps, reporting.

Seeds
-----
Every random stream is derived from a master seed with ``hash64``: the first
8 bytes (big-endian) of BLAKE2b over the ``\\x1f``-joined string forms of the
parts. A sweep cell uses two streams:

* demand/simulation: ``hash64(master, label, "demand", seed_index)``; shared by
  all beta values so runs with the same seed index see the same trips;
* optimizer tree: ``hash64(master, label, beta_index, seed_index)``.

Baseline run ``k`` uses ``hash64(master, label, "baseline", k)``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .collective import Selections, Weights, optimize
from .demand import (build_districts, read_population_csv, sample_trips,
                     sample_uniform_trips)
from .mesosim import (EmptyResultError, SimConfig, Simulation, make_respawner,
                      mean_first_trip_overhead)
from .network import RoadNetwork, load_network
from .plans import (AgentPlanSet, RouterCostTable, build_plan_sets,
                    mine_router_costs)
from .routing import ROUTER_ORDER, CostMode, candidate_routes, shortest_route

log = logging.getLogger(__name__)

DEFAULT_BETAS = tuple(round(1.0 - 0.1 * k, 1) for k in range(11))
DEFAULT_LOADS = tuple(range(100, 1501, 100))

RESULTS_HEADER = ["setting", "beta", "alpha", "seed", "local_cost", "global_cost",
                  "mean_overhead", "frac_minlength", "frac_maxspeed", "frac_balanced",
                  "iterations", "status"]
MEDIANS_HEADER = ["setting", "load", "beta", "median_overhead", "median_global", "median_local"]
METRICS = ("local_cost", "global_cost", "mean_overhead")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage


def hash64(*parts) -> int:
    digest = hashlib.blake2b("\x1f".join(str(p) for p in parts).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big")


def demand_seed(master: int, label: str, seed_index: int) -> int:
    return hash64(master, label, "demand", seed_index)


def cell_seed(master: int, label: str, beta_index: int, seed_index: int) -> int:
    return hash64(master, label, beta_index, seed_index)


def baseline_seed(master: int, label: str, run: int) -> int:
    return hash64(master, label, "baseline", run)


@dataclass
class SimConstants:
    vehicle_length: float = 5.0
    min_gap: float = 2.5
    speed_floor: float = 0.1
    teleport_after: int | None = 300
    head_of_line: bool = False

    def sim_config(self, **overrides) -> SimConfig:
        return SimConfig(vehicle_length=self.vehicle_length, min_gap=self.min_gap,
                         speed_floor=self.speed_floor, teleport_after=self.teleport_after,
                         head_of_line=self.head_of_line, **overrides)


@dataclass
class OptimizerConstants:
    fanout: int = 2
    max_iterations: int = 40
    alpha: float = 0.0


@dataclass
class TrafficSetting:
    label: str
    network: RoadNetwork
    vehicles: int
    horizon: int = 1800
    population: list | None = None
    cell_size: float = 1000.0

    def __post_init__(self):
        if self.vehicles < 1 or self.horizon < 1:
            raise ValueError(f"setting {self.label!r}: vehicles and horizon must be >= 1")

    def sample(self, seed: int, vehicle_length: float) -> list[tuple[str, str]]:
        if self.population:
            grid = build_districts(self.population, self.network, self.cell_size, vehicle_length)
            return sample_trips(grid, self.network, self.vehicles, seed, vehicle_length)
        return sample_uniform_trips(self.network, self.vehicles, seed, vehicle_length)


@dataclass
class RunResult:
    setting: str
    beta: float
    alpha: float
    seed: int
    local_cost: float = math.nan
    global_cost: float = math.nan
    mean_overhead: float = math.nan
    router_distribution: tuple[float, float, float] = (math.nan, math.nan, math.nan)
    iterations: int = 0
    status: str = "ok"
    load: int | None = None
    # diagnostics kept in memory only
    min_overhead: float = math.nan
    completed_first_trips: int = 0
    teleports: int = 0
    selections: dict | None = field(default=None, repr=False)

    def csv_row(self) -> list[str]:
        return [self.setting, repr(self.beta), repr(self.alpha), str(self.seed),
                repr(self.local_cost), repr(self.global_cost), repr(self.mean_overhead),
                *(repr(f) for f in self.router_distribution), str(self.iterations), self.status]

    @classmethod
    def from_csv(cls, row: dict) -> "RunResult":
        return cls(row["setting"], float(row["beta"]), float(row["alpha"]), int(row["seed"]),
                   float(row["local_cost"]), float(row["global_cost"]), float(row["mean_overhead"]),
                   (float(row["frac_minlength"]), float(row["frac_maxspeed"]),
                    float(row["frac_balanced"])),
                   int(row["iterations"]), row["status"])


@dataclass
class SweepTable:
    rows: list[RunResult]
    normalization: dict[str, tuple[float, float]] = field(default_factory=dict)
    medians: list[dict] = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(RESULTS_HEADER)
            w.writerows(r.csv_row() for r in self.rows)

    @classmethod
    def read_csv(cls, path) -> "SweepTable":
        with open(path, newline="") as fh:
            return cls([RunResult.from_csv(r) for r in csv.DictReader(fh)])

    def write_medians_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(MEDIANS_HEADER)
            for m in self.medians:
                w.writerow([m["setting"], m["load"], repr(m["beta"]), repr(m["median_overhead"]),
                            repr(m["median_global"]), repr(m["median_local"])])

    def normalized(self, metric: str) -> list[float]:
        lo, hi = self.normalization[metric]
        span = hi - lo
        vals = [getattr(r, metric) for r in self.rows]
        if span <= 0:
            return [0.0 if math.isfinite(v) else math.nan for v in vals]
        return [(v - lo) / span for v in vals]

    def write_normalized_csv(self, path) -> None:
        norms = {m: self.normalized(m) for m in METRICS}
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(RESULTS_HEADER + [f"{m}_norm" for m in METRICS])
            for i, r in enumerate(self.rows):
                w.writerow(r.csv_row() + [repr(norms[m][i]) for m in METRICS])

    def write_normalization_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "min", "max", "range"])
            for m in METRICS:
                lo, hi = self.normalization[m]
                w.writerow([m, repr(lo), repr(hi), repr(hi - lo)])


def router_distribution(selected_routers: Iterable[CostMode]) -> tuple[float, float, float]:
    counts = {m: 0 for m in ROUTER_ORDER}
    for m in selected_routers:
        counts[CostMode.parse(m)] += 1
    total = sum(counts.values())
    if total == 0:
        raise ValueError("no selections")
    return tuple(counts[m] / total for m in ROUTER_ORDER)


def run_baselines(setting: TrafficSetting, n_runs: int = 100, seed0: int = 0,
                  sim: SimConstants | None = None,
                  check_invariants: bool = False) -> list[tuple[int, CostMode, float]]:
    """Random-router runs without optimization; one record per completed first trip."""
    if n_runs < 1:
        raise ValueError("n_runs must be at least 1")
    sim = sim or SimConstants()
    net = setting.network
    records = []
    for k in range(n_runs):
        seed = baseline_seed(seed0, setting.label, k)
        trips = setting.sample(seed, sim.vehicle_length)
        rng = np.random.default_rng(hash64(seed, "routers"))
        modes = [ROUTER_ORDER[int(i)] for i in rng.integers(3, size=len(trips))]
        routes = [shortest_route(net, o, d, m) for (o, d), m in zip(trips, modes)]
        out = Simulation(net, routes, seed, make_respawner(net, modes, sim.vehicle_length),
                         sim.sim_config(stop_after_first_trips=True,
                                        check_invariants=check_invariants)).run(setting.horizon)
        records.extend((t.vehicle, modes[t.vehicle], t.overhead) for t in out.first_trips)
    return records


def mine_setting_costs(setting: TrafficSetting, n_runs: int, seed0: int,
                       sim: SimConstants | None = None,
                       check_invariants: bool = False) -> RouterCostTable:
    records = run_baselines(setting, n_runs, seed0, sim, check_invariants)
    table = mine_router_costs(records, agents=range(setting.vehicles), impute_missing=True)
    if table.imputed:
        log.warning("%s: %d (agent, router) cost(s) imputed", setting.label, len(table.imputed))
    return table


def run_setting(setting: TrafficSetting, weights: Weights, seed: int, cost_table: RouterCostTable,
                opt_seed: int | None = None, sim: SimConstants | None = None,
                opt: OptimizerConstants | None = None, check_invariants: bool = False,
                keep_selections: bool = False) -> tuple[RunResult, list[AgentPlanSet]]:
    """One optimized run. ``seed`` drives demand and simulation, ``opt_seed`` the tree."""
    sim = sim or SimConstants()
    opt = opt or OptimizerConstants()
    net = setting.network
    opt_seed = seed if opt_seed is None else opt_seed
    result = RunResult(setting.label, weights.beta, weights.alpha, 0)

    stage = "demand"
    try:
        trips = setting.sample(seed, sim.vehicle_length)
        stage = "routing"
        routes = {a: candidate_routes(net, o, d) for a, (o, d) in enumerate(trips)}
        stage = "plans"
        if not cost_table.covers(routes):
            raise ValueError("cost table does not cover every agent")
        plan_sets = build_plan_sets(net, routes, cost_table, setting.horizon, sim.vehicle_length)
        stage = "optimize"
        selections, trace = optimize(plan_sets, weights, opt_seed, opt.max_iterations, opt.fanout)
        stage = "simulate"
        chosen = [ps.plans[selections.choice[ps.agent]] for ps in plan_sets]
        preferred = [ps.plans[ps.preferred].router for ps in plan_sets]
        simulation = Simulation(net, [p.route for p in chosen], seed,
                                make_respawner(net, preferred, sim.vehicle_length),
                                sim.sim_config(stop_after_first_trips=True,
                                               check_invariants=check_invariants))
        out = simulation.run(setting.horizon)
    except Exception as exc:
        raise StageError(stage, exc) from exc

    final = trace[-1]
    result.local_cost = final.local_cost
    result.global_cost = final.global_cost
    result.router_distribution = router_distribution(p.router for p in chosen)
    result.iterations = len(trace) - 1
    result.completed_first_trips = out.completed_first_trips
    result.teleports = simulation.teleports
    if keep_selections:
        result.selections = dict(selections.choice)
    try:
        result.mean_overhead = mean_first_trip_overhead(out)
        result.min_overhead = min(t.overhead for t in out.trips)
    except EmptyResultError:
        result.status = "no_trips"
    return result, plan_sets


@dataclass
class _Cell:
    setting: TrafficSetting
    beta: float
    alpha: float
    beta_index: int
    seed_index: int
    master: int
    cost_table: RouterCostTable
    sim: SimConstants
    opt: OptimizerConstants
    check_invariants: bool = False
    load: int | None = None


def _run_cell(cell: _Cell) -> RunResult:
    label = cell.setting.label
    try:
        res, _ = run_setting(cell.setting, Weights(cell.alpha, cell.beta),
                             demand_seed(cell.master, label, cell.seed_index),
                             cell.cost_table,
                             opt_seed=cell_seed(cell.master, label, cell.beta_index, cell.seed_index),
                             sim=cell.sim, opt=cell.opt, check_invariants=cell.check_invariants)
    except StageError as exc:
        log.error("%s beta=%s seed=%d failed: %s", label, cell.beta, cell.seed_index, exc)
        res = RunResult(label, cell.beta, cell.alpha, 0, status=f"failed:{exc.stage}")
    res.seed = cell.seed_index
    res.load = cell.load
    return res


def _execute(cells: Sequence[_Cell], workers: int | None) -> list[RunResult]:
    workers = workers or os.cpu_count() or 1
    if workers <= 1 or len(cells) <= 1:
        return [_run_cell(c) for c in cells]
    with ProcessPoolExecutor(max_workers=min(workers, len(cells))) as pool:
        # map preserves submission order, so output order never depends on timing
        return list(pool.map(_run_cell, cells))


def _key(r: RunResult) -> tuple[str, str, int]:
    return (r.setting, repr(r.beta), r.seed)


def beta_sweep(setting: TrafficSetting, cost_table: RouterCostTable,
               betas: Sequence[float] = DEFAULT_BETAS, seeds: int = 5, master_seed: int = 0,
               sim: SimConstants | None = None, opt: OptimizerConstants | None = None,
               workers: int | None = None, check_invariants: bool = False,
               resume: Sequence[RunResult] = ()) -> SweepTable:
    """All (beta, seed) cells for one setting, sorted by beta descending then seed."""
    sim = sim or SimConstants()
    opt = opt or OptimizerConstants()
    done = {_key(r): r for r in resume if r.status == "ok"}
    cells, reused = [], {}
    for bi, beta in enumerate(betas):
        for si in range(seeds):
            key = (setting.label, repr(float(beta)), si)
            if key in done:
                reused[key] = done[key]
                continue
            cells.append(_Cell(setting, float(beta), opt.alpha, bi, si, master_seed, cost_table,
                               sim, opt, check_invariants))
    rows = list(reused.values()) + _execute(cells, workers)
    rows.sort(key=lambda r: (-r.beta, r.seed))
    return SweepTable(rows)


def _median(values: list[float]) -> float:
    values = [v for v in values if math.isfinite(v)]
    return statistics.median(values) if values else math.nan


def load_sweep(network: RoadNetwork, loads: Sequence[int] = DEFAULT_LOADS,
               betas: Sequence[float] = (0.0, 1.0), seeds: int = 5, horizon: int = 800,
               master_seed: int = 0, baseline_runs: int = 100, label: str = "load",
               sim: SimConstants | None = None, opt: OptimizerConstants | None = None,
               workers: int | None = None, check_invariants: bool = False) -> SweepTable:
    """Beta comparison across vehicle counts with uniform origins and destinations.

    Each load is its own traffic setting (label ``f"{label}/n{load}"``) with
    its own mined cost table.
    """
    sim = sim or SimConstants()
    opt = opt or OptimizerConstants()
    rows: list[RunResult] = []
    medians = []
    for load in loads:
        setting = TrafficSetting(f"{label}/n{load}", network, load, horizon)
        table = mine_setting_costs(setting, baseline_runs, master_seed, sim, check_invariants)
        cells = [_Cell(setting, float(b), opt.alpha, bi, si, master_seed, table, sim, opt,
                       check_invariants, load)
                 for bi, b in enumerate(betas) for si in range(seeds)]
        part = _execute(cells, workers)
        part.sort(key=lambda r: (-r.beta, r.seed))
        rows.extend(part)
        for b in sorted({float(b) for b in betas}, reverse=True):
            sub = [r for r in part if r.beta == b]
            medians.append({
                "setting": setting.label, "load": load, "beta": b,
                "median_overhead": _median([r.mean_overhead for r in sub]),
                "median_global": _median([r.global_cost for r in sub]),
                "median_local": _median([r.local_cost for r in sub]),
            })
    return SweepTable(rows, medians=medians)


def normalize_cross_setting(tables: Sequence[SweepTable]) -> SweepTable:
    """Pool rows of all tables and min-max normalize each metric over the pool."""
    if not tables:
        raise ValueError("need at least one table")
    rows = [r for t in tables for r in t.rows]
    norm = {}
    for m in METRICS:
        vals = [getattr(r, m) for r in rows if math.isfinite(getattr(r, m))]
        norm[m] = (min(vals), max(vals)) if vals else (math.nan, math.nan)
    medians = [m for t in tables for m in t.medians]
    return SweepTable(rows, norm, medians)


REPORT_HEADER = ["figure", "setting", "x", "series", "metric", "value"]


def report_rows(table: SweepTable) -> list[list[str]]:
    """Plot-ready long format.

    ``beta``: one point per run (x = beta, series = seed), normalized metrics;
    ``routers``: mean router share per (setting, beta);
    ``load``: per-(load, beta) medians (x = load, series = beta).
    """
    if not table.normalization:
        table = normalize_cross_setting([table])
    out = []
    norms = {m: table.normalized(m) for m in METRICS}
    for i, r in enumerate(table.rows):
        for m in METRICS:
            out.append(["beta", r.setting, repr(r.beta), str(r.seed), m, repr(norms[m][i])])
    groups: dict[tuple[str, float], list[RunResult]] = {}
    for r in table.rows:
        if r.status == "ok":
            groups.setdefault((r.setting, r.beta), []).append(r)
    for (setting, beta), rs in groups.items():
        for k, mode in enumerate(ROUTER_ORDER):
            share = math.fsum(r.router_distribution[k] for r in rs) / len(rs)
            out.append(["routers", setting, repr(beta), mode.value, "share", repr(share)])
    for m in table.medians:
        for metric in ("median_overhead", "median_global", "median_local"):
            out.append(["load", m["setting"], str(m["load"]), repr(m["beta"]), metric, repr(m[metric])])
    return out


def write_report_csv(table: SweepTable, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        w.writerows(report_rows(table))


@dataclass
class ExperimentConfig:
    """JSON-backed study configuration.

    Setting entries: ``{"label", "network", "vehicles", "horizon",
    "population", "cell_size"}`` where ``network``/``population`` are paths
    relative to the config file (``population`` optional).
    """

    settings: list[dict] = field(default_factory=list)
    master_seed: int = 0
    betas: list[float] = field(default_factory=lambda: list(DEFAULT_BETAS))
    seeds: int = 5
    baseline_runs: int = 100
    loads: list[int] = field(default_factory=lambda: list(DEFAULT_LOADS))
    load_betas: list[float] = field(default_factory=lambda: [0.0, 1.0])
    load_horizon: int = 800
    load_network: str | None = None
    sim: SimConstants = field(default_factory=SimConstants)
    optimizer: OptimizerConstants = field(default_factory=OptimizerConstants)
    workers: int | None = None
    base_dir: Path = field(default=Path("."), repr=False)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        path = Path(path)
        doc = json.loads(path.read_text())
        sim = SimConstants(**doc.pop("sim", {}))
        optc = OptimizerConstants(**doc.pop("optimizer", {}))
        unknown = set(doc) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown config key(s): {sorted(unknown)}")
        return cls(**doc, sim=sim, optimizer=optc, base_dir=path.parent)

    def to_json(self) -> str:
        doc = asdict(self)
        doc.pop("base_dir")
        return json.dumps(doc, indent=2)

    def resolve(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else self.base_dir / q

    def traffic_settings(self) -> list[TrafficSetting]:
        out = []
        for s in self.settings:
            net = load_network(self.resolve(s["network"]))
            pop = read_population_csv(self.resolve(s["population"])) if s.get("population") else None
            out.append(TrafficSetting(s["label"], net, int(s["vehicles"]), int(s.get("horizon", 1800)),
                                      pop, float(s.get("cell_size", 1000.0))))
        return out
