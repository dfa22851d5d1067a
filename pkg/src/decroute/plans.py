"""Street-utilization plan vectors and router costs mined from baseline runs."""

from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .network import RoadNetwork
from .routing import ROUTER_ORDER, CostMode, Route

log = logging.getLogger(__name__)


class MiningError(ValueError):
    pass


@dataclass(frozen=True)
class SparseUtilization:
    """Nonzero entries of a plan vector over the network's global edge order."""

    indices: np.ndarray
    values: np.ndarray
    dim: int

    def dense(self) -> np.ndarray:
        out = np.zeros(self.dim)
        out[self.indices] = self.values
        return out


def encode_plan(net: RoadNetwork, route: Route, horizon: float,
                vehicle_length: float = 5.0) -> SparseUtilization:
    """Expected occupancy of each street on ``route`` over the planning horizon.

    Entry = (vehicle_length / street length) * min(1, free-flow time on street / horizon).
    The space fraction is clamped to 1 for streets shorter than a vehicle.
    """
    if horizon <= 0 or vehicle_length <= 0:
        raise ValueError("horizon and vehicle_length must be positive")
    indices = np.empty(len(route.edges), dtype=np.int64)
    values = np.empty(len(route.edges))
    for k, eid in enumerate(route.edges):
        e = net.edges[eid]
        space = vehicle_length / e.length
        if space > 1.0:
            log.debug("street %s shorter than a vehicle; space fraction clamped", eid)
            space = 1.0
        indices[k] = net.edge_index[eid]
        values[k] = space * min(1.0, e.free_flow_time / horizon)
    order = np.argsort(indices, kind="stable")
    return SparseUtilization(indices[order], values[order], net.edge_count)


@dataclass(frozen=True)
class Plan:
    utilization: SparseUtilization
    cost: float
    router: CostMode
    route: Route


@dataclass
class AgentPlanSet:
    agent: int
    plans: list[Plan]

    def __post_init__(self):
        if [p.router for p in self.plans] != list(ROUTER_ORDER):
            raise ValueError(f"agent {self.agent}: plans must follow router order {ROUTER_ORDER}")

    @property
    def costs(self) -> list[float]:
        return [p.cost for p in self.plans]

    @property
    def preferred(self) -> int:
        # min() returns the first minimum, i.e. router order on ties
        costs = self.costs
        return min(range(len(costs)), key=costs.__getitem__)


@dataclass
class RouterCostTable:
    costs: dict[tuple[int, CostMode], float]
    raw_min: float = 0.0
    raw_max: float = 0.0
    imputed: list[tuple[int, CostMode]] = field(default_factory=list)

    def __getitem__(self, key) -> float:
        agent, mode = key
        return self.costs[(agent, CostMode.parse(mode))]

    @property
    def agents(self) -> list[int]:
        return sorted({a for a, _ in self.costs})

    def preferred(self, agent: int) -> CostMode:
        return min(ROUTER_ORDER, key=lambda m: self.costs[(agent, m)])

    def covers(self, agents: Iterable[int]) -> bool:
        return all((a, m) in self.costs for a in agents for m in ROUTER_ORDER)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["agent", "router", "cost"])
            for (agent, mode) in sorted(self.costs, key=lambda k: (k[0], k[1].order)):
                w.writerow([agent, mode.value, repr(self.costs[(agent, mode)])])

    @classmethod
    def read_csv(cls, path) -> "RouterCostTable":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls({(int(r["agent"]), CostMode.parse(r["router"])): float(r["cost"]) for r in rows})


def _minmax(means: Mapping[tuple[int, CostMode], float]) -> dict[tuple[int, CostMode], float]:
    lo, hi = min(means.values()), max(means.values())
    span = hi - lo
    if span <= 0:
        return {k: 0.0 for k in means}
    return {k: (v - lo) / span for k, v in means.items()}


def mine_router_costs(records: Iterable[tuple[int, CostMode | str, float]],
                      agents: Iterable[int] | None = None,
                      impute_missing: bool = False) -> RouterCostTable:
    """Mean overhead per (agent, router), min-max normalized over the whole table.

    Every (agent, router) pair must have at least one record. With
    ``impute_missing`` a gap is filled with the mean over all agents of that
    router's per-agent means, and listed in ``RouterCostTable.imputed``.
    """
    sums: dict[tuple[int, CostMode], list[float]] = defaultdict(list)
    for agent, router, overhead in records:
        sums[(int(agent), CostMode.parse(router))].append(float(overhead))
    agent_ids = sorted({a for a, _ in sums} | set(agents or ()))
    if not agent_ids:
        raise MiningError("no baseline records")
    means = {k: math.fsum(v) / len(v) for k, v in sums.items()}
    gaps = [(a, m) for a in agent_ids for m in ROUTER_ORDER if (a, m) not in means]
    if gaps and not impute_missing:
        shown = ", ".join(f"({a}, {m.name})" for a, m in gaps[:20])
        raise MiningError(f"{len(gaps)} (agent, router) pair(s) without records: {shown}")
    if gaps:
        for m in ROUTER_ORDER:
            present = [v for (a, mm), v in sorted(means.items(), key=lambda kv: (kv[0][0], kv[0][1].order))
                       if mm is m]
            fallback = math.fsum(present) / len(present) if present else None
            for a, mm in gaps:
                if mm is m and fallback is not None:
                    means[(a, m)] = fallback
        still = [g for g in gaps if g not in means]
        if still:
            raise MiningError(f"router(s) with no records at all: {sorted({m.name for _, m in still})}")
        log.info("imputed %d missing (agent, router) costs", len(gaps))
    table = RouterCostTable(_minmax(means), min(means.values()), max(means.values()), gaps)
    return table


def read_baseline_csv(path) -> list[tuple[int, CostMode, float]]:
    with open(path, newline="") as fh:
        return [(int(r["agent"]), CostMode.parse(r["router"]), float(r["trip_overhead"]))
                for r in csv.DictReader(fh)]


def write_baseline_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["agent", "router", "trip_overhead"])
        for agent, router, overhead in records:
            w.writerow([agent, CostMode.parse(router).value, repr(float(overhead))])


def build_plan_sets(net: RoadNetwork, routes_per_agent: Mapping[int, list[Route]],
                    cost_table: RouterCostTable, horizon: float,
                    vehicle_length: float = 5.0) -> list[AgentPlanSet]:
    sets = []
    for agent in sorted(routes_per_agent):
        routes = routes_per_agent[agent]
        plans = [Plan(encode_plan(net, r, horizon, vehicle_length), cost_table[(agent, m)], m, r)
                 for m, r in zip(ROUTER_ORDER, routes)]
        sets.append(AgentPlanSet(agent, plans))
    return sets


def dump_plans(plan_sets: Iterable[AgentPlanSet], net: RoadNetwork, path) -> None:
    """Debug dump: one ``agent,plan,edge,utilization`` row per nonzero entry."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["agent", "plan", "edge", "utilization"])
        for ps in plan_sets:
            for p in ps.plans:
                for i, v in zip(p.utilization.indices, p.utilization.values):
                    w.writerow([ps.agent, p.router.value, net.edge_ids[int(i)], repr(float(v))])
