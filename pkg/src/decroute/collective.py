"""Tree-based collective plan selection.

Each agent owns a few candidate plans (sparse utilization vectors with a
scalar cost). Agents are arranged in a tree; every iteration runs a
bottom-up pass in which each agent picks the candidate minimizing

    (1 - alpha - beta) * GC + alpha * U + beta * LC

against a projection of the global response, followed by a top-down
broadcast of the new global response from the root. The root rejects any
iteration that would raise the combined cost, so the emitted trace never
increases.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .plans import AgentPlanSet, SparseUtilization

DEFAULT_MAX_ITERATIONS = 40
STABLE_ITERATIONS = 2


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class Weights:
    alpha: float = 0.0
    beta: float = 0.0

    def __post_init__(self):
        for name, v in (("alpha", self.alpha), ("beta", self.beta)):
            if not 0.0 <= v <= 1.0:
                raise ConfigurationError(f"{name}={v} outside [0, 1]")
        if self.alpha + self.beta > 1.0 + 1e-12:
            raise ConfigurationError(f"alpha + beta = {self.alpha + self.beta} exceeds 1")

    @property
    def gamma(self) -> float:
        """Weight on the global cost."""
        return max(0.0, 1.0 - self.alpha - self.beta)


@dataclass(frozen=True)
class CostBreakdown:
    global_cost: float
    local_cost: float
    unfairness: float
    combined: float


def global_cost(aggregate) -> float:
    aggregate = np.asarray(aggregate, dtype=float)
    if aggregate.size == 0:
        raise ValueError("global cost of an empty vector")
    return float(np.var(aggregate))


def _selected_costs(selections: "Selections | dict", plan_sets: Sequence[AgentPlanSet]) -> list[float]:
    choice = selections.choice if isinstance(selections, Selections) else selections
    return [ps.plans[choice[ps.agent]].cost for ps in plan_sets]


def local_cost(selections, plan_sets: Sequence[AgentPlanSet]) -> float:
    costs = _selected_costs(selections, plan_sets)
    return math.fsum(costs) / len(costs)


def unfairness(selections, plan_sets: Sequence[AgentPlanSet]) -> float:
    return float(np.var(_selected_costs(selections, plan_sets)))


def combined_cost(gc: float, lc: float, u: float, weights: Weights) -> float:
    return (1.0 - weights.alpha - weights.beta) * gc + weights.alpha * u + weights.beta * lc


@dataclass
class TreeTopology:
    root: int
    parent: dict[int, int | None]
    children: dict[int, list[int]]
    fanout: int = 2

    def post_order(self) -> list[int]:
        out, stack = [], [(self.root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                out.append(node)
                continue
            stack.append((node, True))
            for child in reversed(self.children[node]):
                stack.append((child, False))
        return out

    def depth(self) -> int:
        best, stack = 0, [(self.root, 0)]
        while stack:
            node, d = stack.pop()
            best = max(best, d)
            stack.extend((c, d + 1) for c in self.children[node])
        return best

    def relabel(self, mapping: dict[int, int]) -> "TreeTopology":
        return TreeTopology(
            mapping[self.root],
            {mapping[a]: (None if p is None else mapping[p]) for a, p in self.parent.items()},
            {mapping[a]: [mapping[c] for c in cs] for a, cs in self.children.items()},
            self.fanout,
        )


def tree_from_order(order: Sequence[int], fanout: int = 2) -> TreeTopology:
    """Complete ``fanout``-ary tree filled level by level in ``order``."""
    if not order:
        raise ConfigurationError("tree needs at least one agent")
    if fanout < 1:
        raise ConfigurationError("fanout must be positive")
    parent: dict[int, int | None] = {}
    children: dict[int, list[int]] = {a: [] for a in order}
    for pos, agent in enumerate(order):
        if pos == 0:
            parent[agent] = None
            continue
        p = order[(pos - 1) // fanout]
        parent[agent] = p
        children[p].append(agent)
    return TreeTopology(order[0], parent, children, fanout)


def build_tree(agent_ids: Sequence[int], seed: int, fanout: int = 2) -> TreeTopology:
    ids = list(agent_ids)
    if len(set(ids)) != len(ids):
        raise ConfigurationError("duplicate agent ids")
    perm = np.random.default_rng(seed).permutation(len(ids))
    return tree_from_order([ids[i] for i in perm], fanout)


@dataclass
class Selections:
    choice: dict[int, int]
    aggregate: np.ndarray

    @staticmethod
    def sum_plans(choice: dict[int, int], plan_sets: Sequence[AgentPlanSet]) -> np.ndarray:
        dim = plan_sets[0].plans[0].utilization.dim
        agg = np.zeros(dim)
        for ps in plan_sets:
            u = ps.plans[choice[ps.agent]].utilization
            np.add.at(agg, u.indices, u.values)
        return agg

    def routers(self, plan_sets: Sequence[AgentPlanSet]) -> dict[int, str]:
        return {ps.agent: ps.plans[self.choice[ps.agent]].router for ps in plan_sets}

    def write_csv(self, plan_sets: Sequence[AgentPlanSet], path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["agent", "router", "plan_cost"])
            for ps in plan_sets:
                p = ps.plans[self.choice[ps.agent]]
                w.writerow([ps.agent, p.router.value, repr(p.cost)])


def breakdown(choice: dict[int, int], aggregate: np.ndarray,
              plan_sets: Sequence[AgentPlanSet], weights: Weights) -> CostBreakdown:
    gc = global_cost(aggregate)
    lc = local_cost(choice, plan_sets)
    u = unfairness(choice, plan_sets)
    return CostBreakdown(gc, lc, u, combined_cost(gc, lc, u, weights))


def write_trace_csv(trace: Sequence[CostBreakdown], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "global_cost", "local_cost", "unfairness", "combined"])
        for i, b in enumerate(trace):
            w.writerow([i, repr(b.global_cost), repr(b.local_cost), repr(b.unfairness), repr(b.combined)])


def _variance_after(base: np.ndarray, s1: float, s2: float, idx: np.ndarray, vals: np.ndarray) -> float:
    # population variance of base + sparse(idx, vals); idx must be unique
    n = base.size
    b = base[idx]
    t1 = s1 + vals.sum()
    t2 = s2 + (vals * (2.0 * b + vals)).sum()
    return max(0.0, t2 / n - (t1 / n) ** 2)


def _sparse_diff(new: SparseUtilization, old: SparseUtilization):
    idx = np.concatenate((new.indices, old.indices))
    vals = np.concatenate((new.values, -old.values))
    uniq, inv = np.unique(idx, return_inverse=True)
    return uniq, np.bincount(inv, weights=vals, minlength=uniq.size)


def optimize(plan_sets: Sequence[AgentPlanSet], weights: Weights, seed: int = 0,
             max_iterations: int = DEFAULT_MAX_ITERATIONS, fanout: int = 2,
             tree: TreeTopology | None = None) -> tuple[Selections, list[CostBreakdown]]:
    """Select one plan per agent.

    Returns the final selections and the root-level cost trace; ``trace[0]``
    is the selfish bootstrap (every agent on its preferred plan) and each
    further entry is one iteration. The number of iterations run is
    ``len(trace) - 1``.
    """
    if not plan_sets:
        raise ConfigurationError("no agents")
    dims = {p.utilization.dim for ps in plan_sets for p in ps.plans}
    if len(dims) != 1:
        raise ConfigurationError(f"plan vectors have mismatched dimensions {sorted(dims)}")
    by_agent = {ps.agent: ps for ps in plan_sets}
    if len(by_agent) != len(plan_sets):
        raise ConfigurationError("duplicate agent ids")
    if tree is None:
        tree = build_tree([ps.agent for ps in plan_sets], seed, fanout)
    elif set(tree.parent) != set(by_agent):
        raise ConfigurationError("tree does not cover exactly the given agents")

    gamma, alpha, beta = weights.gamma, weights.alpha, weights.beta
    order = tree.post_order()

    choice = {ps.agent: ps.preferred for ps in plan_sets}
    aggregate = Selections.sum_plans(choice, plan_sets)
    current = breakdown(choice, aggregate, plan_sets, weights)
    trace = [current]

    stable = 0
    for _ in range(max_iterations):
        g_prev = aggregate
        s1_prev = float(g_prev.sum())
        s2_prev = float(np.dot(g_prev, g_prev))
        new_choice: dict[int, int] = {}
        # per agent: dense subtree delta (None when unchanged) and subtree cost moments
        delta: dict[int, np.ndarray | None] = {}
        moments: dict[int, tuple[int, float, float]] = {}

        for agent in order:
            ps = by_agent[agent]
            kids = tree.children[agent]
            d_kids = None
            cnt, sm, sq = 0, 0.0, 0.0
            for c in kids:
                dc = delta.pop(c)
                if dc is not None:
                    d_kids = dc if d_kids is None else d_kids + dc
                kc, ks, kq = moments.pop(c)
                cnt, sm, sq = cnt + kc, sm + ks, sq + kq

            if d_kids is None:
                base, s1, s2 = g_prev, s1_prev, s2_prev
            else:
                base = g_prev + d_kids
                s1, s2 = float(base.sum()), float(np.dot(base, base))

            old = ps.plans[choice[agent]].utilization
            best, best_score, best_diff = 0, math.inf, None
            for k, plan in enumerate(ps.plans):
                idx, vals = _sparse_diff(plan.utilization, old)
                score = 0.0
                if gamma > 0.0:
                    score += gamma * _variance_after(base, s1, s2, idx, vals)
                if alpha > 0.0:
                    n = cnt + 1
                    mean = (sm + plan.cost) / n
                    score += alpha * max(0.0, (sq + plan.cost ** 2) / n - mean * mean)
                if beta > 0.0:
                    score += beta * plan.cost
                if score < best_score:
                    best, best_score, best_diff = k, score, (idx, vals)

            new_choice[agent] = best
            c_best = ps.plans[best].cost
            moments[agent] = (cnt + 1, sm + c_best, sq + c_best ** 2)
            if best != choice[agent]:
                d = np.zeros_like(g_prev) if d_kids is None else d_kids
                idx, vals = best_diff
                d[idx] += vals
                delta[agent] = d
            else:
                delta[agent] = d_kids

        if new_choice == choice:
            stable += 1
            trace.append(current)
        else:
            candidate_agg = Selections.sum_plans(new_choice, plan_sets)
            candidate = breakdown(new_choice, candidate_agg, plan_sets, weights)
            if candidate.combined > current.combined:
                # revert: keep the previous selections and response
                stable += 1
                trace.append(current)
            else:
                stable = 0
                choice, aggregate, current = new_choice, candidate_agg, candidate
                trace.append(current)
        if stable >= STABLE_ITERATIONS:
            break

    return Selections(dict(choice), aggregate), trace
