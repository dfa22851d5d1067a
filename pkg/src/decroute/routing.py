"""Edge-to-edge shortest routes under the three router cost policies."""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from enum import Enum

from .network import Edge, RoadNetwork


class RoutingError(RuntimeError):
    pass


class CostMode(str, Enum):
    MIN_LENGTH = "minlength"
    MAX_SPEED = "maxspeed"
    BALANCED = "balanced"

    @property
    def order(self) -> int:
        return ROUTER_ORDER.index(self)

    @classmethod
    def parse(cls, value) -> "CostMode":
        if isinstance(value, cls):
            return value
        return cls(str(value).lower())


ROUTER_ORDER = (CostMode.MIN_LENGTH, CostMode.MAX_SPEED, CostMode.BALANCED)


def edge_cost(edge: Edge, mode: CostMode) -> float:
    if mode is CostMode.MIN_LENGTH:
        return edge.length
    if mode is CostMode.MAX_SPEED:
        return 1.0 / edge.max_speed
    if mode is CostMode.BALANCED:
        return edge.length / edge.max_speed
    raise ValueError(f"unknown cost mode {mode!r}")


@dataclass(frozen=True)
class Route:
    edges: tuple[str, ...]
    total_length: float
    free_flow_time: float

    @property
    def origin(self) -> str:
        return self.edges[0]

    @property
    def destination(self) -> str:
        return self.edges[-1]

    def cost(self, net: RoadNetwork, mode: CostMode) -> float:
        return math.fsum(edge_cost(net.edges[e], mode) for e in self.edges)


def make_route(net: RoadNetwork, edges) -> Route:
    edges = tuple(edges)
    if not edges:
        raise RoutingError("empty route")
    for a, b in zip(edges, edges[1:]):
        if net.edges[a].target != net.edges[b].source:
            raise RoutingError(f"edges {a!r} and {b!r} are not consecutive")
    if len(set(edges)) != len(edges):
        raise RoutingError(f"route repeats an edge: {edges}")
    return Route(edges,
                 math.fsum(net.edges[e].length for e in edges),
                 math.fsum(net.edges[e].free_flow_time for e in edges))


def shortest_path_tree(net: RoadNetwork, source: str, mode: CostMode):
    """Single-source Dijkstra over nodes.

    Returns ``(dist, pred)`` where ``pred[v]`` is the edge id entering ``v``.
    Equal-cost relaxations keep the lexicographically smaller entering edge.
    Results are memoized on the network.
    """
    key = ("spt", source, mode)
    hit = net.cache.get(key)
    if hit is not None:
        return hit
    dist = {source: 0.0}
    pred: dict[str, str] = {}
    done = set()
    heap = [(0.0, source)]
    while heap:
        d, u = heapq.heappop(heap)
        if u in done:
            continue
        done.add(u)
        for eid in net.out_edges[u]:
            e = net.edges[eid]
            v = e.target
            if v in done:
                continue
            nd = d + edge_cost(e, mode)
            old = dist.get(v)
            if old is None or nd < old:
                dist[v] = nd
                pred[v] = eid
                heapq.heappush(heap, (nd, v))
            elif nd == old and eid < pred[v]:
                pred[v] = eid
    net.cache[key] = (dist, pred)
    return dist, pred


def shortest_route(net: RoadNetwork, origin: str, dest: str, mode: CostMode) -> Route:
    """Cheapest route starting on edge ``origin`` and ending on edge ``dest``.

    Both endpoint edges are traversed in full and included in the cost.
    """
    mode = CostMode.parse(mode)
    for eid in (origin, dest):
        if eid not in net.edges:
            raise RoutingError(f"unknown edge {eid!r}")
    key = ("route", origin, dest, mode)
    hit = net.cache.get(key)
    if hit is not None:
        return hit
    if origin == dest:
        route = make_route(net, [origin])
    else:
        start = net.edges[origin].target
        goal = net.edges[dest].source
        dist, pred = shortest_path_tree(net, start, mode)
        if goal not in dist:
            raise RoutingError(f"no route from edge {origin!r} to edge {dest!r}")
        middle = []
        node = goal
        while node != start:
            eid = pred[node]
            middle.append(eid)
            node = net.edges[eid].source
        middle.reverse()
        route = make_route(net, [origin, *middle, dest])
    net.cache[key] = route
    return route


def candidate_routes(net: RoadNetwork, origin: str, dest: str) -> list[Route]:
    """One route per router, in ``ROUTER_ORDER``."""
    return [shortest_route(net, origin, dest, mode) for mode in ROUTER_ORDER]
