"""Road network model, JSON ingestion and synthetic grid generators.

Edges are directed. All statistics below are computed over directed edges.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import networkx as nx
import numpy as np

MIN_STREET_LENGTH = 0.1


class NetworkError(ValueError):
    pass


class NetworkParseError(NetworkError):
    pass


class NetworkValidationError(NetworkError):
    pass


@dataclass(frozen=True)
class Node:
    id: str
    x: float
    y: float


@dataclass(frozen=True)
class Edge:
    id: str
    source: str
    target: str
    length: float
    max_speed: float
    lanes: int = 1

    @property
    def free_flow_time(self) -> float:
        return self.length / self.max_speed


@dataclass(frozen=True)
class NetworkStats:
    node_count: int
    edge_count: int
    total_street_length: float
    avg_street_length: float
    max_street_length: float
    min_street_length: float
    edges_per_length: float
    nodes_per_length: float

    CSV_HEADER = "nodes,edges,total_length_m,avg_m,max_m,min_m,edges_per_m,nodes_per_m"

    def csv_row(self) -> str:
        values = (self.node_count, self.edge_count, self.total_street_length,
                  self.avg_street_length, self.max_street_length,
                  self.min_street_length, self.edges_per_length, self.nodes_per_length)
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in values)


@dataclass
class RoadNetwork:
    """Directed road graph. Treat as immutable once constructed.

    ``edge_ids`` is the global edge ordering (sorted ids) used for plan vectors
    and for every deterministic per-edge loop.
    """

    nodes: dict[str, Node]
    edges: dict[str, Edge]
    allow_self_loops: bool = False
    out_edges: dict[str, list[str]] = field(init=False, repr=False)
    edge_ids: list[str] = field(init=False, repr=False)
    edge_index: dict[str, int] = field(init=False, repr=False)
    # shortest-path trees memoized by the routing module
    cache: dict = field(init=False, repr=False, compare=False, default_factory=dict)

    def __post_init__(self):
        self.out_edges = {nid: [] for nid in sorted(self.nodes)}
        for eid in sorted(self.edges):
            e = self.edges[eid]
            if e.source in self.out_edges:
                self.out_edges[e.source].append(eid)
        self.edge_ids = sorted(self.edges)
        self.edge_index = {eid: i for i, eid in enumerate(self.edge_ids)}

    @property
    def node_count(self) -> int:
        return len(self.nodes)

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    def bbox(self) -> tuple[float, float, float, float]:
        xs = [n.x for n in self.nodes.values()]
        ys = [n.y for n in self.nodes.values()]
        return min(xs), min(ys), max(xs), max(ys)

    def spawnable_edges(self, vehicle_length: float = 5.0) -> list[str]:
        return [eid for eid in self.edge_ids if self.edges[eid].length >= vehicle_length]

    def validate(self) -> "RoadNetwork":
        """Check all structural invariants; raise NetworkValidationError naming the record."""
        for n in self.nodes.values():
            if not (math.isfinite(n.x) and math.isfinite(n.y)):
                raise NetworkValidationError(f"node {n.id!r}: non-finite coordinates")
        for e in self.edges.values():
            for end in (e.source, e.target):
                if end not in self.nodes:
                    raise NetworkValidationError(f"edge {e.id!r}: unknown node {end!r}")
            if e.source == e.target and not self.allow_self_loops:
                raise NetworkValidationError(f"edge {e.id!r}: self-loop at {e.source!r}")
            if not e.length > 0:
                raise NetworkValidationError(f"edge {e.id!r}: non-positive length {e.length}")
            if e.length < MIN_STREET_LENGTH:
                raise NetworkValidationError(
                    f"edge {e.id!r}: length {e.length} below {MIN_STREET_LENGTH} m")
            if not e.max_speed > 0:
                raise NetworkValidationError(f"edge {e.id!r}: non-positive max speed {e.max_speed}")
            if not (isinstance(e.lanes, int) and e.lanes >= 1):
                raise NetworkValidationError(f"edge {e.id!r}: lanes must be a positive integer")
        if not self.edges:
            return self

        # trips run edge to edge, so connectivity is checked on the line graph:
        # street e precedes street f when e ends where f starts
        g = nx.DiGraph()
        g.add_nodes_from(self.edge_ids)
        g.add_edges_from((eid, nxt) for eid in self.edge_ids
                         for nxt in self.out_edges[self.edges[eid].target])
        # ties on size resolved by smallest member id so the choice is stable
        components = sorted(nx.strongly_connected_components(g),
                            key=lambda c: (-len(c), min(c)))
        core = components[0]
        outside = [eid for eid in self.spawnable_edges() if eid not in core]
        if outside:
            shown = ", ".join(outside[:20]) + (" ..." if len(outside) > 20 else "")
            raise NetworkValidationError(
                f"{len(outside)} edge(s) outside the largest strongly connected component: {shown}")
        return self

    def to_dict(self) -> dict:
        return {
            "nodes": [{"id": n.id, "x": n.x, "y": n.y}
                      for n in (self.nodes[k] for k in sorted(self.nodes))],
            "edges": [{"id": e.id, "from": e.source, "to": e.target, "length_m": e.length,
                       "max_speed_mps": e.max_speed, "lanes": e.lanes}
                      for e in (self.edges[k] for k in self.edge_ids)],
        }


def _build(nodes: Iterable[Node], edges: Iterable[Edge], allow_self_loops=False) -> RoadNetwork:
    node_map: dict[str, Node] = {}
    for n in nodes:
        if n.id in node_map:
            raise NetworkValidationError(f"duplicate node id {n.id!r}")
        node_map[n.id] = n
    edge_map: dict[str, Edge] = {}
    for e in edges:
        if e.id in edge_map:
            raise NetworkValidationError(f"duplicate edge id {e.id!r}")
        edge_map[e.id] = e
    return RoadNetwork(node_map, edge_map, allow_self_loops=allow_self_loops).validate()


def network_from_dict(doc: dict, allow_self_loops: bool = False) -> RoadNetwork:
    if not isinstance(doc, dict) or "nodes" not in doc or "edges" not in doc:
        raise NetworkParseError("network document needs top-level 'nodes' and 'edges'")
    nodes, edges = [], []
    for i, rec in enumerate(doc["nodes"]):
        try:
            nodes.append(Node(str(rec["id"]), float(rec["x"]), float(rec["y"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise NetworkParseError(f"node record #{i} ({rec!r}): {exc}") from exc
    for i, rec in enumerate(doc["edges"]):
        try:
            lanes = rec.get("lanes", 1)
            if isinstance(lanes, float) and lanes.is_integer():
                lanes = int(lanes)
            edges.append(Edge(str(rec["id"]), str(rec["from"]), str(rec["to"]),
                              float(rec["length_m"]), float(rec["max_speed_mps"]), lanes))
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise NetworkParseError(f"edge record #{i} ({rec!r}): {exc}") from exc
    return _build(nodes, edges, allow_self_loops)


def load_network(path, allow_self_loops: bool = False) -> RoadNetwork:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise NetworkParseError(f"{path}: {exc}") from exc
    return network_from_dict(doc, allow_self_loops)


def save_network(net: RoadNetwork, path) -> None:
    Path(path).write_text(json.dumps(net.to_dict(), indent=1) + "\n", encoding="utf-8")


def _node_id(r: int, c: int) -> str:
    return f"r{r:03d}c{c:03d}"


def _grid_pairs(rows: int, cols: int):
    for r in range(rows):
        for c in range(cols):
            if c + 1 < cols:
                yield (r, c), (r, c + 1)
            if r + 1 < rows:
                yield (r, c), (r + 1, c)


def generate_grid(rows: int, cols: int, edge_length: float = 100.0, max_speed: float = 13.9,
                  lanes: int = 1) -> RoadNetwork:
    """Uniform rows x cols grid with two directed edges per 4-neighbour pair."""
    if rows < 2 or cols < 2:
        raise ValueError("grid needs at least 2 rows and 2 columns")
    if edge_length <= 0 or max_speed <= 0 or lanes < 1:
        raise ValueError("edge_length, max_speed and lanes must be positive")
    nodes = [Node(_node_id(r, c), c * edge_length, r * edge_length)
             for r in range(rows) for c in range(cols)]
    edges = []
    for a, b in _grid_pairs(rows, cols):
        u, v = _node_id(*a), _node_id(*b)
        edges.append(Edge(f"{u}-{v}", u, v, float(edge_length), float(max_speed), lanes))
        edges.append(Edge(f"{v}-{u}", v, u, float(edge_length), float(max_speed), lanes))
    return _build(nodes, edges)


def generate_city_grid(rows: int = 10, cols: int = 10, edge_length: float = 100.0,
                       local_speed: float = 8.33, arterial_speed: float = 16.67,
                       arterial_every: int = 3, jitter: float = 0.25, lanes: int = 1,
                       seed: int = 0) -> RoadNetwork:
    """Grid with jittered intersections and faster arterial rows/columns.

    Unlike ``generate_grid`` the three router cost metrics disagree on this
    layout, so candidate routes actually differ. Every ``arterial_every``-th
    row and column (starting at 0) carries ``arterial_speed``.
    """
    if rows < 2 or cols < 2:
        raise ValueError("grid needs at least 2 rows and 2 columns")
    if not 0 <= jitter < 0.5:
        raise ValueError("jitter must lie in [0, 0.5)")
    rng = np.random.default_rng(seed)
    offsets = rng.uniform(-jitter, jitter, size=(rows, cols, 2)) * edge_length
    pos = {}
    nodes = []
    for r in range(rows):
        for c in range(cols):
            x = round(c * edge_length + offsets[r, c, 0], 3)
            y = round(r * edge_length + offsets[r, c, 1], 3)
            pos[(r, c)] = (x, y)
            nodes.append(Node(_node_id(r, c), x, y))
    edges = []
    for a, b in _grid_pairs(rows, cols):
        (x0, y0), (x1, y1) = pos[a], pos[b]
        length = round(max(math.hypot(x1 - x0, y1 - y0), MIN_STREET_LENGTH), 3)
        horizontal = a[0] == b[0]
        arterial = (a[0] % arterial_every == 0) if horizontal else (a[1] % arterial_every == 0)
        speed = arterial_speed if arterial else local_speed
        u, v = _node_id(*a), _node_id(*b)
        edges.append(Edge(f"{u}-{v}", u, v, length, speed, lanes))
        edges.append(Edge(f"{v}-{u}", v, u, length, speed, lanes))
    return _build(nodes, edges)


def network_stats(net: RoadNetwork) -> NetworkStats:
    lengths = [net.edges[eid].length for eid in net.edge_ids]
    if not lengths:
        raise NetworkError("network has no edges")
    total = math.fsum(lengths)
    return NetworkStats(
        node_count=net.node_count,
        edge_count=net.edge_count,
        total_street_length=total,
        avg_street_length=total / len(lengths),
        max_street_length=max(lengths),
        min_street_length=min(lengths),
        edges_per_length=net.edge_count / total,
        nodes_per_length=net.node_count / total,
    )
