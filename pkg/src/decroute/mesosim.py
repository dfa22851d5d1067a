"""Tick-based mesoscopic simulator with vertical queues.

Each edge holds a FIFO of vehicles. Per tick (1 s) every vehicle advances by
``max_speed * max(1 - rho, floor)`` where ``rho`` is the share of the edge's
capacity taken by *other* vehicles at the start of the tick. A vehicle that
reaches the end of its edge enters the next one only when that edge has
room; otherwise it waits at the end and blocks the vehicles behind it.
Unused travel time carries over into the next edge, so a vehicle alone on
the network arrives within one tick of its free-flow time.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .network import Edge, RoadNetwork
from .routing import CostMode, Route, RoutingError, shortest_route

log = logging.getLogger(__name__)

MAX_RESPAWN_DRAWS = 100
PARKED = -2


class SimulationError(RuntimeError):
    pass


class EmptyResultError(SimulationError):
    """No vehicle completed its first trip."""


@dataclass
class SimConfig:
    vehicle_length: float = 5.0
    min_gap: float = 2.5
    speed_floor: float = 0.1
    record_occupancy: bool = False
    # only first trips feed the reported metrics; stop once all are done
    stop_after_first_trips: bool = False
    check_invariants: bool = False
    # True: a blocked queue head stops every vehicle behind it, whatever their next edge
    head_of_line: bool = False
    # a vehicle blocked this many ticks jumps to the next route edge with room (None: never)
    teleport_after: int | None = 300


def edge_capacity(edge: Edge, vehicle_length: float = 5.0, min_gap: float = 2.5) -> int:
    return max(1, math.floor(edge.lanes * edge.length / (vehicle_length + min_gap)))


def effective_speed(max_speed: float, rho: float, floor: float = 0.1) -> float:
    return max_speed * max(1.0 - rho, floor)


@dataclass(frozen=True)
class TripRecord:
    vehicle: int
    trip_index: int
    origin: str
    dest: str
    start_tick: int
    end_tick: int
    theoretical: float

    @property
    def actual(self) -> int:
        return self.end_tick - self.start_tick

    @property
    def overhead(self) -> float:
        ratio = self.actual / self.theoretical
        # actual >= theoretical up to float noise in the carried-over time
        return 1.0 if 1.0 - 1e-9 < ratio < 1.0 else ratio


TRIP_HEADER = ["vehicle", "trip_index", "origin", "dest", "start_tick", "end_tick",
               "actual_s", "theoretical_s", "overhead"]


@dataclass
class SimOutput:
    trips: list[TripRecord]
    vehicle_count: int
    ticks_run: int
    occupancy: list[tuple[int, str, int]] | None = None
    vehicle_counts: list[int] = field(default_factory=list)

    @property
    def first_trips(self) -> list[TripRecord]:
        return [t for t in self.trips if t.trip_index == 0]

    @property
    def completed_first_trips(self) -> int:
        return len(self.first_trips)

    def write_trips_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRIP_HEADER)
            for t in self.trips:
                w.writerow([t.vehicle, t.trip_index, t.origin, t.dest, t.start_tick, t.end_tick,
                            t.actual, repr(t.theoretical), repr(t.overhead)])

    def write_occupancy_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["tick", "edge", "occupants"])
            w.writerows(self.occupancy or [])


def mean_first_trip_overhead(out: SimOutput) -> float:
    firsts = out.first_trips
    if not firsts:
        raise EmptyResultError("no completed first trips")
    return math.fsum(t.overhead for t in firsts) / len(firsts)


Respawn = Callable[[int, str, np.random.Generator], Route]


def respawn_trip(net: RoadNetwork, current_edge: str, mode: CostMode,
                 rng: np.random.Generator, spawnable: Sequence[str]) -> Route:
    """New route from ``current_edge`` to a uniformly drawn destination."""
    for _ in range(MAX_RESPAWN_DRAWS):
        dest = spawnable[int(rng.integers(len(spawnable)))]
        if dest == current_edge:
            continue
        try:
            return shortest_route(net, current_edge, dest, mode)
        except RoutingError:
            continue
    raise SimulationError(f"no reachable destination from {current_edge!r} "
                          f"after {MAX_RESPAWN_DRAWS} draws")


def make_respawner(net: RoadNetwork, modes: Sequence[CostMode],
                   vehicle_length: float = 5.0) -> Respawn:
    """Callback routing vehicle ``v`` with router ``modes[v]``."""
    spawnable = net.spawnable_edges(vehicle_length)

    def respawn(vehicle: int, current_edge: str, rng: np.random.Generator) -> Route:
        return respawn_trip(net, current_edge, modes[vehicle], rng, spawnable)

    return respawn


class Simulation:
    """Mutable simulation state; ``step`` advances one tick."""

    def __init__(self, net: RoadNetwork, routes: Sequence[Route], seed: int = 0,
                 respawn: Respawn | None = None, config: SimConfig | None = None):
        self.net = net
        self.config = cfg = config or SimConfig()
        self.respawn = respawn
        self.rng = np.random.default_rng(seed)
        idx = net.edge_index
        for v, r in enumerate(routes):
            for eid in r.edges:
                if eid not in idx:
                    raise SimulationError(f"vehicle {v}: route uses unknown edge {eid!r}")
            for a, b in zip(r.edges, r.edges[1:]):
                if net.edges[a].target != net.edges[b].source:
                    raise SimulationError(f"vehicle {v}: route edges {a!r}, {b!r} not connected")

        edges = [net.edges[e] for e in net.edge_ids]
        self.length = np.array([e.length for e in edges])
        self.vmax = np.array([e.max_speed for e in edges])
        self.cap = np.array([edge_capacity(e, cfg.vehicle_length, cfg.min_gap) for e in edges])
        self.occ = np.zeros(len(edges), dtype=np.int64)
        self.fifo: list[deque] = [deque() for _ in edges]

        n = len(routes)
        self.n = n
        self.edge_of = np.full(n, -1, dtype=np.int64)
        self.pos = np.zeros(n)
        self.route = [[idx[e] for e in r.edges] for r in routes]
        self.rpos = [0] * n
        self.trip_index = [0] * n
        self.trip_start = [0] * n
        self.trip_theoretical = [r.free_flow_time for r in routes]
        self.stamp = np.full(n, -1, dtype=np.int64)
        self.spawn_queue: deque[int] = deque(range(n))
        self.first_done = 0
        self.parked = 0
        self.teleports = 0
        self.wait_since = np.full(n, -1, dtype=np.int64)
        self.tick = 0
        self.trips: list[TripRecord] = []
        self.occupancy: list[tuple[int, str, int]] | None = [] if cfg.record_occupancy else None
        self.vehicle_counts: list[int] = []

    def _drain_spawn_queue(self) -> None:
        waiting = deque()
        while self.spawn_queue:
            v = self.spawn_queue.popleft()
            e = self.route[v][0]
            if self.occ[e] < self.cap[e]:
                self.occ[e] += 1
                self.fifo[e].append(v)
                self.edge_of[v] = e
                self.pos[v] = 0.0
            else:
                waiting.append(v)
        self.spawn_queue = waiting

    def _arrive(self, v: int, e: int) -> None:
        # v is at the head of edge e's queue
        t_end = self.tick + 1
        r = self.route[v]
        ids = self.net.edge_ids
        self.trips.append(TripRecord(v, self.trip_index[v], ids[r[0]], ids[r[-1]],
                                     self.trip_start[v], t_end, self.trip_theoretical[v]))
        if self.trip_index[v] == 0:
            self.first_done += 1
        self.trip_index[v] += 1
        self.trip_start[v] = t_end
        if self.respawn is None:
            # no further demand: leave the network but keep counting the vehicle
            self.fifo[e].popleft()
            self.occ[e] -= 1
            self.edge_of[v] = PARKED
            self.parked += 1
            return
        new = self.respawn(v, ids[e], self.rng)
        if new.edges[0] != ids[e]:
            raise SimulationError(f"respawn route for vehicle {v} does not start on {ids[e]!r}")
        self.route[v] = [self.net.edge_index[x] for x in new.edges]
        self.rpos[v] = 0
        # the vehicle already stands at the end of the first edge
        self.trip_theoretical[v] = new.free_flow_time - self.net.edges[ids[e]].free_flow_time

    def _advance(self, v: int, e: int, tau: float, occ0: np.ndarray, floor: float) -> bool:
        """Move vehicle ``v`` (at the end of edge ``e``) with ``tau`` seconds left.

        Returns False when the vehicle stays at the end of ``e`` (blocked or
        just arrived).
        """
        self.stamp[v] = self.tick
        cfg = self.config
        while True:
            r = self.route[v]
            k = self.rpos[v]
            if k == len(r) - 1:
                self._arrive(v, e)
                return self.edge_of[v] == PARKED
            nxt = r[k + 1]
            if self.occ[nxt] >= self.cap[nxt]:
                if self.wait_since[v] < 0:
                    self.wait_since[v] = self.tick
                if (cfg.teleport_after is None
                        or self.tick - self.wait_since[v] < cfg.teleport_after):
                    return False
                jump = next((j for j in range(k + 2, len(r) - 1)
                             if self.occ[r[j]] < self.cap[r[j]]), None)
                if jump is None:
                    return False
                self.teleports += 1
                self._move(v, e, r[jump], jump)
                self.pos[v] = 0.0
                return True
            self._move(v, e, nxt, k + 1)
            ahead = self.fifo[nxt][-2] if len(self.fifo[nxt]) > 1 else None
            rho = occ0[nxt] / self.cap[nxt]
            speed = self.vmax[nxt] * max(1.0 - rho, floor)
            need = self.length[nxt] / speed
            if ahead is not None or tau < need:
                d = min(speed * tau, self.length[nxt])
                if ahead is not None:
                    d = min(d, self.pos[ahead])
                self.pos[v] = d
                return True
            tau -= need
            self.pos[v] = self.length[nxt]
            e = nxt

    def _move(self, v: int, e: int, nxt: int, k: int) -> None:
        q = self.fifo[e]
        if q[0] == v:
            q.popleft()
        else:
            q.remove(v)
        self.occ[e] -= 1
        self.fifo[nxt].append(v)
        self.occ[nxt] += 1
        self.edge_of[v] = nxt
        self.rpos[v] = k
        self.wait_since[v] = -1

    def step(self) -> None:
        cfg = self.config
        floor = cfg.speed_floor
        self._drain_spawn_queue()
        occ0 = self.occ.copy()

        on = np.flatnonzero(self.edge_of >= 0)
        e_on = self.edge_of[on]
        rho = (occ0[e_on] - 1) / self.cap[e_on]
        speed = self.vmax[e_on] * np.maximum(1.0 - rho, floor)
        newpos = self.pos[on] + speed
        length = self.length[e_on]
        reached = newpos >= length
        self.pos[on] = np.minimum(newpos, length)

        if reached.any():
            r_veh = on[reached]
            tau = np.zeros(self.n)
            tau[r_veh] = (newpos[reached] - length[reached]) / speed[reached]
            is_reacher = np.zeros(self.n, dtype=bool)
            is_reacher[r_veh] = True
            for e in np.unique(e_on[reached]).tolist():
                for v in [v for v in self.fifo[e] if is_reacher[v]]:
                    if self.stamp[v] == self.tick:
                        continue
                    if not self._advance(v, e, float(tau[v]), occ0, floor) and cfg.head_of_line:
                        break

        if self.occupancy is not None:
            ids = self.net.edge_ids
            self.occupancy.extend((self.tick, ids[e], int(c)) for e, c in enumerate(self.occ) if c)
        if cfg.check_invariants:
            self._check()
        self.tick += 1

    def _check(self) -> None:
        on_edges = int(self.occ.sum())
        count = on_edges + len(self.spawn_queue) + self.parked
        self.vehicle_counts.append(count)
        if count != self.n:
            raise SimulationError(f"tick {self.tick}: {count} vehicles, expected {self.n}")
        if any(len(q) != c for q, c in zip(self.fifo, self.occ)):
            raise SimulationError(f"tick {self.tick}: edge queues disagree with occupancy")
        if np.any(self.occ > self.cap):
            raise SimulationError(f"tick {self.tick}: edge over capacity")

    def run(self, horizon_ticks: int) -> SimOutput:
        if horizon_ticks <= 0:
            raise SimulationError("horizon must be positive")
        for _ in range(horizon_ticks):
            self.step()
            if self.config.stop_after_first_trips and self.first_done == self.n:
                break
        return SimOutput(self.trips, self.n, self.tick, self.occupancy, self.vehicle_counts)


def run(net: RoadNetwork, routes: Sequence[Route], horizon_ticks: int, seed: int = 0,
        respawn: Respawn | None = None, config: SimConfig | None = None) -> SimOutput:
    return Simulation(net, routes, seed, respawn, config).run(horizon_ticks)
