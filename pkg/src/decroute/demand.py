"""Population-weighted trip origins and uniform destinations."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .network import RoadNetwork

log = logging.getLogger(__name__)

MAX_REDRAWS = 100


class DemandError(ValueError):
    pass


@dataclass(frozen=True)
class PopulationRecord:
    x: float
    y: float
    population: int


def read_population_csv(path) -> list[PopulationRecord]:
    with open(path, newline="") as fh:
        try:
            return [PopulationRecord(float(r["x_m"]), float(r["y_m"]), int(float(r["population"])))
                    for r in csv.DictReader(fh)]
        except (KeyError, ValueError) as exc:
            raise DemandError(f"{path}: bad population record ({exc})") from exc


Cell = tuple[int, int]


@dataclass
class DistrictGrid:
    cell_size: float
    bbox: tuple[float, float, float, float]
    weights: dict[Cell, float]
    cell_edges: dict[Cell, list[str]]

    @property
    def cells(self) -> list[Cell]:
        return sorted(c for c, w in self.weights.items() if w > 0)

    def cell_of(self, x: float, y: float) -> Cell:
        x0, y0 = self.bbox[0], self.bbox[1]
        return (math.floor((x - x0) / self.cell_size), math.floor((y - y0) / self.cell_size))


def build_districts(records: Iterable[PopulationRecord], net: RoadNetwork,
                    cell_size: float = 1000.0, vehicle_length: float = 5.0) -> DistrictGrid:
    """Square districts anchored at the network's lower-left corner.

    Cells are half-open, ``[x, x + size) x [y, y + size)``. A district's
    weight is its share of the population whose centroids fall inside it.
    """
    if cell_size <= 0:
        raise ValueError("cell_size must be positive")
    bbox = net.bbox()
    x0, y0, x1, y1 = bbox
    grid = DistrictGrid(cell_size, bbox, {}, {})

    pop: dict[Cell, int] = {}
    dropped = 0
    for rec in records:
        if rec.population < 0:
            raise DemandError(f"negative population at ({rec.x}, {rec.y})")
        if not (x0 <= rec.x <= x1 and y0 <= rec.y <= y1):
            dropped += 1
            continue
        if rec.population == 0:
            continue
        cell = grid.cell_of(rec.x, rec.y)
        pop[cell] = pop.get(cell, 0) + rec.population
    if dropped:
        log.warning("dropped %d population record(s) outside the network bounding box", dropped)
    if not pop:
        raise DemandError("no populated record inside the network bounding box")

    for eid in net.spawnable_edges(vehicle_length):
        src = net.nodes[net.edges[eid].source]
        grid.cell_edges.setdefault(grid.cell_of(src.x, src.y), []).append(eid)

    empty = sorted(c for c in pop if not grid.cell_edges.get(c))
    if empty:
        log.warning("districts %s hold population but no spawnable street; "
                    "their weight is redistributed", empty)
        for c in empty:
            del pop[c]
    if not pop:
        raise DemandError("no populated district contains a spawnable street")
    total = sum(pop.values())
    grid.weights = {c: pop[c] / total for c in sorted(pop)}
    return grid


def _draw_destinations(origins: Sequence[str], spawnable: Sequence[str],
                       rng: np.random.Generator) -> list[str]:
    dests = []
    for o in origins:
        for _ in range(MAX_REDRAWS):
            d = spawnable[int(rng.integers(len(spawnable)))]
            if d != o:
                dests.append(d)
                break
        else:
            raise DemandError(f"could not draw a destination different from {o!r}")
    return dests


def sample_trips(grid: DistrictGrid, net: RoadNetwork, n: int, seed: int,
                 vehicle_length: float = 5.0) -> list[tuple[str, str]]:
    """Origins by district weight (street uniform within district), destinations uniform."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    cells = grid.cells
    p = np.array([grid.weights[c] for c in cells])
    picks = rng.choice(len(cells), size=n, p=p / p.sum())
    origins = []
    for k in picks:
        edges = grid.cell_edges[cells[int(k)]]
        origins.append(edges[int(rng.integers(len(edges)))])
    dests = _draw_destinations(origins, net.spawnable_edges(vehicle_length), rng)
    return list(zip(origins, dests))


def sample_uniform_trips(net: RoadNetwork, n: int, seed: int,
                         vehicle_length: float = 5.0) -> list[tuple[str, str]]:
    """Origins and destinations both uniform over spawnable streets."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    spawnable = net.spawnable_edges(vehicle_length)
    origins = [spawnable[int(i)] for i in rng.integers(len(spawnable), size=n)]
    dests = _draw_destinations(origins, spawnable, rng)
    return list(zip(origins, dests))


@dataclass(frozen=True)
class FleetSize:
    cars: int
    exact: float


def compute_fleet_size(population: float, commute_share: float, periods: int = 6) -> FleetSize:
    """Cars on the road in one planning period, rounded to the nearest thousand."""
    if population <= 0 or not 0 < commute_share <= 1 or periods < 1:
        raise ValueError("need population > 0, 0 < commute_share <= 1, periods >= 1")
    exact = population * commute_share / periods
    cars = int(math.floor(exact / 1000.0 + 0.5)) * 1000
    log.info("fleet size %.1f rounded to %d", exact, cars)
    return FleetSize(cars, exact)


def write_trips_csv(trips: Sequence[tuple[str, str]], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["origin_edge", "dest_edge"])
        w.writerows(trips)
