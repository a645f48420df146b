"""Two-flight baseline: a full scan flight, then an inspection flight in TSP order.

The inspection flight is planned from ground-truth insulator poses (the map the
scan flight would have produced) and is an open tour starting at the depot.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import StrEnum

import numpy as np
from loguru import logger
from numpy.typing import ArrayLike, NDArray

from .common import make_rng
from .errors import InvalidParameters, TooLargeForExact
from .geometry import FRAME_WORLD
from .localization import InsulatorEstimate, LocalizationMethod, canonical_direction
from .mission import MissionConfig
from .planner import (
    DynamicLimits,
    ExplorationPath,
    InspectionWaypoint,
    SafetyRegion,
    build_exploration_path,
    build_safety_region,
    compute_inspection_waypoints,
    plan_path,
)
from .scene import SceneConfig, TowerKind, default_scene, ground_truth

MAX_EXACT_NODES = 13


class TspMode(StrEnum):
    EXACT = "Exact"
    TWO_OPT = "TwoOpt"


@dataclass(frozen=True, eq=False)
class CostMatrix:
    durations: NDArray[np.float64]

    def __post_init__(self) -> None:
        d = np.array(self.durations, dtype=float)
        if d.ndim != 2 or d.shape[0] != d.shape[1] or d.shape[0] == 0:
            raise InvalidParameters("Cost matrix must be square and non-empty.")
        if np.any(d < 0) or np.any(np.diag(d) != 0):
            raise InvalidParameters("Costs must be non-negative with a zero diagonal.")
        if not np.allclose(d, d.T, atol=1e-9, rtol=0.0):
            raise InvalidParameters("Cost matrix must be symmetric.")
        d.setflags(write=False)
        object.__setattr__(self, "durations", d)

    def __len__(self) -> int:
        return int(self.durations.shape[0])


@dataclass(frozen=True)
class Tour:
    order: tuple[int, ...]
    total_duration: float


def tour_duration(costs: CostMatrix, order: ArrayLike) -> float:
    o = np.asarray(order, dtype=int)
    return float(np.sum(costs.durations[o[:-1], o[1:]]))


def _exploration(
    scene: SceneConfig, limits: DynamicLimits, standoff: float, config: MissionConfig
) -> tuple[SafetyRegion, ExplorationPath]:
    neighbors = list(scene.neighbor_tower_positions)
    safety = build_safety_region(scene.tower, neighbors, config.margin, config.clearance)
    path = build_exploration_path(
        scene.tower,
        neighbors,
        standoff,
        limits,
        safety,
        sweep_step=config.sweep_step,
        sweep_columns=config.sweep_columns,
        column_spacing=config.column_spacing,
    )
    return safety, path


def scan_flight_duration(
    scene: SceneConfig,
    limits: DynamicLimits,
    standoff: float,
    config: MissionConfig | None = None,
) -> float:
    """Time to fly the whole exploration path with no inspection stops."""
    config = config or MissionConfig()
    safety, path = _exploration(scene, limits, standoff, config)
    total = 0.0
    for a, b in zip(path.waypoints, path.waypoints[1:]):
        total += plan_path(a.position, b.position, safety, limits, config.check_dt).total_duration
    return total


def build_cost_matrix(
    waypoints: list[InspectionWaypoint],
    depot: ArrayLike,
    safety: SafetyRegion,
    limits: DynamicLimits,
    check_dt: float = 0.05,
) -> CostMatrix:
    """Leg durations between the depot (node 0) and every waypoint; unsafe legs fly over the tower."""
    nodes = [np.asarray(depot, dtype=float)] + [w.position for w in waypoints]
    n = len(nodes)
    durations = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            durations[i, j] = plan_path(nodes[i], nodes[j], safety, limits, check_dt).total_duration
            durations[j, i] = durations[i, j]
    return CostMatrix(durations)


def _held_karp(costs: NDArray[np.float64]) -> Tour:
    """Open-path Held-Karp from node 0 over bitmasks of the remaining nodes."""
    m = costs.shape[0] - 1
    full = 1 << m
    sub = costs[1:, 1:]
    dp = np.full((full, m), np.inf)
    parent = np.full((full, m), -1, dtype=np.int64)
    bits = 1 << np.arange(m)
    for j in range(m):
        dp[1 << j, j] = costs[0, j + 1]
    for mask in range(1, full):
        members = np.flatnonzero(mask & bits)
        if members.size < 2:
            continue
        previous = mask ^ bits[members]
        candidates = dp[previous] + sub[:, members].T
        best = np.argmin(candidates, axis=1)
        dp[mask, members] = candidates[np.arange(members.size), best]
        parent[mask, members] = best

    mask = full - 1
    last = int(np.argmin(dp[mask]))
    total = float(dp[mask, last])
    path = []
    while last != -1:
        path.append(last + 1)
        mask, last = mask ^ (1 << last), int(parent[mask, last])
    return Tour((0, *reversed(path)), total)


def _nearest_neighbor(costs: NDArray[np.float64]) -> list[int]:
    n = costs.shape[0]
    order = [0]
    remaining = set(range(1, n))
    while remaining:
        current = order[-1]
        nxt = min(remaining, key=lambda k: (costs[current, k], k))
        order.append(nxt)
        remaining.remove(nxt)
    return order


def _two_opt(costs: NDArray[np.float64], order: list[int]) -> list[int]:
    """First-improvement 2-opt on an open path with a fixed first node."""
    n = len(order)
    improved = True
    while improved:
        improved = False
        for i in range(1, n - 1):
            for j in range(i + 1, n):
                a, b, c = order[i - 1], order[i], order[j]
                delta = costs[a, c] - costs[a, b]
                if j + 1 < n:
                    d = order[j + 1]
                    delta += costs[b, d] - costs[c, d]
                if delta < -1e-12:
                    order[i : j + 1] = order[i : j + 1][::-1]
                    improved = True
    return order


def solve_tsp(costs: CostMatrix, mode: TspMode | str = TspMode.EXACT) -> Tour:
    mode = TspMode(mode)
    n = len(costs)
    if n == 1:
        return Tour((0,), 0.0)
    if mode is TspMode.EXACT:
        if n > MAX_EXACT_NODES:
            raise TooLargeForExact(f"Exact TSP supports up to {MAX_EXACT_NODES} nodes, got {n}.")
        return _held_karp(costs.durations)
    order = _two_opt(costs.durations, _nearest_neighbor(costs.durations))
    return Tour(tuple(order), tour_duration(costs, order))


@dataclass(frozen=True)
class TwoFlightResult:
    t_scan: float
    t_tsp: float
    total: float
    tour: Tour
    n_waypoints: int


def ground_truth_waypoints(
    scene: SceneConfig, safety: SafetyRegion, config: MissionConfig
) -> list[InspectionWaypoint]:
    waypoints: list[InspectionWaypoint] = []
    for gt in ground_truth(scene):
        est = InsulatorEstimate(
            gt.center, canonical_direction(gt.axis), LocalizationMethod.DBSCAN_RANSAC, frame=FRAME_WORLD
        )
        waypoints += compute_inspection_waypoints(
            est, config.inspection_standoff, config.per_insulator, safety, gt.id
        )
    return waypoints


def two_flight_duration(
    scene: SceneConfig,
    n_waypoints: int,
    limits: DynamicLimits,
    config: MissionConfig | None = None,
    mode: TspMode | str | None = None,
) -> TwoFlightResult:
    """T_scan, T_tsp (with capture dwells) and their sum for the first ``n_waypoints`` waypoints.

    ``mode`` defaults to Exact when the instance is small enough, TwoOpt otherwise.
    """
    config = config or MissionConfig()
    safety, path = _exploration(scene, limits, config.exploration_standoff, config)
    t_scan = scan_flight_duration(scene, limits, config.exploration_standoff, config)
    waypoints = ground_truth_waypoints(scene, safety, config)[: max(0, n_waypoints)]
    if len(waypoints) < n_waypoints:
        logger.info(f"Scene offers {len(waypoints)} waypoints, capping N={n_waypoints}")
    costs = build_cost_matrix(waypoints, path.waypoints[0].position, safety, limits, config.check_dt)
    if mode is None:
        mode = TspMode.EXACT if len(costs) <= MAX_EXACT_NODES else TspMode.TWO_OPT
    tour = solve_tsp(costs, mode)
    t_tsp = tour.total_duration + len(waypoints) * config.dwell
    return TwoFlightResult(t_scan, t_tsp, t_scan + t_tsp, tour, len(waypoints))


def standard_scene(
    seed: int,
    n_insulators: int,
    kind: TowerKind | str = TowerKind.A,
    base: SceneConfig | None = None,
) -> SceneConfig:
    """A tower keeping a seeded subset of ``n_insulators`` of its insulators.

    The tower comes from ``base`` when given, otherwise from the default scene
    of ``kind``.
    """
    full = base or default_scene(kind, seed)
    tower = full.tower
    count = min(max(0, n_insulators), len(tower.insulators))
    rng = make_rng(seed, "scene", count)
    picked = rng.choice(len(tower.insulators), size=count, replace=False)
    ids = sorted(tower.insulators[int(i)].id for i in picked)
    return replace(full, towers=(tower.with_insulators(ids),), seed=seed)


def max_waypoints(scene: SceneConfig, per_insulator: int) -> int:
    return len(scene.tower.insulators) * per_insulator


def insulators_for(n_waypoints: int, per_insulator: int) -> int:
    return math.ceil(n_waypoints / per_insulator)
