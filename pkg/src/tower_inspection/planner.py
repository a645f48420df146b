"""Exploration paths, inspection waypoints, safety checks and point-mass trajectories.

Every leg is a rest-to-rest move. Each axis follows a time-optimal bang-bang
(triangular or trapezoidal) velocity profile, and the faster axes are slowed
so that all axes arrive together with the slowest one.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from loguru import logger
from numpy.typing import ArrayLike, NDArray

from .errors import InfeasibleStandoff, InvalidParameters, NoFeasibleDetour, NoFeasibleWaypoint
from .geometry import Vec3, vec3, yaw_towards
from .localization import InsulatorEstimate
from .scene import TowerModel

DEFAULT_MARGIN = 1.5
DEFAULT_CLEARANCE = 2.0
DEFAULT_CHECK_DT = 0.05
DEFAULT_AZIMUTH_OFFSET_DEG = 35.0
PUSH_STEP = 0.25
MAX_PUSH = 20.0
UP = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class DynamicLimits:
    v_max_h: float
    v_max_v: float
    a_max_h: float
    a_max_v: float

    def __post_init__(self) -> None:
        if min(self.v_max_h, self.v_max_v, self.a_max_h, self.a_max_v) <= 0:
            raise InvalidParameters("Dynamic limits must be positive.")

    @classmethod
    def simulation(cls) -> DynamicLimits:
        return cls(v_max_h=3.0, v_max_v=3.0, a_max_h=12.0, a_max_v=12.0)

    @classmethod
    def real_world(cls) -> DynamicLimits:
        return cls(v_max_h=1.0, v_max_v=1.0, a_max_h=3.0, a_max_v=3.0)

    @property
    def velocity(self) -> NDArray[np.float64]:
        return np.array([self.v_max_h, self.v_max_h, self.v_max_v])

    @property
    def acceleration(self) -> NDArray[np.float64]:
        return np.array([self.a_max_h, self.a_max_h, self.a_max_v])


def axis_min_time(distance: float, v_max: float, a_max: float) -> float:
    """Rest-to-rest minimum time for a 1-D move of ``|distance|``."""
    d = abs(distance)
    if d == 0.0:
        return 0.0
    if d <= v_max * v_max / a_max:
        return 2.0 * math.sqrt(d / a_max)
    return d / v_max + v_max / a_max


def cruise_speed(distance: float, a_max: float, duration: float) -> float:
    """Peak speed that covers ``|distance|`` in exactly ``duration`` at acceleration ``a_max``."""
    d = abs(distance)
    if d == 0.0 or duration <= 0.0:
        return 0.0
    disc = max(0.0, (a_max * duration) ** 2 - 4.0 * a_max * d)
    return 0.5 * (a_max * duration - math.sqrt(disc))


@dataclass(frozen=True, eq=False)
class Segment:
    start: Vec3
    goal: Vec3
    duration: float
    cruise: NDArray[np.float64]
    accel: NDArray[np.float64]

    @property
    def ramp(self) -> NDArray[np.float64]:
        return self.cruise / self.accel

    def sample(self, tau: ArrayLike) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        """Positions and velocities (K, 3) at local times ``tau`` (clamped to the segment)."""
        t = np.clip(np.asarray(tau, dtype=float).reshape(-1, 1), 0.0, self.duration)
        delta = self.goal - self.start
        sign = np.sign(delta)
        ramp = self.ramp
        a, vc, T = self.accel, self.cruise, self.duration
        accelerating = t < ramp
        cruising = t < T - ramp
        ramp_distance = 0.5 * a * ramp * ramp
        distance = np.where(
            accelerating,
            0.5 * a * t * t,
            np.where(
                cruising,
                ramp_distance + vc * (t - ramp),
                np.abs(delta) - 0.5 * a * (T - t) ** 2,
            ),
        )
        speed = np.where(accelerating, a * t, np.where(cruising, vc, a * (T - t)))
        return self.start + sign * distance, sign * speed


def plan_segment(start: ArrayLike, goal: ArrayLike, limits: DynamicLimits) -> Trajectory:
    p0, p1 = vec3(start), vec3(goal)
    delta = p1 - p0
    v, a = limits.velocity, limits.acceleration
    duration = max(axis_min_time(float(d), float(vm), float(am)) for d, vm, am in zip(delta, v, a))
    cruise = np.array([cruise_speed(float(d), float(am), duration) for d, am in zip(delta, a)])
    return Trajectory((Segment(p0, p1, duration, cruise, a.copy()),))


@dataclass(frozen=True, eq=False)
class Trajectory:
    segments: tuple[Segment, ...]
    starts: NDArray[np.float64] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if not self.segments:
            raise InvalidParameters("A trajectory needs at least one segment.")
        durations = np.array([s.duration for s in self.segments])
        object.__setattr__(self, "starts", np.concatenate(([0.0], np.cumsum(durations)[:-1])))

    @classmethod
    def chain(cls, *trajectories: Trajectory) -> Trajectory:
        return cls(tuple(seg for traj in trajectories for seg in traj.segments))

    @property
    def total_duration(self) -> float:
        return float(sum(s.duration for s in self.segments))

    @property
    def start(self) -> Vec3:
        return self.segments[0].start

    @property
    def goal(self) -> Vec3:
        return self.segments[-1].goal

    @property
    def waypoints(self) -> list[Vec3]:
        return [self.start] + [s.goal for s in self.segments]

    def sample_many(self, times: ArrayLike) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        t = np.asarray(times, dtype=float).reshape(-1)
        index = np.clip(np.searchsorted(self.starts, t, side="right") - 1, 0, len(self.segments) - 1)
        positions = np.empty((t.size, 3))
        velocities = np.empty((t.size, 3))
        for k, segment in enumerate(self.segments):
            mask = index == k
            if np.any(mask):
                positions[mask], velocities[mask] = segment.sample(t[mask] - self.starts[k])
        return positions, velocities

    def sample(self, t: float) -> tuple[Vec3, Vec3]:
        positions, velocities = self.sample_many([t])
        return positions[0], velocities[0]

    def sample_times(self, dt: float) -> NDArray[np.float64]:
        """``0, dt, 2dt, ...`` strictly below the end, plus the end itself."""
        if dt <= 0:
            raise InvalidParameters("Sampling step must be positive.")
        total = self.total_duration
        return np.append(np.arange(0.0, total, dt), total)

    def positions(self, dt: float) -> NDArray[np.float64]:
        return self.sample_many(self.sample_times(dt))[0]


def estimate_line_direction(center: ArrayLike, neighbors: Sequence[ArrayLike]) -> Vec3:
    """Horizontal unit vector along the power line, from approximate neighbor coordinates."""
    c = vec3(center)
    offsets = [vec3(n) - c for n in neighbors]
    offsets = [np.array([o[0], o[1], 0.0]) for o in offsets if math.hypot(o[0], o[1]) > 1e-9]
    if not offsets:
        return np.array([1.0, 0.0, 0.0])
    reference = offsets[0] / np.linalg.norm(offsets[0])
    total = np.zeros(3)
    for o in offsets:
        u = o / np.linalg.norm(o)
        total += u if u @ reference >= 0 else -u
    direction = total / np.linalg.norm(total)
    return -direction if direction[int(np.argmax(np.abs(direction)))] < 0 else direction


@dataclass(frozen=True, eq=False)
class Corridor:
    """Box around the conductors between the tower and one neighbor."""

    origin: Vec3
    direction: Vec3
    near: float
    far: float
    half_width: float
    top: float

    def contains(self, points: NDArray[np.float64]) -> NDArray[np.bool_]:
        offsets = points - self.origin
        along = offsets @ self.direction
        lateral = offsets @ np.cross(UP, self.direction)
        return (along > self.near) & (along < self.far) & (np.abs(lateral) < self.half_width) & (
            points[:, 2] < self.top
        )


@dataclass(frozen=True, eq=False)
class SafetyRegion:
    tower_center: Vec3
    line_direction: Vec3
    half_width: float
    height: float
    margin: float
    line_corridors: tuple[Corridor, ...] = ()
    clearance: float = DEFAULT_CLEARANCE
    ceiling: float | None = None

    def __post_init__(self) -> None:
        if self.margin <= 0:
            raise InvalidParameters("Safety margin must be positive.")
        object.__setattr__(self, "tower_center", vec3(self.tower_center))
        object.__setattr__(self, "line_direction", vec3(self.line_direction))
        object.__setattr__(self, "line_corridors", tuple(self.line_corridors))

    @property
    def lateral_direction(self) -> Vec3:
        return np.cross(UP, self.line_direction)

    @property
    def top(self) -> float:
        return float(self.tower_center[2] + self.height)

    @property
    def transit_altitude(self) -> float:
        return self.top + self.clearance

    def to_tower_frame(self, points: ArrayLike) -> NDArray[np.float64]:
        offsets = np.asarray(points, dtype=float).reshape(-1, 3) - self.tower_center
        return np.column_stack(
            (offsets @ self.line_direction, offsets @ self.lateral_direction, offsets[:, 2])
        )

    def in_tower_box(self, points: ArrayLike) -> NDArray[np.bool_]:
        local = self.to_tower_frame(points)
        return (
            (np.abs(local[:, 0]) < self.half_width)
            & (np.abs(local[:, 1]) < self.half_width)
            & (local[:, 2] < self.height)
        )

    def contains(self, points: ArrayLike) -> NDArray[np.bool_]:
        """True where a point lies strictly inside the tower box or a corridor."""
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        inside = self.in_tower_box(pts)
        for corridor in self.line_corridors:
            inside |= corridor.contains(pts)
        return inside

    def side_of(self, point: ArrayLike) -> float:
        """+1 or -1: lateral side of the line a point lies on (0 lateral counts as +1)."""
        lateral = float((vec3(point) - self.tower_center) @ self.lateral_direction)
        return -1.0 if lateral < 0 else 1.0


def build_safety_region(
    tower: TowerModel,
    neighbors: Sequence[ArrayLike],
    margin: float = DEFAULT_MARGIN,
    clearance: float = DEFAULT_CLEARANCE,
    ceiling: float | None = None,
) -> SafetyRegion:
    center = tower.center
    line = estimate_line_direction(center, neighbors)
    half_width = 0.5 * tower.width + margin
    height = tower.height + margin
    corridors = []
    for neighbor in neighbors:
        offset = vec3(neighbor) - center
        horizontal = np.array([offset[0], offset[1], 0.0])
        distance = float(np.linalg.norm(horizontal))
        if distance - half_width <= half_width:
            continue
        corridors.append(
            Corridor(
                origin=center,
                direction=horizontal / distance,
                near=half_width,
                far=distance - half_width,
                half_width=half_width,
                top=center[2] + height,
            )
        )
    return SafetyRegion(center, line, half_width, height, margin, tuple(corridors), clearance, ceiling)


def check_safety(traj: Trajectory, safety: SafetyRegion, dt: float = DEFAULT_CHECK_DT) -> bool:
    return not bool(np.any(safety.contains(traj.positions(dt))))


class ExplorationWaypoint(NamedTuple):
    position: Vec3
    gaze_yaw: float


@dataclass(frozen=True, eq=False)
class ExplorationPath:
    waypoints: tuple[ExplorationWaypoint, ...]
    standoff: float

    def __len__(self) -> int:
        return len(self.waypoints)

    @property
    def positions(self) -> NDArray[np.float64]:
        return np.array([w.position for w in self.waypoints])


def build_exploration_path(
    tower: TowerModel,
    neighbors: Sequence[ArrayLike],
    standoff: float,
    limits: DynamicLimits,
    safety: SafetyRegion,
    *,
    sweep_step: float = 4.0,
    sweep_columns: int = 3,
    column_spacing: float = 4.0,
    altitude_band: tuple[float, float] = (0.4, 1.05),
) -> ExplorationPath:
    """Vertical lawnmower sweeps on both lateral sides, joined by a transit over the tower.

    The +lateral side is swept first. The side change climbs to the transit
    altitude on the last column and crosses over the tower at that column.
    """
    if standoff < safety.half_width:
        raise InfeasibleStandoff(
            f"Standoff {standoff} m is inside the tower envelope (half width {safety.half_width} m)."
        )
    center = tower.center
    line = estimate_line_direction(center, neighbors)
    lateral = np.cross(UP, line)
    low, high = (center[2] + f * tower.height for f in altitude_band)
    levels = np.linspace(low, high, max(2, math.ceil((high - low) / sweep_step) + 1))
    columns = (np.arange(sweep_columns) - 0.5 * (sweep_columns - 1)) * column_spacing

    def at(x: float, side: float, z: float) -> Vec3:
        p = center + x * line + side * standoff * lateral
        return np.array([p[0], p[1], z])

    positions: list[Vec3] = []
    for k, x in enumerate(columns):
        heights = levels if k % 2 == 0 else levels[::-1]
        positions += [at(x, 1.0, z) for z in heights]
    last_x = columns[-1]
    positions += [at(last_x, 1.0, safety.transit_altitude), at(last_x, -1.0, safety.transit_altitude)]
    for k, x in enumerate(columns[::-1]):
        heights = levels[::-1] if k % 2 == 0 else levels
        positions += [at(x, -1.0, z) for z in heights]

    points = np.array(positions)
    if np.any(safety.contains(points)):
        raise InfeasibleStandoff("Exploration waypoints fall inside the safety region.")
    for a, b in zip(points, points[1:]):
        if not check_safety(plan_segment(a, b, limits), safety):
            raise InfeasibleStandoff("Exploration path crosses the safety region.")
    waypoints = tuple(ExplorationWaypoint(p, yaw_towards(p, center)) for p in points)
    logger.debug(f"Exploration path: {len(waypoints)} waypoints at standoff {standoff} m")
    return ExplorationPath(waypoints, standoff)


@dataclass(frozen=True, eq=False)
class InspectionWaypoint:
    position: Vec3
    gaze_target: Vec3
    insulator_id: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "position", vec3(self.position))
        object.__setattr__(self, "gaze_target", vec3(self.gaze_target))

    @property
    def gaze_yaw(self) -> float:
        return yaw_towards(self.position, self.gaze_target)


def _azimuth_offsets(per_insulator: int, offset_deg: float) -> NDArray[np.float64]:
    if per_insulator == 1:
        return np.zeros(1)
    return np.radians(np.linspace(-offset_deg, offset_deg, per_insulator))


def compute_inspection_waypoints(
    est: InsulatorEstimate,
    standoff: float,
    per_insulator: int,
    safety: SafetyRegion,
    insulator_id: int = 0,
    azimuth_offset_deg: float = DEFAULT_AZIMUTH_OFFSET_DEG,
) -> list[InspectionWaypoint]:
    """Horizontal ring positions around a world-frame estimate, fanned about the outward normal.

    A position inside the safety region is pushed outward along the normal in
    ``PUSH_STEP`` increments.
    """
    if standoff <= 0 or per_insulator < 1:
        raise InvalidParameters("standoff must be positive and per_insulator >= 1.")
    center = est.center
    normal = safety.side_of(center) * safety.lateral_direction
    waypoints = []
    for angle in _azimuth_offsets(per_insulator, azimuth_offset_deg):
        c, s = math.cos(angle), math.sin(angle)
        direction = np.array([c * normal[0] - s * normal[1], s * normal[0] + c * normal[1], 0.0])
        position = center + standoff * direction
        for step in range(int(MAX_PUSH / PUSH_STEP) + 1):
            candidate = position + step * PUSH_STEP * normal
            if not safety.contains(candidate)[0]:
                break
        else:
            raise NoFeasibleWaypoint(f"No safe waypoint for insulator {insulator_id}.")
        if step:
            logger.debug(f"Waypoint for insulator {insulator_id} pushed out {step * PUSH_STEP:.2f} m")
        waypoints.append(InspectionWaypoint(candidate, center, insulator_id))
    return waypoints


def detour_via_overflight(
    start: ArrayLike,
    goal: ArrayLike,
    safety: SafetyRegion,
    limits: DynamicLimits,
    dt: float = DEFAULT_CHECK_DT,
) -> Trajectory:
    """Fly over the tower through an apex above its center at the transit altitude.

    Tries start -> apex -> goal first, then climb -> apex -> descend.
    """
    p0, p1 = vec3(start), vec3(goal)
    altitude = safety.transit_altitude
    if safety.ceiling is not None and altitude > safety.ceiling:
        raise NoFeasibleDetour(f"Transit altitude {altitude:.1f} m is above the ceiling.")
    apex = np.array([safety.tower_center[0], safety.tower_center[1], altitude])
    direct = Trajectory.chain(plan_segment(p0, apex, limits), plan_segment(apex, p1, limits))
    if check_safety(direct, safety, dt):
        return direct
    climb = np.array([p0[0], p0[1], altitude])
    descend = np.array([p1[0], p1[1], altitude])
    legs = [p0, climb, apex, descend, p1]
    stepped = Trajectory.chain(*(plan_segment(a, b, limits) for a, b in zip(legs, legs[1:])))
    if check_safety(stepped, safety, dt):
        return stepped
    raise NoFeasibleDetour(f"No safe overflight from {p0.round(2)} to {p1.round(2)}.")


def plan_path(
    start: ArrayLike,
    goal: ArrayLike,
    safety: SafetyRegion,
    limits: DynamicLimits,
    dt: float = DEFAULT_CHECK_DT,
) -> Trajectory:
    direct = plan_segment(start, goal, limits)
    if check_safety(direct, safety, dt):
        return direct
    logger.debug("Direct leg violates the safety region, planning an overflight")
    return detour_via_overflight(start, goal, safety, limits, dt)
