"""Online single-flight inspection: a stepped simulation of the inspection state machine.

The UAV sweeps the exploration path. Perception runs on fixed ticks in every
state: the LiDAR clock runs at ``lidar_period`` (10 Hz) and the detector fires
every ``detection_period`` (2 Hz), which must fall on a LiDAR tick. Only the
scans that coincide with a detection feed the fusion, so only those are
simulated. An estimate is registered only when its center lies near the ray
through the detection box and its axis is not close to horizontal (conductors,
crossarms and horizontal lattice members).

Each newly registered near-side insulator queues inspection waypoints. Whenever
the UAV reaches an exploration waypoint with a non-empty queue it leaves the
path, captures every queued waypoint and then returns to the exploration
waypoint that was next.
"""

from __future__ import annotations

import csv
import json
import math
from collections import deque
from collections.abc import Iterator, Mapping
from dataclasses import dataclass, field, fields, replace
from enum import StrEnum
from pathlib import Path
from typing import Any, NamedTuple

import numpy as np
from loguru import logger
from numpy.typing import ArrayLike

from .common import make_rng
from .errors import (
    DegenerateInput,
    InspectionError,
    InvalidParameters,
    NoCluster,
    NoFeasibleWaypoint,
    NoPointsWithinTau,
)
from .fusion import DetectionTracker, filter_by_bbox, project_cloud, ray_distance
from .geometry import RigidTransform, Vec3, vec3
from .localization import (
    InsulatorEstimate,
    LocalizationMethod,
    LocalizerParams,
    estimate_to_world,
    localize,
)
from .planner import (
    DynamicLimits,
    ExplorationPath,
    InspectionWaypoint,
    SafetyRegion,
    Trajectory,
    build_exploration_path,
    build_safety_region,
    compute_inspection_waypoints,
    plan_path,
)
from .scene import (
    SceneConfig,
    body_pose,
    camera_pose,
    lidar_pose,
    simulate_detection,
    simulate_lidar_scan,
)


class MissionState(StrEnum):
    EXPLORING = "Exploring"
    FLYING_TO_INSPECTION = "FlyingToInspection"
    CAPTURING = "Capturing"
    RETURNING_TO_PATH = "ReturningToPath"
    FINISHED = "Finished"


LEGAL_TRANSITIONS: dict[MissionState, frozenset[MissionState]] = {
    MissionState.EXPLORING: frozenset(
        {MissionState.FLYING_TO_INSPECTION, MissionState.FINISHED}
    ),
    MissionState.FLYING_TO_INSPECTION: frozenset({MissionState.CAPTURING, MissionState.FINISHED}),
    MissionState.CAPTURING: frozenset(
        {MissionState.FLYING_TO_INSPECTION, MissionState.RETURNING_TO_PATH, MissionState.FINISHED}
    ),
    MissionState.RETURNING_TO_PATH: frozenset({MissionState.EXPLORING, MissionState.FINISHED}),
    MissionState.FINISHED: frozenset(),
}


def legal_transitions() -> dict[MissionState, frozenset[MissionState]]:
    return dict(LEGAL_TRANSITIONS)


@dataclass(frozen=True)
class MissionConfig:
    dt: float = 0.1
    detection_period: float = 0.5
    lidar_period: float = 0.1
    exploration_standoff: float = 12.0
    inspection_standoff: float = 5.0
    per_insulator: int = 2
    dwell: float = 2.0
    merge_radius: float = 1.0
    arrival_tolerance: float = 0.2
    margin: float = 1.5
    clearance: float = 2.0
    sweep_step: float = 4.0
    sweep_columns: int = 3
    column_spacing: float = 4.0
    check_dt: float = 0.05
    max_gap: float = 1.0
    association_radius: float = 0.5
    ray_tolerance: float = 0.75
    min_axis_tilt_deg: float = 4.0
    max_duration: float = 7200.0
    method: LocalizationMethod = LocalizationMethod.DBSCAN_RANSAC
    limits: DynamicLimits = field(default_factory=DynamicLimits.simulation)
    localizer: LocalizerParams = field(default_factory=LocalizerParams)

    def __post_init__(self) -> None:
        steps = (self.dt, self.detection_period, self.lidar_period, self.check_dt)
        if min(*steps, self.max_duration) <= 0:
            raise InvalidParameters("Time steps and max_duration must be positive.")
        scans = self.detection_period / self.lidar_period
        if abs(scans - round(scans)) > 1e-9:
            raise InvalidParameters("detection_period must be a whole number of lidar_period ticks.")
        if self.per_insulator < 1 or self.dwell < 0 or self.merge_radius <= 0:
            raise InvalidParameters("per_insulator >= 1, dwell >= 0 and merge_radius > 0 required.")
        if self.association_radius <= 0 or self.ray_tolerance <= 0:
            raise InvalidParameters("association_radius and ray_tolerance must be positive.")
        if not 0 <= self.min_axis_tilt_deg < 90:
            raise InvalidParameters("min_axis_tilt_deg must lie in [0, 90).")
        object.__setattr__(self, "method", LocalizationMethod(self.method))

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> MissionConfig:
        """Defaults overridden by field name; nested ``limits``/``localizer`` take mappings."""
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise InvalidParameters(f"Unknown mission config keys: {', '.join(unknown)}")
        values = dict(data)
        if isinstance(values.get("limits"), Mapping):
            values["limits"] = DynamicLimits(**values["limits"])
        if isinstance(values.get("localizer"), Mapping):
            values["localizer"] = LocalizerParams(**values["localizer"])
        try:
            return replace(cls(), **values)
        except TypeError as e:
            raise InvalidParameters(f"Invalid mission config: {e}") from e


def load_mission_config(path: str | Path) -> MissionConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise InvalidParameters(f"Cannot read mission config {path}: {e}") from e
    if not isinstance(data, dict):
        raise InvalidParameters(f"Mission config {path} must hold a JSON object.")
    return MissionConfig.from_mapping(data)


class RegistrationOutcome(StrEnum):
    NEW = "New"
    DUPLICATE = "Duplicate"
    FAR_SIDE = "FarSide"


class Registration(NamedTuple):
    outcome: RegistrationOutcome
    id: int | None = None


@dataclass
class RegistryEntry:
    id: int
    world_center: Vec3
    orientation: Vec3
    inspected: bool = False


@dataclass
class InsulatorRegistry:
    merge_radius: float = 1.0
    entries: list[RegistryEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def get(self, insulator_id: int) -> RegistryEntry:
        return self.entries[insulator_id]


def _horizontal(v: Vec3) -> Vec3:
    return np.array([v[0], v[1], 0.0])


def register_insulator(
    reg: InsulatorRegistry,
    est: InsulatorEstimate,
    uav_pose: RigidTransform | ArrayLike,
    tower_center: ArrayLike,
) -> Registration:
    """Classify a world-frame estimate as a duplicate, a far-side sighting or a new insulator."""
    center = est.center
    if reg.entries:
        distances = [float(np.linalg.norm(e.world_center - center)) for e in reg.entries]
        nearest = int(np.argmin(distances))
        if distances[nearest] <= reg.merge_radius:
            return Registration(RegistrationOutcome.DUPLICATE, reg.entries[nearest].id)

    uav = uav_pose.translation if isinstance(uav_pose, RigidTransform) else vec3(uav_pose)
    tc = vec3(tower_center)
    if float(_horizontal(center - tc) @ _horizontal(uav - tc)) < 0:
        return Registration(RegistrationOutcome.FAR_SIDE)

    entry = RegistryEntry(len(reg.entries), center.copy(), est.orientation.copy())
    reg.entries.append(entry)
    return Registration(RegistrationOutcome.NEW, entry.id)


def rejection_reason(
    est: InsulatorEstimate,
    safety: SafetyRegion,
    ray_origin: ArrayLike | None = None,
    ray_direction: ArrayLike | None = None,
    *,
    ray_tolerance: float = 0.75,
    min_axis_tilt_deg: float = 4.0,
) -> str | None:
    """Why a world-frame estimate cannot be an insulator of the inspected tower, or None."""
    if not safety.in_tower_box(est.center)[0]:
        return "outside_tower"
    if ray_origin is not None and ray_direction is not None:
        offset = ray_distance(est.center, vec3(ray_origin), vec3(ray_direction))
        if offset > ray_tolerance:
            return "off_ray"
    if abs(float(est.orientation[2])) < math.sin(math.radians(min_axis_tilt_deg)):
        return "horizontal_axis"
    return None


class WaypointBuffer:
    """FIFO of inspection waypoints that ignores exact repeats."""

    def __init__(self) -> None:
        self._queue: deque[InspectionWaypoint] = deque()

    def __len__(self) -> int:
        return len(self._queue)

    def __iter__(self) -> Iterator[InspectionWaypoint]:
        return iter(self._queue)

    def push(self, waypoint: InspectionWaypoint) -> bool:
        for queued in self._queue:
            if queued.insulator_id == waypoint.insulator_id and np.allclose(
                queued.position, waypoint.position, atol=1e-6, rtol=0.0
            ):
                return False
        self._queue.append(waypoint)
        return True

    def pop(self) -> InspectionWaypoint:
        return self._queue.popleft()

    def pending_for(self, insulator_id: int) -> int:
        return sum(1 for w in self._queue if w.insulator_id == insulator_id)


class MissionEvent(NamedTuple):
    time: float
    kind: str
    detail: dict[str, Any]


class Capture(NamedTuple):
    insulator_id: int
    position: tuple[float, float, float]
    time: float


class FlightSample(NamedTuple):
    t: float
    x: float
    y: float
    z: float
    state: str


def _floats(v: ArrayLike) -> list[float]:
    return [float(x) for x in np.asarray(v, dtype=float).reshape(-1)]


@dataclass
class MissionLog:
    events: list[MissionEvent] = field(default_factory=list)
    flight_path: list[FlightSample] = field(default_factory=list)
    captures: list[Capture] = field(default_factory=list)
    registry: list[RegistryEntry] = field(default_factory=list)
    activity_durations: list[float] = field(default_factory=list)
    total_duration: float = 0.0
    failed: bool = False
    failure_reason: str | None = None

    def transitions(self) -> list[tuple[MissionState, MissionState]]:
        return [
            (MissionState(e.detail["from"]), MissionState(e.detail["to"]))
            for e in self.events
            if e.kind == "transition"
        ]

    def illegal_transitions(self) -> list[tuple[MissionState, MissionState]]:
        return [(a, b) for a, b in self.transitions() if b not in LEGAL_TRANSITIONS[a]]

    def to_dict(self) -> dict[str, Any]:
        return {
            "total_duration": self.total_duration,
            "failed": self.failed,
            "failure_reason": self.failure_reason,
            "events": [{"time": e.time, "kind": e.kind, **e.detail} for e in self.events],
            "captures": [c._asdict() for c in self.captures],
            "registry": [
                {
                    "id": r.id,
                    "center": _floats(r.world_center),
                    "orientation": _floats(r.orientation),
                    "inspected": r.inspected,
                }
                for r in self.registry
            ],
        }

    def write_json(self, path: str | Path) -> Path:
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        return target

    def write_csv(self, path: str | Path) -> Path:
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        with target.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(FlightSample._fields)
            for sample in self.flight_path:
                writer.writerow([*(repr(v) for v in sample[:4]), sample.state])
        return target


class Mission:
    """Simulation state plus the stepping logic of the inspection state machine."""

    def __init__(self, scene: SceneConfig, config: MissionConfig | None = None) -> None:
        self.scene = scene
        self.config = config or MissionConfig()
        cfg = self.config
        tower = scene.tower
        neighbors = list(scene.neighbor_tower_positions)
        self.safety: SafetyRegion = build_safety_region(tower, neighbors, cfg.margin, cfg.clearance)
        self.path: ExplorationPath = build_exploration_path(
            tower,
            neighbors,
            cfg.exploration_standoff,
            cfg.limits,
            self.safety,
            sweep_step=cfg.sweep_step,
            sweep_columns=cfg.sweep_columns,
            column_spacing=cfg.column_spacing,
        )
        self.registry = InsulatorRegistry(cfg.merge_radius)
        self.buffer = WaypointBuffer()
        self.tracker = DetectionTracker(max_gap=cfg.max_gap, association_radius=cfg.association_radius)
        self.log = MissionLog()

        self._detector_rng = make_rng(scene.seed, "detector")
        self._lidar_rng = make_rng(scene.seed, "lidar")
        self.state = MissionState.EXPLORING
        self.time = 0.0
        first = self.path.waypoints[0]
        self.position = first.position.copy()
        self.yaw = first.gaze_yaw
        self.next_index = 1
        self.resume_index = 0
        self.target: InspectionWaypoint | None = None
        self._trajectory: Trajectory | None = None
        self._activity_start = 0.0
        self._activity_duration = 0.0
        self._next_tick = 0.0

        self._record_sample()
        self._perceive()
        self._next_tick = cfg.detection_period
        self._after_exploration_arrival(0)

    @property
    def finished(self) -> bool:
        return self.state is MissionState.FINISHED

    def _event(self, kind: str, **detail: Any) -> None:
        self.log.events.append(MissionEvent(self.time, kind, detail))

    def _transition(self, new_state: MissionState) -> None:
        if new_state is self.state:
            return
        self._event("transition", **{"from": self.state.value, "to": new_state.value})
        logger.debug(f"t={self.time:.2f} {self.state.value} -> {new_state.value}")
        self.state = new_state
        if new_state is MissionState.FINISHED:
            self._finalize()

    def _abort(self, reason: str) -> None:
        logger.warning(f"Mission aborted at t={self.time:.2f}: {reason}")
        self.log.failed = True
        self.log.failure_reason = reason
        self._event("planning_failure", reason=reason)
        self._transition(MissionState.FINISHED)

    def _finalize(self) -> None:
        self._trajectory = None
        self.log.total_duration = self.time
        self.log.registry = [replace(e) for e in self.registry.entries]
        self._event("finished", failed=self.log.failed)

    def _record_sample(self) -> None:
        x, y, z = _floats(self.position)
        self.log.flight_path.append(FlightSample(self.time, x, y, z, self.state.value))

    def _start_leg(self, goal: Vec3, yaw: float, state: MissionState) -> bool:
        try:
            trajectory = plan_path(self.position, goal, self.safety, self.config.limits, self.config.check_dt)
        except InspectionError as e:
            self._abort(f"{type(e).__name__}: {e}")
            return False
        self._transition(state)
        self._trajectory = trajectory
        self.yaw = yaw
        self._activity_start = self.time
        self._activity_duration = trajectory.total_duration
        return True

    def _start_dwell(self) -> None:
        self._transition(MissionState.CAPTURING)
        self._trajectory = None
        self._activity_start = self.time
        self._activity_duration = self.config.dwell

    def _fly_to_next_target(self) -> None:
        self.target = self.buffer.pop()
        self._start_leg(self.target.position, self.target.gaze_yaw, MissionState.FLYING_TO_INSPECTION)

    def _after_exploration_arrival(self, index: int) -> None:
        self.next_index = index + 1
        exhausted = self.next_index >= len(self.path)
        if len(self.buffer):
            self.resume_index = len(self.path) - 1 if exhausted else self.next_index
            self._fly_to_next_target()
        elif exhausted:
            self._transition(MissionState.FINISHED)
        else:
            goal = self.path.waypoints[self.next_index]
            self._start_leg(goal.position, goal.gaze_yaw, MissionState.EXPLORING)

    def _complete_activity(self) -> None:
        self.log.activity_durations.append(self._activity_duration)
        if self.state is MissionState.EXPLORING:
            self._after_exploration_arrival(self.next_index)
        elif self.state is MissionState.FLYING_TO_INSPECTION:
            self._start_dwell()
        elif self.state is MissionState.CAPTURING:
            self._record_capture()
            if len(self.buffer):
                self._fly_to_next_target()
            else:
                resume = self.path.waypoints[self.resume_index]
                self._start_leg(resume.position, resume.gaze_yaw, MissionState.RETURNING_TO_PATH)
        elif self.state is MissionState.RETURNING_TO_PATH:
            self._transition(MissionState.EXPLORING)
            self._after_exploration_arrival(self.resume_index)

    def _record_capture(self) -> None:
        target = self.target
        assert target is not None
        distance = float(np.linalg.norm(self.position - target.position))
        if distance > self.config.arrival_tolerance:
            logger.warning(f"Capture {distance:.2f} m away from waypoint of insulator {target.insulator_id}")
        self.log.captures.append(Capture(target.insulator_id, tuple(_floats(target.position)), self.time))
        self._event("capture", insulator_id=target.insulator_id, position=_floats(target.position))
        if self.buffer.pending_for(target.insulator_id) == 0:
            self.registry.get(target.insulator_id).inspected = True
        self.target = None

    def _perceive(self) -> None:
        scene = self.scene
        extrinsics = scene.extrinsics
        body = body_pose(self.position, self.yaw)
        cam = camera_pose(body, extrinsics)
        detections = simulate_detection(scene, cam, scene.camera, self._detector_rng, self.time)
        if not detections:
            return
        cloud = simulate_lidar_scan(scene, lidar_pose(body, extrinsics), self._lidar_rng, self.time)
        projections = project_cloud(cloud, extrinsics.T_BL, extrinsics.T_CB, scene.camera)
        for detection in detections:
            filtered = filter_by_bbox(
                cloud, projections, detection.bbox, extrinsics.T_BL, body_pose=body, timestamp=self.time
            )
            observation = self.tracker.update(filtered, cam, scene.camera)
            if observation is None:
                continue
            try:
                local = localize(self.config.method, observation.cloud, self.config.localizer)
            except (NoCluster, DegenerateInput, NoPointsWithinTau) as e:
                logger.info(f"Localization failed at t={self.time:.2f}: {e}")
                self._event("localization_failure", reason=str(e))
                continue
            self._handle_estimate(
                estimate_to_world(local, observation.body_pose),
                observation.ray_origin,
                observation.ray_direction,
            )

    def _handle_estimate(
        self,
        est: InsulatorEstimate,
        ray_origin: Vec3 | None = None,
        ray_direction: Vec3 | None = None,
    ) -> None:
        reason = rejection_reason(
            est,
            self.safety,
            ray_origin,
            ray_direction,
            ray_tolerance=self.config.ray_tolerance,
            min_axis_tilt_deg=self.config.min_axis_tilt_deg,
        )
        if reason is not None:
            logger.trace(f"Estimate at {np.round(est.center, 2)} rejected: {reason}")
            self._event("rejected", reason=reason, center=_floats(est.center))
            return
        registration = register_insulator(self.registry, est, self.position, self.safety.tower_center)
        self._event(
            "registration",
            outcome=registration.outcome.value,
            id=registration.id,
            center=_floats(est.center),
        )
        if registration.outcome is not RegistrationOutcome.NEW:
            return
        assert registration.id is not None
        logger.debug(f"Registered insulator {registration.id} at {np.round(est.center, 2)}")
        try:
            waypoints = compute_inspection_waypoints(
                est,
                self.config.inspection_standoff,
                self.config.per_insulator,
                self.safety,
                registration.id,
            )
        except NoFeasibleWaypoint as e:
            logger.warning(str(e))
            self._event("infeasible_waypoint", id=registration.id)
            return
        for waypoint in waypoints:
            self.buffer.push(waypoint)

    def step(self, dt: float | None = None) -> None:
        """Advance the clock by at most ``dt``, stopping exactly at the end of the current activity."""
        if self.finished:
            return
        dt = self.config.dt if dt is None else dt
        if dt <= 0:
            raise InvalidParameters("Step size must be positive.")
        activity_end = self._activity_start + self._activity_duration
        remaining = activity_end - self.time
        completed = remaining <= dt
        self.time = activity_end if completed else self.time + dt
        if self._trajectory is not None:
            self.position = self._trajectory.sample(self.time - self._activity_start)[0]
            if completed:
                self.position = self._trajectory.goal.copy()
        self._record_sample()

        if self.time >= self._next_tick:
            self._next_tick += self.config.detection_period * (
                1 + math.floor((self.time - self._next_tick) / self.config.detection_period)
            )
            self._perceive()
        if completed:
            self._complete_activity()
        if not self.finished and self.time > self.config.max_duration:
            self._abort(f"Mission exceeded {self.config.max_duration} s")

    def run(self) -> MissionLog:
        while not self.finished:
            self.step()
        return self.log


def run_mission(scene: SceneConfig, mission_cfg: MissionConfig | None = None) -> MissionLog:
    log = Mission(scene, mission_cfg).run()
    logger.debug(
        f"Mission finished in {log.total_duration:.2f} s, "
        f"{len(log.registry)} insulators, {len(log.captures)} captures"
    )
    return log
