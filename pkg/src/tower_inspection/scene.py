"""Synthetic tower scenes, a first-hit LiDAR model and a bounding-box detector model.

Every solid in a scene is a capsule (a segment swept by a sphere): insulators,
lattice members, crossarms, fittings and conductor stubs. Ray casting and
occlusion tests therefore share one intersection routine.
"""

from __future__ import annotations

import json
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field, replace
from enum import StrEnum
from functools import cached_property
from pathlib import Path
from typing import Any, NamedTuple

import numpy as np
from loguru import logger
from numpy.typing import ArrayLike, NDArray

from .errors import InspectionError, InvalidDimensions, InvalidParameters, SceneFormatError
from .geometry import (
    FRAME_BODY,
    FRAME_CAMERA,
    FRAME_LIDAR,
    FRAME_TOWER,
    FRAME_WORLD,
    BBox,
    CameraIntrinsics,
    PointCloud,
    RigidTransform,
    Vec3,
    compose,
    project_points,
    vec3,
)

LATTICE_LABEL = -1
CONDUCTOR_LABEL = -2
STRUCTURE_KINDS = ("lattice", "conductor")

MAX_PRIMITIVE_LENGTH = 3.0
LATTICE_RADIUS = 0.05
CROSSARM_RADIUS = 0.08
FITTING_RADIUS = 0.03
FITTING_LENGTH = 0.25
CONDUCTOR_RADIUS = 0.02
CONDUCTOR_REACH = 15.0
LATTICE_PANELS = 5

TOWER_A_LEVELS = (0.6, 0.75, 0.9)
TOWER_A_ARM = 0.4
TOWER_A_TILT_DEG = 10.0
TOWER_B_LEVEL = 0.85
TOWER_B_ARM = 0.47
TOWER_B_OFFSETS = (-0.45, -0.2, 0.2, 0.45)
TOWER_B_DROP = 0.1
TOWER_INSULATOR_COUNTS = {"A": 12, "B": 4}

MIN_TOWER_HEIGHT = 5.0
MIN_TOWER_WIDTH = 2.0
RAY_EPS = 1e-9
OCCLUSION_STEP = 0.05
OCCLUSION_CLEARANCE = 1.0


class TowerKind(StrEnum):
    A = "A"
    B = "B"


@dataclass(frozen=True, eq=False)
class InsulatorSpec:
    """Capsule-shaped insulator; ``length`` is tip to tip."""

    id: int
    center: Vec3
    axis: Vec3
    length: float = 1.2
    radius: float = 0.12

    def __post_init__(self) -> None:
        axis = vec3(self.axis)
        if abs(float(np.linalg.norm(axis)) - 1.0) > 1e-9:
            raise InvalidParameters(f"Insulator {self.id} axis is not a unit vector.")
        if self.radius <= 0 or self.length <= 2 * self.radius:
            raise InvalidDimensions(
                f"Insulator {self.id} needs radius > 0 and length > 2*radius "
                f"(got length={self.length}, radius={self.radius})."
            )
        object.__setattr__(self, "center", vec3(self.center))
        object.__setattr__(self, "axis", axis)
        object.__setattr__(self, "id", int(self.id))

    @property
    def core(self) -> tuple[Vec3, Vec3]:
        half = 0.5 * self.length - self.radius
        return self.center - half * self.axis, self.center + half * self.axis

    @property
    def tips(self) -> tuple[Vec3, Vec3]:
        half = 0.5 * self.length
        return self.center - half * self.axis, self.center + half * self.axis

    def transformed(self, T: RigidTransform) -> InsulatorSpec:
        return replace(self, center=T.apply(self.center), axis=T.rotate(self.axis))


@dataclass(frozen=True, eq=False)
class StructureSegment:
    start: Vec3
    end: Vec3
    radius: float
    kind: str = "lattice"
    insulator_id: int | None = None

    def __post_init__(self) -> None:
        if self.radius <= 0:
            raise InvalidDimensions("Structure segment radius must be positive.")
        if self.kind not in STRUCTURE_KINDS:
            raise InvalidParameters(f"Unknown structure kind {self.kind!r}.")
        object.__setattr__(self, "start", vec3(self.start))
        object.__setattr__(self, "end", vec3(self.end))

    @property
    def label(self) -> int:
        return LATTICE_LABEL if self.kind == "lattice" else CONDUCTOR_LABEL

    def transformed(self, T: RigidTransform) -> StructureSegment:
        return replace(self, start=T.apply(self.start), end=T.apply(self.end))


@dataclass(frozen=True, eq=False)
class TowerModel:
    kind: TowerKind
    pose: RigidTransform
    height: float
    width: float
    insulators: tuple[InsulatorSpec, ...] = ()
    structure: tuple[StructureSegment, ...] = ()
    subset: bool = False

    def __post_init__(self) -> None:
        if not (math.isfinite(self.height) and math.isfinite(self.width)):
            raise InvalidDimensions("Tower dimensions must be finite.")
        if self.height <= 0 or self.width <= 0:
            raise InvalidDimensions(
                f"Tower height and width must be positive (got {self.height}, {self.width})."
            )
        ids = [ins.id for ins in self.insulators]
        if len(ids) != len(set(ids)):
            raise InvalidParameters(f"Duplicate insulator ids on tower {self.kind}: {ids}.")
        object.__setattr__(self, "kind", TowerKind(self.kind))
        expected = TOWER_INSULATOR_COUNTS[self.kind]
        if not self.subset and len(ids) != expected:
            raise InvalidParameters(
                f"Tower {self.kind} carries {expected} insulators, got {len(ids)}; "
                "mark the tower as a subset to keep fewer."
            )
        object.__setattr__(self, "insulators", tuple(self.insulators))
        object.__setattr__(self, "structure", tuple(self.structure))

    @property
    def center(self) -> Vec3:
        return np.array(self.pose.translation)

    @property
    def line_axis(self) -> Vec3:
        """Local x of the tower, the direction the line leaves in."""
        return np.array(self.pose.rotation[:, 0])

    def with_insulators(self, ids: Iterable[int]) -> TowerModel:
        """Copy of the tower keeping only the listed insulators and their conductors."""
        keep = set(ids)
        return replace(
            self,
            subset=True,
            insulators=tuple(ins for ins in self.insulators if ins.id in keep),
            structure=tuple(
                seg
                for seg in self.structure
                if seg.kind == "lattice" or seg.insulator_id is None or seg.insulator_id in keep
            ),
        )


def _lattice(height: float, width: float) -> list[StructureSegment]:
    base, top = 0.2 * width, 0.08 * width
    signs = ((1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0))

    def corner(i: int, z: float) -> Vec3:
        half = base + (top - base) * z / height
        sx, sy = signs[i % 4]
        return np.array([sx * half, sy * half, z])

    levels = [height * k / LATTICE_PANELS for k in range(LATTICE_PANELS + 1)]
    members = [(corner(i, 0.0), corner(i, height)) for i in range(4)]
    for k in range(1, LATTICE_PANELS + 1):
        members += [(corner(i, levels[k]), corner(i + 1, levels[k])) for i in range(4)]
        members += [(corner(i, levels[k - 1]), corner(i + 1, levels[k])) for i in range(4)]
    return [StructureSegment(a, b, LATTICE_RADIUS) for a, b in members]


def _tower_a_fittings(
    height: float, width: float
) -> tuple[list[InsulatorSpec], list[StructureSegment]]:
    tilt = math.radians(TOWER_A_TILT_DEG)
    insulators: list[InsulatorSpec] = []
    segments: list[StructureSegment] = []
    for level in TOWER_A_LEVELS:
        z = level * height
        reach = TOWER_A_ARM * width
        segments.append(StructureSegment((0.0, -reach, z), (0.0, reach, z), CROSSARM_RADIUS))
        for side in (1.0, -1.0):
            attach = np.array([0.0, side * reach, z])
            for sx in (1.0, -1.0):
                direction = np.array([sx * math.cos(tilt), 0.0, -math.sin(tilt)])
                start = attach + FITTING_LENGTH * direction
                ins = InsulatorSpec(len(insulators), start + 0.6 * direction, direction)
                outer = start + ins.length * direction
                segments.append(StructureSegment(attach, start, FITTING_RADIUS))
                segments.append(
                    StructureSegment(
                        outer,
                        (sx * CONDUCTOR_REACH, outer[1], outer[2]),
                        CONDUCTOR_RADIUS,
                        "conductor",
                        ins.id,
                    )
                )
                insulators.append(ins)
    return insulators, segments


def _tower_b_fittings(
    height: float, width: float
) -> tuple[list[InsulatorSpec], list[StructureSegment]]:
    z_arm = TOWER_B_LEVEL * height
    reach = TOWER_B_ARM * width
    down = np.array([0.0, 0.0, -1.0])
    insulators: list[InsulatorSpec] = []
    segments = [StructureSegment((0.0, -reach, z_arm), (0.0, reach, z_arm), CROSSARM_RADIUS)]
    for offset in TOWER_B_OFFSETS:
        top = np.array([0.0, offset * width, z_arm - TOWER_B_DROP])
        ins = InsulatorSpec(len(insulators), top + 0.6 * down, down)
        bottom = top + ins.length * down
        segments.append(StructureSegment((0.0, top[1], z_arm), top, FITTING_RADIUS))
        for sx in (1.0, -1.0):
            segments.append(
                StructureSegment(
                    bottom,
                    (sx * CONDUCTOR_REACH, bottom[1], bottom[2]),
                    CONDUCTOR_RADIUS,
                    "conductor",
                    ins.id,
                )
            )
        insulators.append(ins)
    return insulators, segments


def build_tower(
    kind: TowerKind | str, pose: RigidTransform, height: float, width: float
) -> TowerModel:
    """Build tower A (12 near-horizontal insulators) or tower B (4 vertical insulators).

    Geometry is laid out in the tower frame (x along the line, z up) and then
    moved into the world by ``pose``.
    """
    if not (math.isfinite(height) and math.isfinite(width)):
        raise InvalidDimensions("Tower dimensions must be finite.")
    if height < MIN_TOWER_HEIGHT or width < MIN_TOWER_WIDTH:
        raise InvalidDimensions(
            f"Tower needs height >= {MIN_TOWER_HEIGHT} m and width >= {MIN_TOWER_WIDTH} m "
            f"(got {height}, {width})."
        )
    try:
        kind = TowerKind(kind)
    except ValueError as e:
        raise InvalidParameters(f"Unknown tower kind {kind!r}.") from e

    if kind is TowerKind.A:
        insulators, fittings = _tower_a_fittings(height, width)
    else:
        insulators, fittings = _tower_b_fittings(height, width)
    structure = _lattice(height, width) + fittings

    return TowerModel(
        kind=kind,
        pose=pose,
        height=height,
        width=width,
        insulators=tuple(ins.transformed(pose) for ins in insulators),
        structure=tuple(seg.transformed(pose) for seg in structure),
    )


@dataclass(frozen=True)
class LidarParams:
    horizontal_rays: int = 450
    vertical_rays: int = 80
    horizontal_fov: float = 360.0
    vertical_fov: float = 64.0
    max_range: float = 40.0
    range_noise_sigma: float = 0.02
    dropout_prob: float = 0.05
    pattern_jitter: bool = True

    def __post_init__(self) -> None:
        if self.horizontal_rays <= 0 or self.vertical_rays <= 0:
            raise InvalidParameters("Ray counts must be positive.")
        if not (0 < self.horizontal_fov <= 360 and 0 < self.vertical_fov <= 180):
            raise InvalidParameters("Field of view out of range.")
        if self.max_range <= 0 or self.range_noise_sigma < 0:
            raise InvalidParameters("max_range must be positive and sigma non-negative.")
        if not 0 <= self.dropout_prob <= 1:
            raise InvalidParameters("dropout_prob must lie in [0, 1].")


@dataclass(frozen=True)
class DetectorParams:
    detection_range: float = 14.0
    false_negative_prob: float = 0.05
    bbox_pixel_noise_sigma: float = 2.0
    bbox_inflation: float = 6.0

    def __post_init__(self) -> None:
        if self.detection_range <= 0:
            raise InvalidParameters("detection_range must be positive.")
        if not 0 <= self.false_negative_prob <= 1:
            raise InvalidParameters("false_negative_prob must lie in [0, 1].")
        if self.bbox_pixel_noise_sigma < 0:
            raise InvalidParameters("bbox_pixel_noise_sigma must be non-negative.")


def default_camera() -> CameraIntrinsics:
    return CameraIntrinsics(f_x=500.0, f_y=500.0, c_x=320.0, c_y=240.0, image_width=640, image_height=480)


@dataclass(frozen=True)
class Extrinsics:
    """Sensor mounting: ``T_BL`` maps L into B, ``T_CB`` maps B into C."""

    T_BL: RigidTransform
    T_CB: RigidTransform

    def __post_init__(self) -> None:
        if (self.T_BL.from_frame, self.T_BL.to_frame) != (FRAME_LIDAR, FRAME_BODY):
            raise InvalidParameters("T_BL must map frame L into frame B.")
        if (self.T_CB.from_frame, self.T_CB.to_frame) != (FRAME_BODY, FRAME_CAMERA):
            raise InvalidParameters("T_CB must map frame B into frame C.")

    @classmethod
    def default(cls) -> Extrinsics:
        # Camera looks along body +x; image right is body -y, image down is body -z.
        camera_mount = RigidTransform.from_ypr(
            -90.0, 0.0, -90.0, (0.1, 0.0, 0.0), FRAME_CAMERA, FRAME_BODY
        )
        return cls(
            T_BL=RigidTransform.from_translation(0.0, 0.0, 0.1, FRAME_LIDAR, FRAME_BODY),
            T_CB=camera_mount.inverse(),
        )


def body_pose(position: ArrayLike, yaw: float) -> RigidTransform:
    """Level UAV pose (B into W) at ``position`` heading ``yaw`` radians."""
    return RigidTransform.from_ypr(
        math.degrees(yaw), 0.0, 0.0, position, FRAME_BODY, FRAME_WORLD
    )


def lidar_pose(body: RigidTransform, extrinsics: Extrinsics) -> RigidTransform:
    return compose(body, extrinsics.T_BL)


def camera_pose(body: RigidTransform, extrinsics: Extrinsics) -> RigidTransform:
    return compose(body, extrinsics.T_CB.inverse())


@dataclass(frozen=True, eq=False)
class PrimitiveSet:
    """Flattened capsules; ``labels`` hold the insulator id, or a structure label."""

    starts: NDArray[np.float64]
    ends: NDArray[np.float64]
    radii: NDArray[np.float64]
    labels: NDArray[np.int64]

    def __len__(self) -> int:
        return int(self.radii.shape[0])

    def transformed(self, T: RigidTransform) -> PrimitiveSet:
        return PrimitiveSet(T.apply(self.starts), T.apply(self.ends), self.radii, self.labels)


def _subdivide(start: Vec3, end: Vec3) -> list[tuple[Vec3, Vec3]]:
    pieces = max(1, math.ceil(float(np.linalg.norm(end - start)) / MAX_PRIMITIVE_LENGTH))
    knots = np.linspace(0.0, 1.0, pieces + 1)
    return [(start + (end - start) * a, start + (end - start) * b) for a, b in zip(knots, knots[1:])]


def build_primitives(towers: Sequence[TowerModel]) -> PrimitiveSet:
    starts: list[Vec3] = []
    ends: list[Vec3] = []
    radii: list[float] = []
    labels: list[int] = []
    for tower in towers:
        for ins in tower.insulators:
            a, b = ins.core
            starts.append(a)
            ends.append(b)
            radii.append(ins.radius)
            labels.append(ins.id)
        for seg in tower.structure:
            for a, b in _subdivide(seg.start, seg.end):
                starts.append(a)
                ends.append(b)
                radii.append(seg.radius)
                labels.append(seg.label)
    return PrimitiveSet(
        np.array(starts, dtype=float).reshape(-1, 3),
        np.array(ends, dtype=float).reshape(-1, 3),
        np.array(radii, dtype=float),
        np.array(labels, dtype=np.int64),
    )


def primitive_samples(
    primitives: PrimitiveSet, step: float = OCCLUSION_STEP
) -> tuple[NDArray[np.float64], NDArray[np.int64]]:
    """Points at most ``step`` apart along every capsule axis, with the capsule's label."""
    if len(primitives) == 0:
        return np.zeros((0, 3)), np.zeros(0, dtype=np.int64)
    spans = primitives.ends - primitives.starts
    counts = np.ceil(np.linalg.norm(spans, axis=1) / step).astype(np.int64) + 1
    owner = np.repeat(np.arange(len(primitives)), counts)
    t = np.concatenate([np.linspace(0.0, 1.0, c) for c in counts.tolist()])
    return primitives.starts[owner] + t[:, None] * spans[owner], primitives.labels[owner]


@dataclass(frozen=True, eq=False)
class SceneConfig:
    towers: tuple[TowerModel, ...]
    neighbor_tower_positions: tuple[Vec3, ...] = ()
    lidar: LidarParams = field(default_factory=LidarParams)
    detector: DetectorParams = field(default_factory=DetectorParams)
    seed: int = 7
    camera: CameraIntrinsics = field(default_factory=default_camera)
    extrinsics: Extrinsics = field(default_factory=Extrinsics.default)

    def __post_init__(self) -> None:
        if not 0 <= int(self.seed) < 2**64:
            raise InvalidParameters("Scene seed must be a 64-bit unsigned integer.")
        object.__setattr__(self, "towers", tuple(self.towers))
        object.__setattr__(
            self, "neighbor_tower_positions", tuple(vec3(p) for p in self.neighbor_tower_positions)
        )
        ids = [ins.id for ins in self.insulators]
        if len(ids) != len(set(ids)):
            raise InvalidParameters("Insulator ids must be unique across the scene.")

    @property
    def tower(self) -> TowerModel:
        """The inspected tower (the first one)."""
        if not self.towers:
            raise InvalidParameters("Scene has no tower.")
        return self.towers[0]

    @property
    def insulators(self) -> list[InsulatorSpec]:
        return [ins for tower in self.towers for ins in tower.insulators]

    @cached_property
    def primitives(self) -> PrimitiveSet:
        return build_primitives(self.towers)

    @cached_property
    def structure_samples(self) -> tuple[NDArray[np.float64], NDArray[np.int64]]:
        return primitive_samples(self.primitives)


def _dot(a: NDArray[np.float64], b: NDArray[np.float64]) -> NDArray[np.float64]:
    return np.sum(a * b, axis=-1)


def ray_capsule_hits(
    dirs: ArrayLike, starts: ArrayLike, ends: ArrayLike, radii: ArrayLike
) -> NDArray[np.float64]:
    """First positive hit distance of unit rays from the origin on capsules, ``inf`` on a miss.

    Arguments broadcast against each other over their leading dimensions.
    """
    d = np.asarray(dirs, dtype=float)
    a = np.asarray(starts, dtype=float)
    b = np.asarray(ends, dtype=float)
    r2 = np.asarray(radii, dtype=float) ** 2

    ba = b - a
    oa = -a
    baba = _dot(ba, ba)
    bard = _dot(ba, d)
    baoa = _dot(ba, oa)
    rdoa = _dot(d, oa)
    oaoa = _dot(oa, oa)
    k2 = baba - bard * bard
    k1 = baba * rdoa - baoa * bard
    k0 = baba * oaoa - baoa * baoa - r2 * baba
    disc = k1 * k1 - k2 * k0
    with np.errstate(divide="ignore", invalid="ignore"):
        t_body = (-k1 - np.sqrt(np.maximum(disc, 0.0))) / k2
        along = baoa + t_body * bard
        body_ok = (k2 > 1e-12) & (disc >= 0) & (t_body > RAY_EPS) & (along >= 0) & (along <= baba)
        best = np.where(body_ok, t_body, np.inf)
        for cap in (a, b):
            bq = -_dot(d, cap)
            h = bq * bq - (_dot(cap, cap) - r2)
            t_cap = -bq - np.sqrt(np.maximum(h, 0.0))
            best = np.where((h >= 0) & (t_cap > RAY_EPS), np.minimum(best, t_cap), best)
    return best


def surface_distance(primitives: PrimitiveSet, points: ArrayLike) -> NDArray[np.float64]:
    """Unsigned distance of each point to the nearest capsule surface."""
    pts = np.asarray(points, dtype=float).reshape(-1, 1, 3)
    if len(primitives) == 0:
        return np.full(pts.shape[0], np.inf)
    ba = primitives.ends - primitives.starts
    pa = pts - primitives.starts
    with np.errstate(divide="ignore", invalid="ignore"):
        h = np.clip(_dot(pa, ba) / _dot(ba, ba), 0.0, 1.0)
    h = np.nan_to_num(h)
    gap = np.linalg.norm(pa - h[..., None] * ba, axis=-1) - primitives.radii
    return np.min(np.abs(gap), axis=1)


@dataclass(frozen=True)
class _RayGrid:
    az0: float
    d_az: float
    n_az: int
    wraps: bool
    el0: float
    d_el: float
    n_el: int

    @classmethod
    def create(cls, params: LidarParams, jitter: NDArray[np.float64]) -> _RayGrid:
        hfov = math.radians(params.horizontal_fov)
        vfov = math.radians(params.vertical_fov)
        d_az = hfov / params.horizontal_rays
        d_el = vfov / params.vertical_rays
        return cls(
            az0=-0.5 * hfov + float(jitter[0]) * d_az,
            d_az=d_az,
            n_az=params.horizontal_rays,
            wraps=params.horizontal_fov >= 360.0,
            el0=-0.5 * vfov + float(jitter[1]) * d_el,
            d_el=d_el,
            n_el=params.vertical_rays,
        )

    def directions(self) -> NDArray[np.float64]:
        az = self.az0 + np.arange(self.n_az) * self.d_az
        el = self.el0 + np.arange(self.n_el) * self.d_el
        cos_el = np.cos(el)[:, None]
        return np.stack(
            (
                cos_el * np.cos(az)[None, :],
                cos_el * np.sin(az)[None, :],
                np.broadcast_to(np.sin(el)[:, None], (self.n_el, self.n_az)),
            ),
            axis=-1,
        )

    def rows_between(self, lo: float, hi: float) -> NDArray[np.int64]:
        first = max(0, math.floor((lo - self.el0) / self.d_el))
        last = min(self.n_el - 1, math.ceil((hi - self.el0) / self.d_el))
        return np.arange(first, last + 1) if first <= last else np.zeros(0, dtype=np.int64)

    def cols_between(self, lo: float, hi: float) -> NDArray[np.int64]:
        first = math.floor((lo - self.az0) / self.d_az)
        last = math.ceil((hi - self.az0) / self.d_az)
        if self.wraps:
            if last - first + 1 >= self.n_az:
                return np.arange(self.n_az)
            return np.arange(first, last + 1) % self.n_az
        first, last = max(0, first), min(self.n_az - 1, last)
        return np.arange(first, last + 1) if first <= last else np.zeros(0, dtype=np.int64)

    def candidates(
        self, center: Vec3, bound: float
    ) -> tuple[NDArray[np.int64], NDArray[np.int64]]:
        """Rays that may hit a sphere of radius ``bound`` around ``center``."""
        dist = float(np.linalg.norm(center))
        if dist <= bound:
            return np.arange(self.n_el), np.arange(self.n_az)
        alpha = math.asin(bound / dist)
        el_c = math.asin(max(-1.0, min(1.0, center[2] / dist)))
        rows = self.rows_between(el_c - alpha, el_c + alpha)
        if rows.size == 0:
            return rows, rows
        max_el = max(abs(el_c - alpha), abs(el_c + alpha))
        if max_el >= 0.5 * math.pi or math.sin(alpha) >= math.cos(max_el):
            return rows, np.arange(self.n_az)
        az_c = math.atan2(center[1], center[0])
        half = math.asin(math.sin(alpha) / math.cos(max_el))
        return rows, self.cols_between(az_c - half, az_c + half)


def simulate_lidar_scan(
    scene: SceneConfig,
    sensor_pose: RigidTransform,
    rng: np.random.Generator,
    timestamp: float = 0.0,
) -> PointCloud:
    """First-hit scan from the LiDAR at ``sensor_pose`` (L into W); points in frame L.

    Noise and dropout are drawn for every ray in grid order, so the random stream
    consumed per scan does not depend on what the rays hit.
    """
    params = scene.lidar
    jitter = rng.random(2) if params.pattern_jitter else np.array([0.5, 0.5])
    shape = (params.vertical_rays, params.horizontal_rays)
    noise = rng.normal(0.0, 1.0, size=shape) * params.range_noise_sigma
    dropped = rng.random(shape) < params.dropout_prob

    grid = _RayGrid.create(params, jitter)
    dirs = grid.directions()
    ranges = np.full(shape, np.inf)

    prims = scene.primitives.transformed(sensor_pose.inverse())
    centers = 0.5 * (prims.starts + prims.ends)
    bounds = 0.5 * np.linalg.norm(prims.ends - prims.starts, axis=1) + prims.radii
    for k in range(len(prims)):
        if np.linalg.norm(centers[k]) - bounds[k] > params.max_range:
            continue
        rows, cols = grid.candidates(centers[k], float(bounds[k]))
        if rows.size == 0 or cols.size == 0:
            continue
        block = np.ix_(rows, cols)
        hits = ray_capsule_hits(dirs[block], prims.starts[k], prims.ends[k], prims.radii[k])
        ranges[block] = np.minimum(ranges[block], hits)

    measured = ranges + noise
    keep = (ranges <= params.max_range) & ~dropped & (measured > 0)
    points = dirs[keep] * measured[keep][:, None]
    logger.debug(f"LiDAR scan at t={timestamp:.2f}: {points.shape[0]} points")
    return PointCloud(points, FRAME_LIDAR, timestamp)


def _perpendicular_basis(axis: Vec3) -> tuple[Vec3, Vec3]:
    helper = np.eye(3)[int(np.argmin(np.abs(axis)))]
    e1 = np.cross(axis, helper)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(axis, e1)


def insulator_rim_points(ins: InsulatorSpec, per_ring: int = 32) -> NDArray[np.float64]:
    """Points on the two end circles of the insulator's bounding cylinder."""
    e1, e2 = _perpendicular_basis(ins.axis)
    theta = np.linspace(0.0, 2.0 * math.pi, per_ring, endpoint=False)
    ring = ins.radius * (np.outer(np.cos(theta), e1) + np.outer(np.sin(theta), e2))
    return np.vstack([tip + ring for tip in ins.tips])


def sample_insulator_surface(
    ins: InsulatorSpec,
    n_points: int,
    rng: np.random.Generator,
    noise_sigma: float = 0.0,
) -> NDArray[np.float64]:
    """Uniform samples on the cylindrical body of ``ins``, optionally with isotropic noise."""
    e1, e2 = _perpendicular_basis(ins.axis)
    half = 0.5 * ins.length - ins.radius
    t = rng.uniform(-half, half, n_points)
    theta = rng.uniform(0.0, 2.0 * math.pi, n_points)
    points = (
        ins.center
        + np.outer(t, ins.axis)
        + ins.radius * (np.outer(np.cos(theta), e1) + np.outer(np.sin(theta), e2))
    )
    if noise_sigma > 0:
        points = points + rng.normal(0.0, noise_sigma, points.shape)
    return points


@dataclass(frozen=True, eq=False)
class DetectionEvent:
    bbox: BBox
    timestamp: float
    camera_pose_world: RigidTransform
    true_insulator_id: int | None = None

    def __post_init__(self) -> None:
        bbox = BBox(*(float(c) for c in self.bbox))
        if not (bbox.u_min < bbox.u_max and bbox.v_min < bbox.v_max):
            raise InvalidParameters(f"Degenerate bounding box {bbox}.")
        object.__setattr__(self, "bbox", bbox)


def _nearest_range(ins_C: InsulatorSpec) -> float:
    a, b = ins_C.core
    span = b - a
    t = float(np.clip(-(a @ span) / (span @ span), 0.0, 1.0))
    return float(np.linalg.norm(a + t * span)) - ins_C.radius


class _ProjectedSamples(NamedTuple):
    uv: NDArray[np.float64]
    ranges: NDArray[np.float64]
    labels: NDArray[np.int64]


def _project_samples(
    scene: SceneConfig, world_to_camera: RigidTransform, K: CameraIntrinsics
) -> _ProjectedSamples:
    points, labels = scene.structure_samples
    points_C = world_to_camera.apply(points)
    ahead = points_C[:, 2] > RAY_EPS
    points_C = points_C[ahead]
    return _ProjectedSamples(
        project_points(K, points_C), np.linalg.norm(points_C, axis=1), labels[ahead]
    )


def _blocked_in_box(
    samples: _ProjectedSamples,
    ins_C: InsulatorSpec,
    box: NDArray[np.float64],
    *,
    wires: bool,
    clearance: float,
) -> bool:
    others = samples.labels != ins_C.id
    if not wires:
        others &= samples.labels != CONDUCTOR_LABEL
    inside = BBox(*box).contains(samples.uv[:, 0], samples.uv[:, 1])
    nearer = samples.ranges < _nearest_range(ins_C) - clearance
    return bool(np.any(others & inside & nearer))


def _center_blocked(prims_C: PrimitiveSet, ins_C: InsulatorSpec) -> bool:
    others = prims_C.labels != ins_C.id
    if not np.any(others):
        return False
    depth = float(np.linalg.norm(ins_C.center))
    hits = ray_capsule_hits(
        ins_C.center / depth, prims_C.starts[others], prims_C.ends[others], prims_C.radii[others]
    )
    return bool(np.any(hits < depth - ins_C.radius))


def _noise_free_box(
    ins: InsulatorSpec, world_to_camera: RigidTransform, K: CameraIntrinsics, inflation: float
) -> NDArray[np.float64] | None:
    """Inflated box of the projected insulator rims, before clipping; None if behind the camera."""
    rim = world_to_camera.apply(insulator_rim_points(ins))
    if np.any(rim[:, 2] <= 1e-6):
        return None
    uv = project_points(K, rim)
    raw = np.array([uv[:, 0].min(), uv[:, 1].min(), uv[:, 0].max(), uv[:, 1].max()])
    return raw + np.array([-1.0, -1.0, 1.0, 1.0]) * inflation


def _clip_box(box: NDArray[np.float64], K: CameraIntrinsics) -> NDArray[np.float64]:
    limits = np.array([K.image_width, K.image_height, K.image_width, K.image_height], dtype=float)
    return np.clip(box, 0.0, limits)


def view_is_clear(
    scene: SceneConfig,
    camera_pose_world: RigidTransform,
    ins: InsulatorSpec,
    K: CameraIntrinsics,
    clearance: float = OCCLUSION_CLEARANCE,
) -> bool:
    """True if nothing, conductors included, lies in front of ``ins`` inside its box."""
    world_to_camera = camera_pose_world.inverse()
    ins_C = ins.transformed(world_to_camera)
    if ins_C.center[2] <= 0:
        return False
    box = _noise_free_box(ins, world_to_camera, K, scene.detector.bbox_inflation)
    if box is None:
        return False
    samples = _project_samples(scene, world_to_camera, K)
    prims_C = scene.primitives.transformed(world_to_camera)
    return not (
        _center_blocked(prims_C, ins_C)
        or _blocked_in_box(samples, ins_C, _clip_box(box, K), wires=True, clearance=clearance)
    )


def simulate_detection(
    scene: SceneConfig,
    camera_pose_world: RigidTransform,
    K: CameraIntrinsics,
    rng: np.random.Generator,
    timestamp: float = 0.0,
) -> list[DetectionEvent]:
    """Emit one bounding box per visible insulator seen from ``camera_pose_world`` (C into W).

    An insulator is hidden when anything blocks the ray to its center, or when
    lattice, crossarms, fittings or another insulator lie more than
    ``OCCLUSION_CLEARANCE`` in front of it anywhere inside its box. Conductors
    crossing the box do not hide it.
    """
    params = scene.detector
    insulators = scene.insulators
    misses = rng.random(len(insulators))
    edge_noise = rng.normal(0.0, 1.0, size=(len(insulators), 4)) * params.bbox_pixel_noise_sigma
    if not insulators:
        return []

    world_to_camera = camera_pose_world.inverse()
    prims_C = scene.primitives.transformed(world_to_camera)
    samples = _project_samples(scene, world_to_camera, K)
    events: list[DetectionEvent] = []
    for k, ins in enumerate(insulators):
        ins_C = ins.transformed(world_to_camera)
        center_C = ins_C.center
        if center_C[2] <= 0 or np.linalg.norm(center_C) > params.detection_range:
            continue
        u, v = project_points(K, center_C)[0]
        if not K.contains(u, v):
            continue
        box = _noise_free_box(ins, world_to_camera, K, params.bbox_inflation)
        if box is None or _center_blocked(prims_C, ins_C):
            continue
        clipped = _clip_box(box, K)
        if _blocked_in_box(samples, ins_C, clipped, wires=False, clearance=OCCLUSION_CLEARANCE):
            continue
        box = _clip_box(box + edge_noise[k], K)
        if box[0] >= box[2] or box[1] >= box[3]:
            continue
        if misses[k] < params.false_negative_prob:
            logger.debug(f"Detector missed insulator {ins.id} at t={timestamp:.2f}")
            continue
        events.append(
            DetectionEvent(BBox(*box.tolist()), timestamp, camera_pose_world, ins.id)
        )
    return events


class GroundTruth(NamedTuple):
    id: int
    center: Vec3
    axis: Vec3


def ground_truth(scene: SceneConfig) -> list[GroundTruth]:
    return [GroundTruth(ins.id, ins.center.copy(), ins.axis.copy()) for ins in scene.insulators]


def default_scene(
    kind: TowerKind | str,
    seed: int = 7,
    *,
    height: float = 25.0,
    width: float = 10.0,
    yaw_deg: float = 0.0,
    position: ArrayLike = (0.0, 0.0, 0.0),
    neighbor_distance: float = 60.0,
) -> SceneConfig:
    """One tower with a neighbor on each side along its line direction."""
    pose = RigidTransform.from_ypr(yaw_deg, 0.0, 0.0, position, FRAME_TOWER, FRAME_WORLD)
    tower = build_tower(kind, pose, height, width)
    neighbors = pose.apply(np.array([[neighbor_distance, 0.0, 0.0], [-neighbor_distance, 0.0, 0.0]]))
    return SceneConfig(towers=(tower,), neighbor_tower_positions=tuple(neighbors), seed=seed)


def empty_scene(seed: int = 7) -> SceneConfig:
    return SceneConfig(towers=(), seed=seed)


def clean_fixture_scene(seed: int = 7) -> SceneConfig:
    """Single thin insulator, no structure, noise-free sensors with a fine ray grid."""
    insulator = InsulatorSpec(0, (0.0, 4.0, 15.0), (1.0, 0.0, 0.0), length=1.2, radius=0.03)
    tower = TowerModel(
        kind=TowerKind.A,
        pose=RigidTransform.identity(FRAME_TOWER, FRAME_WORLD),
        height=25.0,
        width=10.0,
        insulators=(insulator,),
        subset=True,
    )
    return SceneConfig(
        towers=(tower,),
        neighbor_tower_positions=((60.0, 0.0, 0.0), (-60.0, 0.0, 0.0)),
        lidar=LidarParams(
            horizontal_rays=450,
            vertical_rays=160,
            horizontal_fov=90.0,
            vertical_fov=32.0,
            range_noise_sigma=0.0,
            dropout_prob=0.0,
        ),
        detector=DetectorParams(false_negative_prob=0.0, bbox_pixel_noise_sigma=0.0),
        seed=seed,
    )


def _transform_to_dict(T: RigidTransform) -> dict[str, list[float]]:
    return {"translation": T.translation.tolist(), "ypr_deg": list(T.ypr_deg)}


def _transform_from_dict(data: dict[str, Any], from_frame: str, to_frame: str) -> RigidTransform:
    yaw, pitch, roll = (float(x) for x in data.get("ypr_deg", (0.0, 0.0, 0.0)))
    return RigidTransform.from_ypr(
        yaw, pitch, roll, data.get("translation", (0.0, 0.0, 0.0)), from_frame, to_frame
    )


def scene_to_dict(scene: SceneConfig) -> dict[str, Any]:
    return {
        "seed": int(scene.seed),
        "towers": [
            {
                "kind": tower.kind.value,
                "pose": _transform_to_dict(tower.pose),
                "height": tower.height,
                "width": tower.width,
                "subset": tower.subset,
                "insulators": [
                    {
                        "id": ins.id,
                        "center": ins.center.tolist(),
                        "axis": ins.axis.tolist(),
                        "length": ins.length,
                        "radius": ins.radius,
                    }
                    for ins in tower.insulators
                ],
                "structure": [
                    {
                        "start": seg.start.tolist(),
                        "end": seg.end.tolist(),
                        "radius": seg.radius,
                        "kind": seg.kind,
                        "insulator_id": seg.insulator_id,
                    }
                    for seg in tower.structure
                ],
            }
            for tower in scene.towers
        ],
        "neighbors": [p.tolist() for p in scene.neighbor_tower_positions],
        "lidar": vars(scene.lidar).copy(),
        "detector": vars(scene.detector).copy(),
        "camera": {
            "f_x": scene.camera.f_x,
            "f_y": scene.camera.f_y,
            "c_x": scene.camera.c_x,
            "c_y": scene.camera.c_y,
            "image_width": scene.camera.image_width,
            "image_height": scene.camera.image_height,
            "distortion": list(scene.camera.distortion),
        },
        "extrinsics": {
            "T_BL": _transform_to_dict(scene.extrinsics.T_BL),
            "T_CB": _transform_to_dict(scene.extrinsics.T_CB),
        },
    }


def scene_from_dict(data: dict[str, Any]) -> SceneConfig:
    """Parse a scene document; any structural or range problem becomes ``SceneFormatError``."""
    try:
        towers = tuple(
            TowerModel(
                kind=TowerKind(t["kind"]),
                pose=_transform_from_dict(t.get("pose", {}), FRAME_TOWER, FRAME_WORLD),
                height=float(t["height"]),
                width=float(t["width"]),
                subset=bool(t.get("subset", False)),
                insulators=tuple(
                    InsulatorSpec(
                        id=int(i["id"]),
                        center=i["center"],
                        axis=i["axis"],
                        length=float(i.get("length", 1.2)),
                        radius=float(i.get("radius", 0.12)),
                    )
                    for i in t.get("insulators", [])
                ),
                structure=tuple(
                    StructureSegment(
                        start=s["start"],
                        end=s["end"],
                        radius=float(s["radius"]),
                        kind=s.get("kind", "lattice"),
                        insulator_id=s.get("insulator_id"),
                    )
                    for s in t.get("structure", [])
                ),
            )
            for t in data["towers"]
        )
        camera = data.get("camera")
        extrinsics = data.get("extrinsics")
        return SceneConfig(
            towers=towers,
            neighbor_tower_positions=tuple(data.get("neighbors", [])),
            lidar=LidarParams(**data.get("lidar", {})),
            detector=DetectorParams(**data.get("detector", {})),
            seed=int(data.get("seed", 7)),
            camera=CameraIntrinsics(
                **{**camera, "distortion": tuple(camera.get("distortion", (0.0,) * 5))}
            )
            if camera
            else default_camera(),
            extrinsics=Extrinsics(
                T_BL=_transform_from_dict(extrinsics["T_BL"], FRAME_LIDAR, FRAME_BODY),
                T_CB=_transform_from_dict(extrinsics["T_CB"], FRAME_BODY, FRAME_CAMERA),
            )
            if extrinsics
            else Extrinsics.default(),
        )
    except (KeyError, TypeError, ValueError, InspectionError) as e:
        raise SceneFormatError(f"Invalid scene document: {e}") from e


def save_scene(scene: SceneConfig, path: str | Path) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(json.dumps(scene_to_dict(scene), indent=2) + "\n", encoding="utf-8")
    return target


def load_scene(path: str | Path) -> SceneConfig:
    """Read a scene file; the file must describe at least one tower."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise SceneFormatError(f"Cannot read scene file {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise SceneFormatError(f"Scene file {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise SceneFormatError(f"Scene file {path} must hold a JSON object.")
    scene = scene_from_dict(data)
    if not scene.towers:
        raise SceneFormatError(f"Scene file {path} describes no tower.")
    return scene
