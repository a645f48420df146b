"""Camera-LiDAR fusion: project scans into the image, keep points inside detections,
and cumulate three consecutive detections of the same insulator."""

from __future__ import annotations

from collections import deque
from collections.abc import Iterator
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from loguru import logger
from numpy.typing import NDArray

from .errors import FrameMismatch, InvalidParameters, NonMonotonicTimestamp
from .geometry import (
    FRAME_BODY,
    FRAME_LIDAR,
    BBox,
    CameraIntrinsics,
    ImagePoint,
    PointCloud,
    RigidTransform,
    Vec3,
    back_project,
    compose,
    project_points,
)

__all__ = [
    "CumulatedObservation",
    "DetectionBuffer",
    "DetectionTracker",
    "FilteredCloud",
    "PointCloud",
    "Projection",
    "bbox_center_ray",
    "bbox_mask",
    "cumulate",
    "filter_by_bbox",
    "project_cloud",
    "push_and_poll",
    "ray_anchor",
    "ray_distance",
]

DEFAULT_CAPACITY = 3
DEFAULT_MAX_GAP = 1.0
DEFAULT_ASSOCIATION_RADIUS = 0.5
ANCHOR_PERCENTILE = 10.0


@dataclass(frozen=True, eq=False)
class Projection:
    """Pixel coordinates of the cloud points in front of the camera, with their source indices."""

    indices: NDArray[np.int64]
    uv: NDArray[np.float64]

    def __len__(self) -> int:
        return int(self.indices.shape[0])

    def __iter__(self) -> Iterator[tuple[int, ImagePoint]]:
        for index, (u, v) in zip(self.indices.tolist(), self.uv.tolist()):
            yield index, ImagePoint(u, v)


def project_cloud(
    cloud: PointCloud, T_BL: RigidTransform, T_CB: RigidTransform, K: CameraIntrinsics
) -> Projection:
    if cloud.frame != FRAME_LIDAR:
        raise FrameMismatch(f"project_cloud expects a cloud in frame L, got {cloud.frame}.")
    points_C = compose(T_CB, T_BL).apply(cloud.points)
    front = points_C[:, 2] > 0
    return Projection(np.flatnonzero(front), project_points(K, points_C[front]))


@dataclass(frozen=True, eq=False)
class FilteredCloud:
    points: NDArray[np.float64]
    source_bbox: BBox
    detection_timestamp: float
    body_pose: RigidTransform | None = None

    def __len__(self) -> int:
        return int(self.points.shape[0])

    def world_points(self) -> NDArray[np.float64]:
        if self.body_pose is None:
            raise InvalidParameters("Filtered cloud carries no body pose.")
        return self.body_pose.apply(self.points)


def bbox_mask(projections: Projection, bbox: BBox) -> NDArray[np.int64]:
    """Source indices whose projection lies inside ``bbox`` (edges inclusive), ascending."""
    inside = bbox.contains(projections.uv[:, 0], projections.uv[:, 1])
    return np.sort(projections.indices[inside])


def filter_by_bbox(
    cloud: PointCloud,
    projections: Projection,
    bbox: BBox,
    T_BL: RigidTransform,
    *,
    body_pose: RigidTransform | None = None,
    timestamp: float | None = None,
) -> FilteredCloud:
    kept = bbox_mask(projections, bbox)
    return FilteredCloud(
        points=T_BL.apply(cloud.points[kept]).reshape(-1, 3),
        source_bbox=bbox,
        detection_timestamp=cloud.timestamp if timestamp is None else timestamp,
        body_pose=body_pose,
    )


def cumulate(entries: list[FilteredCloud]) -> PointCloud:
    """Concatenate filtered clouds in the body frame of the latest entry.

    When every entry carries its scan-time body pose the points travel through
    the world frame, so UAV motion between detections does not smear them.
    """
    latest = entries[-1]
    if all(e.body_pose is not None for e in entries):
        to_latest = latest.body_pose.inverse()  # type: ignore[union-attr]
        parts = [compose(to_latest, e.body_pose).apply(e.points) for e in entries]  # type: ignore[arg-type]
    else:
        parts = [e.points for e in entries]
    return PointCloud(np.vstack(parts), FRAME_BODY, latest.detection_timestamp)


@dataclass
class DetectionBuffer:
    capacity: int = DEFAULT_CAPACITY
    max_gap: float = DEFAULT_MAX_GAP
    entries: deque[FilteredCloud] = field(default_factory=deque)

    def __post_init__(self) -> None:
        if self.capacity < 1 or self.max_gap <= 0:
            raise InvalidParameters("Buffer capacity must be >= 1 and max_gap positive.")

    @property
    def last_timestamp(self) -> float | None:
        return self.entries[-1].detection_timestamp if self.entries else None

    def push_and_poll(self, fc: FilteredCloud) -> PointCloud | None:
        last = self.last_timestamp
        if last is not None:
            if fc.detection_timestamp < last:
                raise NonMonotonicTimestamp(
                    f"Detection at t={fc.detection_timestamp} arrived after t={last}."
                )
            if fc.detection_timestamp - last > self.max_gap:
                logger.debug(f"Detection gap {fc.detection_timestamp - last:.2f}s, buffer reset")
                self.entries.clear()
        self.entries.append(fc)
        if len(self.entries) < self.capacity:
            return None
        cloud = cumulate(list(self.entries))
        self.entries.clear()
        return cloud


def push_and_poll(buffer: DetectionBuffer, fc: FilteredCloud) -> PointCloud | None:
    return buffer.push_and_poll(fc)


def bbox_center_ray(
    bbox: BBox, camera_pose_world: RigidTransform, K: CameraIntrinsics
) -> tuple[Vec3, Vec3]:
    """World-frame origin and unit direction of the ray through the bbox center."""
    p_C = back_project(K, bbox.center, 1.0)
    direction = camera_pose_world.rotate(p_C / np.linalg.norm(p_C))
    return np.array(camera_pose_world.translation), direction


def ray_distance(point: Vec3, origin: Vec3, direction: Vec3) -> float:
    """Distance from ``point`` to the half-line starting at ``origin``."""
    offset = point - origin
    along = max(0.0, float(offset @ direction))
    return float(np.linalg.norm(offset - along * direction))


def ray_anchor(points_world: NDArray[np.float64], origin: Vec3, direction: Vec3) -> Vec3:
    """Point on the ray at the near-percentile depth of ``points_world`` along it."""
    depth = np.percentile((points_world - origin) @ direction, ANCHOR_PERCENTILE)
    return origin + max(0.0, float(depth)) * direction


class CumulatedObservation(NamedTuple):
    track_id: int
    cloud: PointCloud
    body_pose: RigidTransform
    ray_origin: Vec3
    ray_direction: Vec3


@dataclass
class _Track:
    id: int
    buffer: DetectionBuffer
    anchor_world: Vec3
    last_time: float


class DetectionTracker:
    """Routes filtered clouds to per-insulator buffers.

    A detection joins the track whose last anchor is closest to its bbox-center
    ray (within ``association_radius``); otherwise it opens a new track. The
    anchor is where that ray reaches the near surface of the filtered points.
    A track takes at most one detection per timestamp. Tracks idle for longer
    than ``max_gap`` are dropped.
    """

    def __init__(
        self,
        capacity: int = DEFAULT_CAPACITY,
        max_gap: float = DEFAULT_MAX_GAP,
        association_radius: float = DEFAULT_ASSOCIATION_RADIUS,
    ) -> None:
        if association_radius <= 0:
            raise InvalidParameters("association_radius must be positive.")
        self.capacity = capacity
        self.max_gap = max_gap
        self.association_radius = association_radius
        self._tracks: list[_Track] = []
        self._next_id = 0

    @property
    def track_count(self) -> int:
        return len(self._tracks)

    def update(
        self, fc: FilteredCloud, camera_pose_world: RigidTransform, K: CameraIntrinsics
    ) -> CumulatedObservation | None:
        if fc.body_pose is None:
            raise InvalidParameters("Tracked filtered clouds need their body pose.")
        if len(fc) == 0:
            return None
        now = fc.detection_timestamp
        self._tracks = [t for t in self._tracks if now - t.last_time <= self.max_gap]

        origin, direction = bbox_center_ray(fc.source_bbox, camera_pose_world, K)
        anchor = ray_anchor(fc.world_points(), origin, direction)
        best: _Track | None = None
        best_distance = self.association_radius
        for track in self._tracks:
            if track.last_time == now:
                continue
            distance = ray_distance(track.anchor_world, origin, direction)
            if distance <= best_distance:
                best, best_distance = track, distance
        if best is None:
            best = _Track(self._next_id, DetectionBuffer(self.capacity, self.max_gap), anchor, now)
            self._next_id += 1
            self._tracks.append(best)
            logger.trace(f"Track {best.id} opened at t={now:.2f}")

        best.anchor_world = anchor
        best.last_time = now
        cloud = best.buffer.push_and_poll(fc)
        if cloud is None:
            return None
        return CumulatedObservation(best.id, cloud, fc.body_pose, origin, direction)
