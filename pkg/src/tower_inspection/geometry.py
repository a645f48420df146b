"""Rigid-frame algebra and pinhole projection.

Frame identifiers used across the package:

- ``W`` world, z up.
- ``B`` UAV body: x forward, y left, z up.
- ``L`` LiDAR, mounted on the body.
- ``C`` camera: z forward (optical axis), x right, y down.
- ``T`` tower: origin at the tower base, x along the power line, z up.

A ``RigidTransform`` with ``from_frame="L"`` and ``to_frame="B"`` maps LiDAR
coordinates into body coordinates (the ``T_BL`` of the fusion chain).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial.transform import Rotation

from .errors import BehindCamera, FrameMismatch, InvalidParameters

Vec3 = NDArray[np.float64]

FRAME_WORLD = "W"
FRAME_BODY = "B"
FRAME_LIDAR = "L"
FRAME_CAMERA = "C"
FRAME_TOWER = "T"

ORTHONORMAL_TOL = 1e-9


def vec3(x: ArrayLike | float, y: float | None = None, z: float | None = None) -> Vec3:
    """Build a finite 3-vector from a sequence or from three scalars."""
    values = np.array([x, y, z] if y is not None else x, dtype=float).reshape(-1)
    if values.shape != (3,):
        raise InvalidParameters(f"Expected 3 components, got shape {values.shape}.")
    if not np.all(np.isfinite(values)):
        raise InvalidParameters(f"Vector components must be finite, got {values}.")
    return values


def unit(v: ArrayLike) -> Vec3:
    arr = vec3(v)
    norm = float(np.linalg.norm(arr))
    if norm < 1e-12:
        raise InvalidParameters("Cannot normalize a zero-length vector.")
    return arr / norm


def _read_only(values: NDArray[np.float64]) -> NDArray[np.float64]:
    values.setflags(write=False)
    return values


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Proper rigid motion ``p -> R p + t`` from ``from_frame`` into ``to_frame``."""

    rotation: NDArray[np.float64]
    translation: NDArray[np.float64]
    from_frame: str = FRAME_WORLD
    to_frame: str = FRAME_WORLD

    def __post_init__(self) -> None:
        rotation = np.array(self.rotation, dtype=float)
        translation = np.array(self.translation, dtype=float).reshape(-1)
        if rotation.shape != (3, 3) or translation.shape != (3,):
            raise InvalidParameters("Rotation must be 3x3 and translation a 3-vector.")
        if not (np.all(np.isfinite(rotation)) and np.all(np.isfinite(translation))):
            raise InvalidParameters("Transform entries must be finite.")
        gram_error = np.max(np.abs(rotation.T @ rotation - np.eye(3)))
        if gram_error > ORTHONORMAL_TOL or abs(np.linalg.det(rotation) - 1.0) > ORTHONORMAL_TOL:
            raise InvalidParameters("Rotation is not a proper orthonormal matrix.")
        object.__setattr__(self, "rotation", _read_only(rotation))
        object.__setattr__(self, "translation", _read_only(translation))

    @classmethod
    def identity(cls, from_frame: str = FRAME_WORLD, to_frame: str | None = None) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3), from_frame, to_frame or from_frame)

    @classmethod
    def from_translation(
        cls,
        x: float,
        y: float,
        z: float,
        from_frame: str = FRAME_WORLD,
        to_frame: str | None = None,
    ) -> RigidTransform:
        return cls(np.eye(3), vec3(x, y, z), from_frame, to_frame or from_frame)

    @classmethod
    def from_ypr(
        cls,
        yaw: float,
        pitch: float = 0.0,
        roll: float = 0.0,
        translation: ArrayLike = (0.0, 0.0, 0.0),
        from_frame: str = FRAME_WORLD,
        to_frame: str | None = None,
    ) -> RigidTransform:
        """Build from yaw-pitch-roll in degrees (intrinsic Z-Y-X)."""
        matrix = Rotation.from_euler("ZYX", [yaw, pitch, roll], degrees=True).as_matrix()
        return cls(matrix, vec3(translation), from_frame, to_frame or from_frame)

    @classmethod
    def rot_z(
        cls, angle_deg: float, from_frame: str = FRAME_WORLD, to_frame: str | None = None
    ) -> RigidTransform:
        return cls.from_ypr(angle_deg, from_frame=from_frame, to_frame=to_frame)

    @property
    def ypr_deg(self) -> tuple[float, float, float]:
        # At pitch = +-90 deg scipy warns and folds roll into yaw; the rotation is unchanged.
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            yaw, pitch, roll = Rotation.from_matrix(self.rotation).as_euler("ZYX", degrees=True)
        return float(yaw), float(pitch), float(roll)

    def inverse(self) -> RigidTransform:
        rot_t = self.rotation.T
        return RigidTransform(rot_t, -rot_t @ self.translation, self.to_frame, self.from_frame)

    def apply(self, points: ArrayLike) -> NDArray[np.float64]:
        """Transform a single point (3,) or a stack of points (N, 3)."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation.T + self.translation

    def rotate(self, vectors: ArrayLike) -> NDArray[np.float64]:
        return np.asarray(vectors, dtype=float) @ self.rotation.T

    def matrix(self) -> NDArray[np.float64]:
        homogeneous = np.eye(4)
        homogeneous[:3, :3] = self.rotation
        homogeneous[:3, 3] = self.translation
        return homogeneous

    def allclose(self, other: RigidTransform, atol: float = 1e-9) -> bool:
        return (
            self.from_frame == other.from_frame
            and self.to_frame == other.to_frame
            and np.allclose(self.rotation, other.rotation, atol=atol, rtol=0.0)
            and np.allclose(self.translation, other.translation, atol=atol, rtol=0.0)
        )

    def __repr__(self) -> str:
        t = ", ".join(f"{v:.3f}" for v in self.translation)
        return f"RigidTransform({self.from_frame}->{self.to_frame}, t=({t}))"


def compose(outer: RigidTransform, inner: RigidTransform) -> RigidTransform:
    """Return ``outer * inner``: apply ``inner`` first, then ``outer``."""
    if outer.from_frame != inner.to_frame:
        raise FrameMismatch(
            f"Cannot chain {inner.from_frame}->{inner.to_frame} into "
            f"{outer.from_frame}->{outer.to_frame}."
        )
    return RigidTransform(
        outer.rotation @ inner.rotation,
        outer.rotation @ inner.translation + outer.translation,
        inner.from_frame,
        outer.to_frame,
    )


def transform_point(T: RigidTransform, p: ArrayLike) -> Vec3:
    return T.apply(vec3(p))


def lidar_to_camera(p_L: ArrayLike, T_BL: RigidTransform, T_CB: RigidTransform) -> Vec3:
    return transform_point(compose(T_CB, T_BL), p_L)


class ImagePoint(NamedTuple):
    u: float
    v: float


@dataclass(frozen=True)
class CameraIntrinsics:
    f_x: float
    f_y: float
    c_x: float
    c_y: float
    image_width: int
    image_height: int
    distortion: tuple[float, float, float, float, float] = (0.0, 0.0, 0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        if self.f_x <= 0 or self.f_y <= 0:
            raise InvalidParameters("Focal lengths must be positive.")
        if self.image_width <= 0 or self.image_height <= 0:
            raise InvalidParameters("Image size must be positive.")
        if not (0 <= self.c_x < self.image_width and 0 <= self.c_y < self.image_height):
            raise InvalidParameters("Principal point must lie inside the image.")
        if len(self.distortion) != 5:
            raise InvalidParameters("Distortion needs five coefficients (k1, k2, p1, p2, k3).")
        object.__setattr__(self, "distortion", tuple(float(d) for d in self.distortion))

    @property
    def has_distortion(self) -> bool:
        return any(d != 0.0 for d in self.distortion)

    def contains(self, u: ArrayLike, v: ArrayLike) -> NDArray[np.bool_]:
        u_arr = np.asarray(u, dtype=float)
        v_arr = np.asarray(v, dtype=float)
        return (u_arr >= 0) & (u_arr <= self.image_width) & (v_arr >= 0) & (v_arr <= self.image_height)


def distort_normalized(
    x: NDArray[np.float64], y: NDArray[np.float64], distortion: tuple[float, ...]
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Brown-Conrady radial + tangential model on normalized image coordinates."""
    k1, k2, p1, p2, k3 = distortion
    r2 = x * x + y * y
    radial = 1.0 + k1 * r2 + k2 * r2 * r2 + k3 * r2 * r2 * r2
    x_d = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
    y_d = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
    return x_d, y_d


def project_points(K: CameraIntrinsics, points_C: ArrayLike) -> NDArray[np.float64]:
    """Project (N, 3) camera-frame points to (N, 2) pixels. Caller guarantees z > 0."""
    pts = np.asarray(points_C, dtype=float).reshape(-1, 3)
    x = pts[:, 0] / pts[:, 2]
    y = pts[:, 1] / pts[:, 2]
    if K.has_distortion:
        x, y = distort_normalized(x, y, K.distortion)
    return np.column_stack((K.f_x * x + K.c_x, K.f_y * y + K.c_y))


def project_to_image(K: CameraIntrinsics, p_C: ArrayLike) -> ImagePoint:
    p = vec3(p_C)
    if p[2] <= 0:
        raise BehindCamera(f"Point {p} has non-positive depth.")
    u, v = project_points(K, p[None, :])[0]
    return ImagePoint(float(u), float(v))


def undistort_pixels(
    K: CameraIntrinsics, uv: ArrayLike, iterations: int = 20
) -> NDArray[np.float64]:
    """Normalized (N, 2) image coordinates of pixels, undistorted by fixed-point iteration."""
    pix = np.asarray(uv, dtype=float).reshape(-1, 2)
    x_d = (pix[:, 0] - K.c_x) / K.f_x
    y_d = (pix[:, 1] - K.c_y) / K.f_y
    x, y = x_d.copy(), y_d.copy()
    if K.has_distortion:
        for _ in range(iterations):
            xs, ys = distort_normalized(x, y, K.distortion)
            x -= xs - x_d
            y -= ys - y_d
    return np.column_stack((x, y))


def back_project(K: CameraIntrinsics, s: ImagePoint, depth: float, iterations: int = 20) -> Vec3:
    """Recover the camera-frame point at ``depth`` that projects onto ``s``.

    With distortion the normalized coordinates are found by fixed-point iteration.
    """
    if depth <= 0:
        raise BehindCamera("Back-projection depth must be positive.")
    x, y = undistort_pixels(K, [[s.u, s.v]], iterations)[0]
    return vec3(x * depth, y * depth, depth)


def yaw_towards(origin: ArrayLike, target: ArrayLike) -> float:
    """Heading (radians) of the horizontal direction from ``origin`` to ``target``."""
    delta = np.asarray(target, dtype=float) - np.asarray(origin, dtype=float)
    return float(np.arctan2(delta[1], delta[0]))


def point_line_distance(
    points: ArrayLike, anchor: ArrayLike, direction: ArrayLike
) -> NDArray[np.float64]:
    """Distances of (N, 3) points to the infinite line through ``anchor`` along unit ``direction``."""
    offsets = np.asarray(points, dtype=float) - np.asarray(anchor, dtype=float)
    along = offsets @ np.asarray(direction, dtype=float)
    perpendicular = offsets - np.outer(along, direction)
    return np.linalg.norm(perpendicular, axis=1)


class BBox(NamedTuple):
    """Axis-aligned pixel rectangle ``(u_min, v_min, u_max, v_max)``."""

    u_min: float
    v_min: float
    u_max: float
    v_max: float

    @property
    def center(self) -> ImagePoint:
        return ImagePoint(0.5 * (self.u_min + self.u_max), 0.5 * (self.v_min + self.v_max))

    @property
    def area(self) -> float:
        return max(0.0, self.u_max - self.u_min) * max(0.0, self.v_max - self.v_min)

    def contains(self, u: ArrayLike, v: ArrayLike) -> NDArray[np.bool_]:
        u_arr = np.asarray(u, dtype=float)
        v_arr = np.asarray(v, dtype=float)
        return (
            (u_arr >= self.u_min) & (u_arr <= self.u_max) & (v_arr >= self.v_min) & (v_arr <= self.v_max)
        )

    def shrink(self, pixels: float) -> BBox:
        return BBox(self.u_min + pixels, self.v_min + pixels, self.u_max - pixels, self.v_max - pixels)


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Ordered (N, 3) points tagged with the frame they are expressed in."""

    points: NDArray[np.float64]
    frame: str = FRAME_LIDAR
    timestamp: float = 0.0

    def __post_init__(self) -> None:
        points = np.array(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(points)):
            raise InvalidParameters("Point cloud contains non-finite coordinates.")
        object.__setattr__(self, "points", _read_only(points))

    @classmethod
    def empty(cls, frame: str = FRAME_LIDAR, timestamp: float = 0.0) -> PointCloud:
        return cls(np.zeros((0, 3)), frame, timestamp)

    def __len__(self) -> int:
        return int(self.points.shape[0])

    def transformed(self, T: RigidTransform) -> PointCloud:
        if T.from_frame != self.frame:
            raise FrameMismatch(f"Cloud is in {self.frame}, transform expects {T.from_frame}.")
        return PointCloud(T.apply(self.points), T.to_frame, self.timestamp)

    def subset(self, indices: ArrayLike) -> PointCloud:
        return PointCloud(self.points[np.asarray(indices, dtype=int)], self.frame, self.timestamp)

    def to_xyz(self) -> str:
        """ASCII dump, one ``x y z`` line per point."""
        return "".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in self.points.tolist())

    @classmethod
    def from_xyz(cls, text: str, frame: str = FRAME_LIDAR, timestamp: float = 0.0) -> PointCloud:
        rows = [line.split() for line in text.splitlines() if line.strip()]
        if any(len(row) != 3 for row in rows):
            raise InvalidParameters("Each point line needs exactly three coordinates.")
        return cls(np.array(rows, dtype=float).reshape(-1, 3), frame, timestamp)
