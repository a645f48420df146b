"""Insulator localization from a cumulated body-frame cloud.

Four methods are available: plain DBSCAN, plain RANSAC, DBSCAN followed by a
RANSAC line fit, and DBSCAN followed by PCA with an optional second pass on the
dominant sub-cluster.
"""

from __future__ import annotations

from collections import defaultdict, deque
from collections.abc import Callable
from dataclasses import dataclass
from enum import StrEnum
from itertools import product

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .common import make_rng
from .errors import DegenerateInput, InvalidParameters, NoCluster, NoPointsWithinTau
from .geometry import (
    FRAME_BODY,
    FRAME_WORLD,
    PointCloud,
    RigidTransform,
    Vec3,
    point_line_distance,
    vec3,
)

COINCIDENT_TOL = 1e-12


class LocalizationMethod(StrEnum):
    DBSCAN = "DBSCAN"
    RANSAC = "RANSAC"
    DBSCAN_RANSAC = "DBSCAN_RANSAC"
    DBSCAN_PCA = "DBSCAN_PCA"


@dataclass(frozen=True, eq=False)
class Cluster:
    point_indices: NDArray[np.int64]
    center: Vec3

    def __post_init__(self) -> None:
        indices = np.asarray(self.point_indices, dtype=np.int64)
        if indices.size == 0:
            raise InvalidParameters("A cluster needs at least one point.")
        if np.unique(indices).size != indices.size:
            raise InvalidParameters("Cluster indices must be unique.")
        object.__setattr__(self, "point_indices", np.sort(indices))
        object.__setattr__(self, "center", vec3(self.center))

    @property
    def first_index(self) -> int:
        return int(self.point_indices[0])

    def __len__(self) -> int:
        return int(self.point_indices.size)


@dataclass(frozen=True, eq=False)
class LineModel:
    anchor: Vec3
    direction: Vec3

    def __post_init__(self) -> None:
        direction = vec3(self.direction)
        if abs(float(np.linalg.norm(direction)) - 1.0) > 1e-9:
            raise InvalidParameters("Line direction must be a unit vector.")
        object.__setattr__(self, "anchor", vec3(self.anchor))
        object.__setattr__(self, "direction", direction)


@dataclass(frozen=True)
class LocalizerParams:
    tau: float = 0.3
    dbscan_eps: float = 0.25
    dbscan_min_pts: int = 4
    ransac_iters: int = 200
    ransac_inlier_dist: float = 0.08
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if min(self.tau, self.dbscan_eps, self.ransac_inlier_dist) <= 0:
            raise InvalidParameters("Distance thresholds must be positive.")
        if self.dbscan_min_pts < 2 or self.ransac_iters < 1:
            raise InvalidParameters("dbscan_min_pts must be >= 2 and ransac_iters >= 1.")
        if self.rng_seed < 0:
            raise InvalidParameters("rng_seed must be non-negative.")


@dataclass(frozen=True, eq=False)
class InsulatorEstimate:
    center: Vec3
    orientation: Vec3
    method: LocalizationMethod
    timestamp: float = 0.0
    frame: str = FRAME_BODY

    def __post_init__(self) -> None:
        orientation = vec3(self.orientation)
        if abs(float(np.linalg.norm(orientation)) - 1.0) > 1e-9:
            raise InvalidParameters("Estimate orientation must be a unit vector.")
        object.__setattr__(self, "center", vec3(self.center))
        object.__setattr__(self, "orientation", orientation)
        object.__setattr__(self, "method", LocalizationMethod(self.method))


def _as_points(cloud: PointCloud | ArrayLike) -> NDArray[np.float64]:
    if isinstance(cloud, PointCloud):
        return cloud.points
    return np.asarray(cloud, dtype=float).reshape(-1, 3)


def canonical_direction(direction: ArrayLike) -> Vec3:
    """Unit vector with its largest-magnitude component made positive."""
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    return -d if d[int(np.argmax(np.abs(d)))] < 0 else d


def _squared_distances(a: NDArray[np.float64], b: NDArray[np.float64]) -> NDArray[np.float64]:
    return np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1)


def _grid_neighbors(points: NDArray[np.float64], eps: float) -> list[NDArray[np.int64]]:
    cells = np.floor(points / eps).astype(np.int64)
    buckets: dict[tuple[int, ...], list[int]] = defaultdict(list)
    for index, cell in enumerate(map(tuple, cells.tolist())):
        buckets[cell].append(index)

    neighbors: list[NDArray[np.int64]] = [np.zeros(0, dtype=np.int64)] * len(points)
    eps2 = eps * eps
    for cell, members in buckets.items():
        candidates = np.array(
            sorted(
                i
                for offset in product((-1, 0, 1), repeat=3)
                for i in buckets.get(tuple(c + o for c, o in zip(cell, offset)), ())
            ),
            dtype=np.int64,
        )
        d2 = _squared_distances(points[members], points[candidates])
        for row, member in enumerate(members):
            neighbors[member] = candidates[d2[row] <= eps2]
    return neighbors


def _clusters_from_labels(points: NDArray[np.float64], labels: NDArray[np.int64]) -> list[Cluster]:
    clusters = []
    for cluster_id in range(int(labels.max(initial=-1)) + 1):
        members = np.flatnonzero(labels == cluster_id)
        clusters.append(Cluster(members, points[members].mean(axis=0)))
    return clusters


def dbscan(cloud: PointCloud | ArrayLike, eps: float, min_pts: int) -> list[Cluster]:
    """Density clustering over a uniform grid of cell size ``eps``.

    Neighborhoods include the point itself. Clusters are numbered in order of
    their first core point; a border point belongs to the first cluster that
    reaches it.
    """
    if eps <= 0 or min_pts < 2:
        raise InvalidParameters("dbscan needs eps > 0 and min_pts >= 2.")
    points = _as_points(cloud)
    n = len(points)
    if n == 0:
        return []
    neighbors = _grid_neighbors(points, eps)
    core = np.array([nb.size >= min_pts for nb in neighbors])
    labels = np.full(n, -1, dtype=np.int64)
    cluster_id = 0
    for seed in range(n):
        if labels[seed] != -1 or not core[seed]:
            continue
        labels[seed] = cluster_id
        queue = deque([seed])
        while queue:
            p = queue.popleft()
            if not core[p]:
                continue
            for q in neighbors[p].tolist():
                if labels[q] == -1:
                    labels[q] = cluster_id
                    queue.append(q)
        cluster_id += 1
    return _clusters_from_labels(points, labels)


def quadratic_dbscan(cloud: PointCloud | ArrayLike, eps: float, min_pts: int) -> list[Cluster]:
    """Textbook O(n^2) DBSCAN with an explicit noise label, used as a reference."""
    points = _as_points(cloud)
    n = len(points)
    if n == 0:
        return []
    within = _squared_distances(points, points) <= eps * eps

    def region(i: int) -> list[int]:
        return np.flatnonzero(within[i]).tolist()

    unvisited, noise = -2, -1
    labels = np.full(n, unvisited, dtype=np.int64)
    cluster_id = 0
    for p in range(n):
        if labels[p] != unvisited:
            continue
        seeds = region(p)
        if len(seeds) < min_pts:
            labels[p] = noise
            continue
        labels[p] = cluster_id
        k = 0
        while k < len(seeds):
            q = seeds[k]
            k += 1
            if labels[q] == noise:
                labels[q] = cluster_id
            if labels[q] != unvisited:
                continue
            labels[q] = cluster_id
            expansion = region(q)
            if len(expansion) >= min_pts:
                seeds.extend(expansion)
        cluster_id += 1
    return _clusters_from_labels(points, labels)


def nearest_cluster(clusters: list[Cluster], origin: ArrayLike = (0.0, 0.0, 0.0)) -> Cluster:
    if not clusters:
        raise NoCluster("No cluster to choose from.")
    o = vec3(origin)
    return min(clusters, key=lambda c: (float(np.linalg.norm(c.center - o)), c.first_index))


def pca_axis(points: PointCloud | ArrayLike) -> tuple[Vec3, Vec3]:
    pts = _as_points(points)
    if len(pts) < 2:
        raise DegenerateInput("PCA needs at least two points.")
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    if np.max(np.abs(centered)) < COINCIDENT_TOL:
        raise DegenerateInput("All points coincide.")
    eigenvalues, eigenvectors = np.linalg.eigh(centered.T @ centered / len(pts))
    return centroid, canonical_direction(eigenvectors[:, int(np.argmax(eigenvalues))])


def ransac_line(
    points: PointCloud | ArrayLike,
    params: LocalizerParams,
    rng: np.random.Generator | None = None,
) -> tuple[LineModel, NDArray[np.int64]]:
    """Best two-point line hypothesis by inlier count, refined by PCA over its inliers."""
    pts = _as_points(points)
    n = len(pts)
    if n < 2:
        raise DegenerateInput("RANSAC needs at least two points.")
    if np.max(np.ptp(pts, axis=0)) < COINCIDENT_TOL:
        raise DegenerateInput("All points coincide.")
    if rng is None:
        rng = make_rng(params.rng_seed, "ransac")

    pairs = rng.integers(0, n, size=(params.ransac_iters, 2))
    anchors = pts[pairs[:, 0]]
    spans = pts[pairs[:, 1]] - anchors
    lengths = np.linalg.norm(spans, axis=1)
    valid = lengths > COINCIDENT_TOL
    if not np.any(valid):
        # every draw hit a coincident pair; use the widest pair through point 0
        far = int(np.argmax(np.linalg.norm(pts - pts[0], axis=1)))
        anchors = pts[:1]
        spans = pts[far : far + 1] - pts[0]
        lengths = np.linalg.norm(spans, axis=1)
        valid = np.ones(1, dtype=bool)
    anchors = anchors[valid]
    directions = spans[valid] / lengths[valid, None]

    offsets = pts[None, :, :] - anchors[:, None, :]
    along = np.einsum("hnk,hk->hn", offsets, directions)
    dist2 = np.sum(offsets**2, axis=-1) - along**2
    inlier_mask = dist2 <= params.ransac_inlier_dist**2
    best = int(np.argmax(inlier_mask.sum(axis=1)))
    inliers = np.flatnonzero(inlier_mask[best])

    try:
        anchor, direction = pca_axis(pts[inliers])
    except DegenerateInput:
        anchor, direction = anchors[best], canonical_direction(directions[best])
    return LineModel(anchor, direction), inliers


def median_projection_center(points: PointCloud | ArrayLike, line: LineModel, tau: float) -> Vec3:
    pts = _as_points(points)
    near = pts[point_line_distance(pts, line.anchor, line.direction) <= tau] if len(pts) else pts
    if len(near) == 0:
        raise NoPointsWithinTau(f"No point within tau={tau} m of the fitted axis.")
    t = (near - line.anchor) @ line.direction
    return line.anchor + float(np.median(t)) * line.direction


def _nearest_points(points: NDArray[np.float64], params: LocalizerParams) -> NDArray[np.float64]:
    if len(points) == 0:
        raise NoCluster("Cloud is empty.")
    clusters = dbscan(points, params.dbscan_eps, params.dbscan_min_pts)
    if not clusters:
        raise NoCluster("DBSCAN labelled every point as noise.")
    return points[nearest_cluster(clusters).point_indices]


def localize_dbscan(cloud: PointCloud | ArrayLike, params: LocalizerParams) -> InsulatorEstimate:
    cluster_points = _nearest_points(_as_points(cloud), params)
    centroid, direction = pca_axis(cluster_points)
    return InsulatorEstimate(centroid, direction, LocalizationMethod.DBSCAN, _timestamp(cloud))


def localize_ransac(cloud: PointCloud | ArrayLike, params: LocalizerParams) -> InsulatorEstimate:
    points = _as_points(cloud)
    line, inliers = ransac_line(points, params)
    center = median_projection_center(points[inliers], line, params.tau)
    return InsulatorEstimate(center, line.direction, LocalizationMethod.RANSAC, _timestamp(cloud))


def localize_dbscan_ransac(
    cloud: PointCloud | ArrayLike, params: LocalizerParams
) -> InsulatorEstimate:
    cluster_points = _nearest_points(_as_points(cloud), params)
    line, inliers = ransac_line(cluster_points, params)
    center = median_projection_center(cluster_points[inliers], line, params.tau)
    return InsulatorEstimate(
        center, line.direction, LocalizationMethod.DBSCAN_RANSAC, _timestamp(cloud)
    )


def localize_dbscan_pca(
    cloud: PointCloud | ArrayLike, params: LocalizerParams
) -> InsulatorEstimate:
    cluster_points = _nearest_points(_as_points(cloud), params)
    centroid, direction = pca_axis(cluster_points)
    near_axis = cluster_points[
        point_line_distance(cluster_points, centroid, direction) <= params.tau
    ]
    sub_clusters = dbscan(near_axis, params.dbscan_eps, params.dbscan_min_pts)
    if len(sub_clusters) > 1:
        # reiterate on the dominant sub-cluster
        dominant = max(sub_clusters, key=lambda c: (len(c), -c.first_index))
        _, direction = pca_axis(near_axis[dominant.point_indices])
        line = LineModel(dominant.center, direction)
        centroid = median_projection_center(cluster_points, line, params.tau)
    return InsulatorEstimate(centroid, direction, LocalizationMethod.DBSCAN_PCA, _timestamp(cloud))


def _timestamp(cloud: PointCloud | ArrayLike) -> float:
    return cloud.timestamp if isinstance(cloud, PointCloud) else 0.0


LOCALIZERS: dict[LocalizationMethod, Callable[[PointCloud, LocalizerParams], InsulatorEstimate]] = {
    LocalizationMethod.DBSCAN: localize_dbscan,
    LocalizationMethod.RANSAC: localize_ransac,
    LocalizationMethod.DBSCAN_RANSAC: localize_dbscan_ransac,
    LocalizationMethod.DBSCAN_PCA: localize_dbscan_pca,
}


def localize(
    method: LocalizationMethod | str, cloud: PointCloud | ArrayLike, params: LocalizerParams
) -> InsulatorEstimate:
    return LOCALIZERS[LocalizationMethod(method)](cloud, params)  # type: ignore[arg-type]


def estimate_to_world(est: InsulatorEstimate, body_pose: RigidTransform) -> InsulatorEstimate:
    """Re-express a body-frame estimate in the world frame using the pose it was made at."""
    return InsulatorEstimate(
        center=body_pose.apply(est.center),
        orientation=canonical_direction(body_pose.rotate(est.orientation)),
        method=est.method,
        timestamp=est.timestamp,
        frame=FRAME_WORLD,
    )
