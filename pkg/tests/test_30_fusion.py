"""Tests for cloud projection, bbox filtering and detection accumulation."""

import numpy as np
import pytest

from tower_inspection.errors import FrameMismatch, InvalidParameters, NonMonotonicTimestamp
from tower_inspection.fusion import (
    DetectionBuffer,
    DetectionTracker,
    FilteredCloud,
    bbox_center_ray,
    bbox_mask,
    cumulate,
    filter_by_bbox,
    project_cloud,
    push_and_poll,
    ray_anchor,
    ray_distance,
)
from tower_inspection.geometry import (
    FRAME_BODY,
    FRAME_CAMERA,
    FRAME_LIDAR,
    FRAME_WORLD,
    BBox,
    CameraIntrinsics,
    ImagePoint,
    PointCloud,
    RigidTransform,
    lidar_to_camera,
    project_to_image,
)
from tower_inspection.scene import Extrinsics, body_pose, camera_pose

K = CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)
T_BL_ID = RigidTransform.identity(FRAME_LIDAR, FRAME_BODY)
T_CB_ID = RigidTransform.identity(FRAME_BODY, FRAME_CAMERA)
BOX = BBox(300.0, 220.0, 340.0, 260.0)


def _filtered(n, t, body=None):
    return FilteredCloud(np.full((n, 3), float(n)), BOX, t, body)


class TestProjectCloud:
    def test_empty_cloud(self):
        assert len(project_cloud(PointCloud.empty(), T_BL_ID, T_CB_ID, K)) == 0

    def test_point_on_optical_axis(self):
        projections = project_cloud(PointCloud([[0.0, 0.0, 5.0]]), T_BL_ID, T_CB_ID, K)
        assert list(projections) == [(0, ImagePoint(320.0, 240.0))]

    def test_matches_per_point_chain(self):
        ext = Extrinsics.default()
        rng = np.random.default_rng(5)
        points = rng.uniform([-10, -10, -3], [10, 10, 3], size=(100, 3))
        projections = project_cloud(PointCloud(points), ext.T_BL, ext.T_CB, K)
        expected = {}
        for i, p in enumerate(points):
            p_C = lidar_to_camera(p, ext.T_BL, ext.T_CB)
            if p_C[2] > 0:
                expected[i] = project_to_image(K, p_C)
        assert projections.indices.tolist() == sorted(expected)
        for index, uv in projections:
            np.testing.assert_allclose(uv, expected[index], atol=1e-9)

    def test_requires_lidar_frame(self):
        with pytest.raises(FrameMismatch):
            project_cloud(PointCloud([[0, 0, 1]], FRAME_BODY), T_BL_ID, T_CB_ID, K)


class TestBBoxFilter:
    def test_point_at_bbox_center_is_kept(self):
        cloud = PointCloud([[0.0, 0.0, 5.0]])
        projections = project_cloud(cloud, T_BL_ID, T_CB_ID, K)
        assert bbox_mask(projections, BOX).tolist() == [0]

    def test_point_behind_camera_is_dropped(self):
        cloud = PointCloud([[0.0, 0.0, -5.0], [0.0, 0.0, 5.0]])
        projections = project_cloud(cloud, T_BL_ID, T_CB_ID, K)
        assert bbox_mask(projections, BOX).tolist() == [1]

    def test_matches_brute_force_membership(self):
        rng = np.random.default_rng(9)
        cloud = PointCloud(rng.uniform([-2, -2, -4], [2, 2, 8], size=(300, 3)))
        projections = project_cloud(cloud, T_BL_ID, T_CB_ID, K)
        expected = []
        for i, p in enumerate(cloud.points):
            if p[2] <= 0:
                continue
            u, v = project_to_image(K, p)
            if BOX.u_min <= u <= BOX.u_max and BOX.v_min <= v <= BOX.v_max:
                expected.append(i)
        assert bbox_mask(projections, BOX).tolist() == expected

    def test_filter_returns_body_frame_points(self):
        T_BL = RigidTransform.from_translation(0, 0, 0.1, FRAME_LIDAR, FRAME_BODY)
        cloud = PointCloud([[0.0, 0.0, 5.0], [4.0, 0.0, 5.0]], timestamp=2.0)
        projections = project_cloud(cloud, T_BL_ID, T_CB_ID, K)
        filtered = filter_by_bbox(cloud, projections, BOX, T_BL)
        np.testing.assert_allclose(filtered.points, [[0.0, 0.0, 5.1]])
        assert filtered.detection_timestamp == 2.0
        assert filtered.source_bbox == BOX


class TestDetectionBuffer:
    def test_three_detections_cumulate(self):
        buffer = DetectionBuffer()
        assert buffer.push_and_poll(_filtered(10, 0.0)) is None
        assert buffer.push_and_poll(_filtered(12, 0.5)) is None
        cloud = push_and_poll(buffer, _filtered(8, 1.0))
        assert len(cloud) == 30
        assert cloud.frame == FRAME_BODY
        assert len(buffer.entries) == 0

    def test_two_detections_give_nothing(self):
        buffer = DetectionBuffer()
        assert buffer.push_and_poll(_filtered(10, 0.0)) is None
        assert buffer.push_and_poll(_filtered(10, 0.5)) is None

    def test_gap_resets_buffer(self):
        buffer = DetectionBuffer(max_gap=1.0)
        buffer.push_and_poll(_filtered(10, 0.0))
        buffer.push_and_poll(_filtered(10, 0.5))
        assert buffer.push_and_poll(_filtered(10, 2.0)) is None
        assert len(buffer.entries) == 1

    def test_timestamps_must_not_go_back(self):
        buffer = DetectionBuffer()
        buffer.push_and_poll(_filtered(10, 1.0))
        with pytest.raises(NonMonotonicTimestamp):
            buffer.push_and_poll(_filtered(10, 0.5))

    def test_invalid_capacity(self):
        with pytest.raises(InvalidParameters):
            DetectionBuffer(capacity=0)


class TestCumulate:
    def test_motion_compensated_through_world(self):
        landmark = np.array([10.0, 2.0, 5.0])
        entries = []
        for t, x in ((0.0, 0.0), (0.5, 1.0), (1.0, 2.0)):
            body = body_pose((x, 0.0, 5.0), 0.0)
            entries.append(FilteredCloud(body.inverse().apply(landmark[None, :]), BOX, t, body))
        cloud = cumulate(entries)
        expected = entries[-1].body_pose.inverse().apply(landmark)
        np.testing.assert_allclose(cloud.points, np.tile(expected, (3, 1)), atol=1e-12)

    def test_without_poses_points_concatenate(self):
        cloud = cumulate([_filtered(2, 0.0), _filtered(3, 0.5)])
        assert len(cloud) == 5
        assert cloud.timestamp == 0.5


class TestDetectionTracker:
    @staticmethod
    def _observe(tracker, target, t, position=(0.0, -8.0, 5.0)):
        body = body_pose(position, np.pi / 2)
        cam = camera_pose(body, Extrinsics.default())
        p_C = cam.inverse().apply(target)
        u, v = project_to_image(K, p_C)
        box = BBox(u - 10, v - 10, u + 10, v + 10)
        points = body.inverse().apply(np.asarray(target, dtype=float)[None, :] + [[0.0, 0.0, 0.0], [0.05, 0.0, 0.0]])
        return tracker.update(FilteredCloud(points, box, t, body), cam, K)

    def test_bbox_center_ray_points_at_target(self):
        body = body_pose((0.0, -8.0, 5.0), np.pi / 2)
        cam = camera_pose(body, Extrinsics.default())
        target = np.array([0.0, 0.0, 5.0])
        box_center = project_to_image(K, cam.inverse().apply(target))
        origin, direction = bbox_center_ray(BBox(box_center.u - 1, box_center.v - 1, box_center.u + 1, box_center.v + 1), cam, K)
        to_target = (target - origin) / np.linalg.norm(target - origin)
        np.testing.assert_allclose(direction, to_target, atol=1e-9)

    def test_same_insulator_cumulates_once(self):
        tracker = DetectionTracker()
        target = (0.0, 0.0, 5.0)
        assert self._observe(tracker, target, 0.0) is None
        assert self._observe(tracker, target, 0.5) is None
        observation = self._observe(tracker, target, 1.0)
        assert observation is not None
        assert len(observation.cloud) == 6
        assert tracker.track_count == 1

    def test_separate_insulators_get_separate_tracks(self):
        tracker = DetectionTracker()
        self._observe(tracker, (0.0, 0.0, 5.0), 0.0)
        self._observe(tracker, (3.0, 0.0, 5.0), 0.0)
        assert tracker.track_count == 2

    def test_stale_tracks_are_dropped(self):
        tracker = DetectionTracker(max_gap=1.0)
        self._observe(tracker, (0.0, 0.0, 5.0), 0.0)
        self._observe(tracker, (3.0, 0.0, 5.0), 5.0)
        assert tracker.track_count == 1

    def test_requires_body_pose(self):
        with pytest.raises(InvalidParameters):
            DetectionTracker().update(_filtered(3, 0.0), RigidTransform.identity(FRAME_CAMERA, FRAME_WORLD), K)

    def test_observation_carries_its_ray(self):
        tracker = DetectionTracker()
        target = np.array([0.0, 0.0, 5.0])
        for t in (0.0, 0.5):
            self._observe(tracker, target, t)
        observation = self._observe(tracker, target, 1.0)
        assert ray_distance(target, observation.ray_origin, observation.ray_direction) < 1e-6
        assert np.linalg.norm(observation.ray_direction) == pytest.approx(1.0)

    def test_one_detection_per_track_per_timestamp(self):
        tracker = DetectionTracker()
        self._observe(tracker, (0.0, 0.0, 5.0), 0.0)
        self._observe(tracker, (0.0, 0.0, 5.0), 0.0)
        assert tracker.track_count == 2

    def test_nearby_insulators_stay_apart(self):
        tracker = DetectionTracker()
        for t in (0.0, 0.5):
            self._observe(tracker, (0.0, 0.0, 5.0), t)
            self._observe(tracker, (1.0, 0.0, 5.0), t)
        first = self._observe(tracker, (0.0, 0.0, 5.0), 1.0)
        second = self._observe(tracker, (1.0, 0.0, 5.0), 1.0)
        assert tracker.track_count == 2
        assert {first.track_id, second.track_id} == {0, 1}

    def test_invalid_association_radius(self):
        with pytest.raises(InvalidParameters):
            DetectionTracker(association_radius=0.0)


class TestRayHelpers:
    def test_distance_to_a_point_beside_the_ray(self):
        assert ray_distance(np.array([3.0, 4.0, 10.0]), np.zeros(3), np.array([0.0, 0.0, 1.0])) == pytest.approx(5.0)

    def test_distance_behind_the_origin_is_to_the_origin(self):
        assert ray_distance(np.array([0.0, 0.0, -3.0]), np.zeros(3), np.array([0.0, 0.0, 1.0])) == pytest.approx(3.0)

    def test_anchor_sits_at_the_near_percentile_depth(self):
        points = np.column_stack((np.full(10, 0.2), np.zeros(10), np.arange(1.0, 11.0)))
        anchor = ray_anchor(points, np.zeros(3), np.array([0.0, 0.0, 1.0]))
        np.testing.assert_allclose(anchor, (0.0, 0.0, 1.9), atol=1e-12)

    def test_anchor_never_goes_behind_the_origin(self):
        points = np.array([[0.0, 0.0, -2.0], [0.0, 0.0, -1.0]])
        anchor = ray_anchor(points, np.ones(3), np.array([0.0, 0.0, 1.0]))
        np.testing.assert_allclose(anchor, np.ones(3))
