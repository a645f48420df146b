"""Tests for tower construction, sensor simulation and scene files."""

import json
import math
from dataclasses import replace

import numpy as np
import pytest

from tower_inspection.common import make_rng
from tower_inspection.errors import InvalidDimensions, InvalidParameters, SceneFormatError
from tower_inspection.geometry import (
    FRAME_LIDAR,
    FRAME_TOWER,
    FRAME_WORLD,
    RigidTransform,
    project_points,
    project_to_image,
)
from tower_inspection.scene import (
    DetectorParams,
    InsulatorSpec,
    LidarParams,
    SceneConfig,
    StructureSegment,
    TowerKind,
    TowerModel,
    body_pose,
    build_primitives,
    build_tower,
    camera_pose,
    clean_fixture_scene,
    default_scene,
    empty_scene,
    ground_truth,
    load_scene,
    ray_capsule_hits,
    sample_insulator_surface,
    save_scene,
    scene_to_dict,
    simulate_detection,
    simulate_lidar_scan,
    surface_distance,
    view_is_clear,
)

TOWER_POSE = RigidTransform.identity(FRAME_TOWER, FRAME_WORLD)
CLEAN_LIDAR = LidarParams(range_noise_sigma=0.0, dropout_prob=0.0)


def _single_insulator_scene(structure=(), center=(5.0, 0.0, 0.0)):
    insulator = InsulatorSpec(0, center, (0.0, 0.0, 1.0))
    tower = TowerModel(TowerKind.B, TOWER_POSE, 25.0, 10.0, (insulator,), tuple(structure), subset=True)
    return SceneConfig(towers=(tower,), lidar=CLEAN_LIDAR)


class TestBuildTower:
    def test_tower_a_has_twelve_insulators(self):
        tower = build_tower(TowerKind.A, TOWER_POSE, 25, 10)
        assert len(tower.insulators) == 12
        lateral = [ins.center[1] for ins in tower.insulators]
        assert sum(1 for y in lateral if y > 0) == 6
        assert len({round(float(ins.center[2]), 6) for ins in tower.insulators}) == 3

    def test_tower_b_has_four_vertical_insulators(self):
        tower = build_tower("B", TOWER_POSE, 25, 10)
        assert len(tower.insulators) == 4
        for ins in tower.insulators:
            np.testing.assert_allclose(ins.axis, (0, 0, -1), atol=1e-12)

    def test_pose_shifts_every_insulator(self):
        base = build_tower(TowerKind.A, TOWER_POSE, 25, 10)
        moved = build_tower(
            TowerKind.A, RigidTransform.from_translation(5, 0, 0, FRAME_TOWER, FRAME_WORLD), 25, 10
        )
        for a, b in zip(base.insulators, moved.insulators):
            np.testing.assert_allclose(b.center - a.center, (5, 0, 0), atol=1e-12)

    @pytest.mark.parametrize(("height", "width"), [(4.0, 10.0), (25.0, 1.0), (math.nan, 10.0)])
    def test_invalid_dimensions(self, height, width):
        with pytest.raises(InvalidDimensions):
            build_tower(TowerKind.A, TOWER_POSE, height, width)

    def test_ids_are_unique(self):
        ids = [ins.id for ins in build_tower(TowerKind.A, TOWER_POSE, 25, 10).insulators]
        assert sorted(ids) == list(range(12))

    def test_with_insulators_drops_their_conductors(self):
        tower = build_tower(TowerKind.A, TOWER_POSE, 25, 10)
        reduced = tower.with_insulators([0, 5])
        assert [ins.id for ins in reduced.insulators] == [0, 5]
        conductor_ids = {s.insulator_id for s in reduced.structure if s.kind == "conductor"}
        assert conductor_ids <= {0, 5}
        assert reduced.subset
        assert not tower.subset

    @pytest.mark.parametrize(("kind", "count"), [(TowerKind.A, 12), (TowerKind.B, 4)])
    def test_full_tower_needs_its_insulator_count(self, kind, count):
        insulators = build_tower(kind, TOWER_POSE, 25, 10).insulators
        assert len(insulators) == count
        with pytest.raises(InvalidParameters):
            TowerModel(kind, TOWER_POSE, 25.0, 10.0, insulators[:-1])
        reduced = TowerModel(kind, TOWER_POSE, 25.0, 10.0, insulators[:-1], subset=True)
        assert len(reduced.insulators) == count - 1


class TestGroundTruth:
    def test_counts(self):
        assert len(ground_truth(default_scene(TowerKind.A))) == 12
        assert len(ground_truth(default_scene(TowerKind.B))) == 4
        assert ground_truth(empty_scene()) == []


class TestRayCasting:
    def test_capsule_hit_distance(self):
        hit = ray_capsule_hits(np.array([1.0, 0.0, 0.0]), [5.0, 0.0, -1.0], [5.0, 0.0, 1.0], 1.0)
        assert float(hit) == pytest.approx(4.0)

    def test_miss_is_infinite(self):
        hit = ray_capsule_hits(np.array([0.0, 1.0, 0.0]), [5.0, 0.0, -1.0], [5.0, 0.0, 1.0], 1.0)
        assert np.isinf(hit)

    def test_primitives_are_short(self):
        tower = build_tower(TowerKind.A, TOWER_POSE, 25, 10)
        prims = build_primitives([tower])
        lengths = np.linalg.norm(prims.ends - prims.starts, axis=1)
        assert np.all(lengths <= 3.0 + 1e-9)


class TestSimulateLidarScan:
    def test_empty_scene_gives_empty_cloud(self):
        scene = empty_scene()
        cloud = simulate_lidar_scan(scene, RigidTransform.identity(FRAME_LIDAR, FRAME_WORLD), make_rng(7, "lidar"))
        assert len(cloud) == 0
        assert cloud.frame == FRAME_LIDAR

    def test_points_lie_on_the_cylinder(self):
        scene = _single_insulator_scene()
        cloud = simulate_lidar_scan(scene, RigidTransform.identity(FRAME_LIDAR, FRAME_WORLD), make_rng(7, "lidar"))
        assert len(cloud) > 0
        assert np.max(surface_distance(scene.primitives, cloud.points)) < 1e-6

    def test_occluded_cylinder_returns_nothing(self):
        wall = StructureSegment((2.5, 0.0, -3.0), (2.5, 0.0, 3.0), 1.0)
        scene = _single_insulator_scene(structure=(wall,))
        cloud = simulate_lidar_scan(scene, RigidTransform.identity(FRAME_LIDAR, FRAME_WORLD), make_rng(7, "lidar"))
        assert len(cloud) > 0
        assert np.all(cloud.points[:, 0] < 4.0)

    def test_same_seed_same_scan(self):
        scene = default_scene(TowerKind.A, seed=3)
        pose = RigidTransform.from_translation(0, 12, 15, FRAME_LIDAR, FRAME_WORLD)
        a = simulate_lidar_scan(scene, pose, make_rng(3, "lidar"))
        b = simulate_lidar_scan(scene, pose, make_rng(3, "lidar"))
        np.testing.assert_array_equal(a.points, b.points)


class TestSimulateDetection:
    @staticmethod
    def _camera(scene, yaw):
        body = body_pose((0.0, 10.0, 15.0), yaw)
        return camera_pose(body, scene.extrinsics)

    def test_centered_insulator_bbox(self):
        scene = clean_fixture_scene()
        cam = self._camera(scene, -math.pi / 2)
        events = simulate_detection(scene, cam, scene.camera, make_rng(7, "detector"))
        assert len(events) == 1
        expected = project_to_image(scene.camera, cam.inverse().apply(scene.insulators[0].center))
        center = events[0].bbox.center
        assert abs(center.u - expected.u) < 1.0
        assert abs(center.v - expected.v) < 1.0
        assert events[0].true_insulator_id == 0

    def test_insulator_behind_camera_is_excluded(self):
        scene = clean_fixture_scene()
        cam = self._camera(scene, math.pi / 2)
        assert simulate_detection(scene, cam, scene.camera, make_rng(7, "detector")) == []

    def test_no_insulators_no_detections(self):
        scene = empty_scene()
        cam = self._camera(clean_fixture_scene(), 0.0)
        assert simulate_detection(scene, cam, scene.camera, make_rng(7, "detector")) == []

    def test_out_of_range_is_excluded(self):
        scene = clean_fixture_scene()
        far = SceneConfig(
            towers=scene.towers,
            lidar=scene.lidar,
            detector=DetectorParams(detection_range=3.0, false_negative_prob=0.0, bbox_pixel_noise_sigma=0.0),
        )
        cam = self._camera(far, -math.pi / 2)
        assert simulate_detection(far, cam, far.camera, make_rng(7, "detector")) == []

    def test_zero_noise_box_holds_the_visible_surface(self):
        scene = default_scene(TowerKind.A, seed=7)
        scene = replace(
            scene, detector=DetectorParams(false_negative_prob=0.0, bbox_pixel_noise_sigma=0.0)
        )
        K = scene.camera
        by_id = {ins.id: ins for ins in scene.insulators}
        rng = make_rng(7, "test")
        seen = 0
        for x in (-4.0, 0.0, 4.0):
            for z in (14.0, 18.0, 22.0):
                cam = camera_pose(body_pose((x, 12.0, z), -math.pi / 2), scene.extrinsics)
                for event in simulate_detection(scene, cam, K, make_rng(7, "detector")):
                    points = sample_insulator_surface(by_id[event.true_insulator_id], 400, rng)
                    points_C = cam.inverse().apply(points)
                    uv = project_points(K, points_C[points_C[:, 2] > 0])
                    in_image = (
                        (uv[:, 0] >= 0)
                        & (uv[:, 0] <= K.image_width)
                        & (uv[:, 1] >= 0)
                        & (uv[:, 1] <= K.image_height)
                    )
                    assert np.all(event.bbox.contains(uv[in_image, 0], uv[in_image, 1]))
                    seen += 1
        assert seen > 0


class TestOcclusion:
    @staticmethod
    def _fixture(segment=None):
        scene = clean_fixture_scene()
        if segment is None:
            return scene
        return replace(scene, towers=(replace(scene.tower, structure=(segment,)),))

    @staticmethod
    def _camera(scene):
        return camera_pose(body_pose((0.0, 10.0, 15.0), -math.pi / 2), scene.extrinsics)

    def _detect(self, scene):
        return simulate_detection(scene, self._camera(scene), scene.camera, make_rng(7, "detector"))

    def test_lattice_well_in_front_hides_the_insulator(self):
        scene = self._fixture(StructureSegment((0.3, 6.0, 13.0), (0.3, 6.0, 17.0), 0.05))
        assert self._detect(scene) == []
        assert not view_is_clear(scene, self._camera(scene), scene.insulators[0], scene.camera)

    def test_lattice_within_clearance_does_not_hide(self):
        scene = self._fixture(StructureSegment((0.3, 4.6, 13.0), (0.3, 4.6, 17.0), 0.05))
        assert len(self._detect(scene)) == 1

    def test_conductor_in_front_does_not_hide(self):
        wire = StructureSegment((0.3, 6.0, 13.0), (0.3, 6.0, 17.0), 0.02, "conductor", 0)
        scene = self._fixture(wire)
        assert len(self._detect(scene)) == 1
        assert not view_is_clear(scene, self._camera(scene), scene.insulators[0], scene.camera)

    def test_open_view_is_clear(self):
        scene = self._fixture()
        assert view_is_clear(scene, self._camera(scene), scene.insulators[0], scene.camera)

    def test_member_on_the_center_ray_hides_the_insulator(self):
        scene = self._fixture(StructureSegment((0.0, 5.0, 13.0), (0.0, 5.0, 17.0), 0.05))
        assert self._detect(scene) == []


class TestSurfaceSampler:
    def test_samples_on_surface(self):
        scene = _single_insulator_scene()
        points = sample_insulator_surface(scene.insulators[0], 200, make_rng(1, "scene"))
        assert np.max(surface_distance(scene.primitives, points)) < 1e-9


class TestSceneFiles:
    def test_save_and_load_preserve_document(self, tmp_path):
        scene = default_scene(TowerKind.B, seed=11)
        path = save_scene(scene, tmp_path / "scene.json")
        loaded = load_scene(path)
        assert loaded.seed == 11
        assert len(loaded.insulators) == 4
        for a, b in zip(scene.insulators, loaded.insulators):
            assert a.id == b.id
            np.testing.assert_allclose(a.center, b.center)
            np.testing.assert_allclose(a.axis, b.axis)
        assert len(loaded.tower.structure) == len(scene.tower.structure)
        assert loaded.extrinsics.T_CB.allclose(scene.extrinsics.T_CB, atol=1e-6)
        assert loaded.lidar == scene.lidar

    def test_missing_towers(self, tmp_path):
        path = tmp_path / "scene.json"
        path.write_text(json.dumps({"seed": 1, "towers": []}))
        with pytest.raises(SceneFormatError):
            load_scene(path)

    def test_malformed_json(self, tmp_path):
        path = tmp_path / "scene.json"
        path.write_text("{not json")
        with pytest.raises(SceneFormatError):
            load_scene(path)

    def test_bad_tower_dimensions(self, tmp_path):
        document = scene_to_dict(default_scene(TowerKind.A))
        document["towers"][0]["height"] = -1
        path = tmp_path / "scene.json"
        path.write_text(json.dumps(document))
        with pytest.raises(SceneFormatError):
            load_scene(path)

    def test_short_full_tower_is_rejected(self, tmp_path):
        document = scene_to_dict(default_scene(TowerKind.A))
        document["towers"][0]["insulators"].pop()
        del document["towers"][0]["subset"]
        path = tmp_path / "scene.json"
        path.write_text(json.dumps(document))
        with pytest.raises(SceneFormatError):
            load_scene(path)

    def test_subset_flag_survives_a_round_trip(self, tmp_path):
        scene = default_scene(TowerKind.A, seed=2)
        reduced = replace(scene, towers=(scene.tower.with_insulators([1, 2, 3]),))
        loaded = load_scene(save_scene(reduced, tmp_path / "scene.json"))
        assert loaded.tower.subset
        assert [ins.id for ins in loaded.insulators] == [1, 2, 3]
