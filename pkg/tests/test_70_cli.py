import csv
import json
from unittest.mock import patch

import pytest
from click.testing import CliRunner

from tower_inspection.baseline import standard_scene
from tower_inspection.cli import main
from tower_inspection.compare_cmd import COMPARE_COLUMNS
from tower_inspection.mission import MissionLog
from tower_inspection.scene import TowerKind, default_scene, load_scene, save_scene


@pytest.fixture
def runner(monkeypatch):
    for key in ("TOWER_INSP_SEED", "TOWER_INSP_OUT", "TOWER_INSP_CONFIG"):
        monkeypatch.delenv(key, raising=False)
    return CliRunner()


@pytest.fixture
def bare_scene(tmp_path):
    return save_scene(standard_scene(1, 0), tmp_path / "bare.json")


class TestCLIGroup:
    def test_help(self, runner):
        result = runner.invoke(main, ["--help"])
        assert result.exit_code == 0
        for command in ("scene-gen", "localize-bench", "mission-sim", "compare"):
            assert command in result.output

    @pytest.mark.parametrize("command", ["scene-gen", "localize-bench", "mission-sim", "compare"])
    def test_subcommand_help(self, runner, command):
        result = runner.invoke(main, [command, "--help"])
        assert result.exit_code == 0
        assert "--out" in result.output

    def test_unknown_command(self, runner):
        assert runner.invoke(main, ["sync"]).exit_code != 0


class TestSceneGen:
    @pytest.mark.parametrize(("tower", "count"), [("A", 12), ("B", 4)])
    def test_writes_scene_file(self, runner, tmp_path, tower, count):
        result = runner.invoke(main, ["scene-gen", "--tower", tower, "--seed", "7", "--out", str(tmp_path)])
        assert result.exit_code == 0, result.output
        scene = load_scene(tmp_path / f"scene_{tower}_7.json")
        assert len(scene.insulators) == count
        assert scene.seed == 7

    def test_missing_tower_is_a_usage_error(self, runner, tmp_path):
        result = runner.invoke(main, ["scene-gen", "--out", str(tmp_path)])
        assert result.exit_code == 2

    def test_invalid_dimensions(self, runner, tmp_path):
        result = runner.invoke(main, ["scene-gen", "--tower", "A", "--height", "2", "--out", str(tmp_path)])
        assert result.exit_code == 1
        assert "Error" in result.output

    def test_seed_from_environment(self, runner, tmp_path, monkeypatch):
        monkeypatch.setenv("TOWER_INSP_SEED", "21")
        result = runner.invoke(main, ["scene-gen", "--tower", "B", "--out", str(tmp_path)])
        assert result.exit_code == 0, result.output
        assert (tmp_path / "scene_B_21.json").exists()


class TestMissionSim:
    def test_writes_log_and_flight_path(self, runner, tmp_path, bare_scene):
        out = tmp_path / "out"
        result = runner.invoke(main, ["mission-sim", "--config", str(bare_scene), "--out", str(out)])
        assert result.exit_code == 0, result.output
        log = json.loads((out / "mission_log.json").read_text())
        assert log["failed"] is False
        assert log["captures"] == []
        with (out / "flight_path.csv").open() as handle:
            header = next(csv.reader(handle))
        assert header == ["t", "x", "y", "z", "state"]

    def test_same_seed_same_files(self, runner, tmp_path, bare_scene):
        for name in ("a", "b"):
            args = ["mission-sim", "--config", str(bare_scene), "--seed", "5", "--out", str(tmp_path / name)]
            assert runner.invoke(main, args).exit_code == 0
        for file in ("mission_log.json", "flight_path.csv"):
            assert (tmp_path / "a" / file).read_bytes() == (tmp_path / "b" / file).read_bytes()

    def test_infeasible_standoff_fails(self, runner, tmp_path, bare_scene):
        mission_config = tmp_path / "mission.json"
        mission_config.write_text(json.dumps({"exploration_standoff": 3.0}))
        args = ["mission-sim", "--config", str(bare_scene), "--mission-config", str(mission_config)]
        result = runner.invoke(main, [*args, "--out", str(tmp_path)])
        assert result.exit_code == 1
        assert "Standoff" in result.output

    def test_aborted_mission_exits_nonzero(self, runner, tmp_path, bare_scene):
        aborted = MissionLog(failed=True, failure_reason="PlanningFailure: blocked")
        with patch("tower_inspection.mission_cmd.run_mission", return_value=aborted):
            result = runner.invoke(main, ["mission-sim", "--config", str(bare_scene), "--out", str(tmp_path)])
        assert result.exit_code == 1
        assert "Mission aborted" in result.output
        assert (tmp_path / "mission_log.json").exists()

    def test_missing_mission_config(self, runner, tmp_path):
        result = runner.invoke(main, ["mission-sim", "--mission-config", str(tmp_path / "nope.json")])
        assert result.exit_code == 2


class TestLocalizeBench:
    def test_rejects_zero_trials(self, runner, tmp_path):
        result = runner.invoke(main, ["localize-bench", "--trials", "0", "--out", str(tmp_path)])
        assert result.exit_code == 2

    def test_scene_without_insulators(self, runner, tmp_path, bare_scene):
        result = runner.invoke(
            main, ["localize-bench", "--config", str(bare_scene), "--trials", "1", "--out", str(tmp_path)]
        )
        assert result.exit_code == 1
        assert "no insulators" in result.output

    @pytest.mark.end_to_end
    def test_writes_csv(self, runner, tmp_path):
        args = ["localize-bench", "--tower", "B", "--w", "8", "--method", "DBSCAN", "--trials", "2"]
        result = runner.invoke(main, [*args, "--out", str(tmp_path)])
        assert result.exit_code == 0, result.output
        rows = list(csv.DictReader((tmp_path / "localize_bench_B.csv").open()))
        assert len(rows) == 1
        assert rows[0]["method"] == "DBSCAN"
        assert rows[0]["n_trials"] == "2"


@pytest.mark.end_to_end
class TestCompare:
    def test_writes_comparison_csv(self, runner, tmp_path):
        result = runner.invoke(main, ["compare", "--n", "2", "--seeds", "1", "--seed", "3", "--out", str(tmp_path)])
        assert result.exit_code == 0, result.output
        assert "Spearman" in result.output
        with (tmp_path / "compare.csv").open() as handle:
            rows = list(csv.reader(handle))
        assert tuple(rows[0]) == COMPARE_COLUMNS
        assert len(rows) == 2
        assert rows[1][:3] == ["A1-s3", "3", "2"]

    def test_tower_b_family(self, runner, tmp_path):
        args = ["compare", "--tower", "B", "--n", "2", "--seeds", "1", "--seed", "3", "--out", str(tmp_path)]
        result = runner.invoke(main, args)
        assert result.exit_code == 0, result.output
        with (tmp_path / "compare.csv").open() as handle:
            rows = list(csv.reader(handle))
        assert rows[1][:3] == ["B1-s3", "3", "2"]

    def test_scene_file_family(self, runner, tmp_path):
        scene_path = save_scene(default_scene(TowerKind.B, seed=5), tmp_path / "tower_b.json")
        args = ["compare", "--config", str(scene_path), "--n", "2", "--seeds", "1", "--seed", "3"]
        result = runner.invoke(main, [*args, "--out", str(tmp_path)])
        assert result.exit_code == 0, result.output
        with (tmp_path / "compare.csv").open() as handle:
            rows = list(csv.reader(handle))
        assert rows[1][0].startswith("B1-")


class TestCompareErrors:
    def test_more_waypoints_than_the_tower_offers(self, runner, tmp_path):
        result = runner.invoke(main, ["compare", "--tower", "B", "--n", "10", "--out", str(tmp_path)])
        assert result.exit_code != 0
        assert "at most 8" in result.output
        assert not (tmp_path / "compare.csv").exists()

    def test_scene_without_insulators(self, runner, bare_scene, tmp_path):
        result = runner.invoke(main, ["compare", "--config", str(bare_scene), "--out", str(tmp_path)])
        assert result.exit_code != 0
        assert not (tmp_path / "compare.csv").exists()
