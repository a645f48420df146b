from tower_inspection.baseline import two_flight_duration
from tower_inspection.cli import main as cli
from tower_inspection.mission import MissionConfig, run_mission
from tower_inspection.scene import default_scene, load_scene

__all__ = [
    "MissionConfig",
    "cli",
    "default_scene",
    "load_scene",
    "run_mission",
    "two_flight_duration",
]
