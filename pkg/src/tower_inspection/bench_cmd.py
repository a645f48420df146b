"""Localization benchmark: hover at distance w from an insulator and score each method.

Every trial simulates one cumulated observation (three detections half a second
apart) and runs all selected methods on that same cloud, so the methods are
compared on identical data.
"""

import asyncio
import csv
from dataclasses import dataclass, replace
from pathlib import Path

import click
import numpy as np
from loguru import logger
from numpy.typing import NDArray
from rich import print
from rich.table import Table
from scipy.spatial.transform import Rotation

from .common import configure_logging, load_env_config, make_rng
from .errors import (
    DegenerateInput,
    InspectionError,
    InvalidParameters,
    NoCluster,
    NoPointsWithinTau,
)
from .fusion import DetectionBuffer, bbox_center_ray, filter_by_bbox, project_cloud, ray_distance
from .geometry import PointCloud, RigidTransform, Vec3, yaw_towards
from .localization import LocalizationMethod, LocalizerParams, estimate_to_world, localize
from .scene import (
    DetectionEvent,
    InsulatorSpec,
    SceneConfig,
    TowerKind,
    body_pose,
    camera_pose,
    default_scene,
    lidar_pose,
    load_scene,
    simulate_detection,
    simulate_lidar_scan,
    view_is_clear,
)

BENCH_COLUMNS = (
    "tower",
    "method",
    "w",
    "n_trials",
    "failures",
    "mean_error_m",
    "std_error_m",
    "mean_xy_m",
    "std_xy_m",
    "mean_z_m",
    "std_z_m",
)
DEFAULT_W = (8.0, 9.0, 10.0)
DEFAULT_TRIALS = 150
SCAN_PERIOD = 0.5
MAX_SCANS = 10
HOVER_AZIMUTHS_DEG = (0.0, 20.0, -20.0, 40.0, -40.0)
TARGET_RAY_TOLERANCE = 0.5


@dataclass(frozen=True, eq=False)
class BenchCell:
    """Error statistics of one (method, w) cell against ground truth."""

    tower: str
    method: LocalizationMethod
    w: float
    errors: NDArray[np.float64]
    failures: int = 0

    @property
    def n_trials(self) -> int:
        return int(self.errors.shape[0]) + self.failures

    @staticmethod
    def _stats(values: NDArray[np.float64]) -> tuple[float, float]:
        if values.size == 0:
            return float("nan"), float("nan")
        return float(values.mean()), float(values.std())

    @property
    def euclidean(self) -> tuple[float, float]:
        return self._stats(np.linalg.norm(self.errors, axis=1))

    @property
    def xy(self) -> tuple[float, float]:
        return self._stats(np.linalg.norm(self.errors[:, :2], axis=1))

    @property
    def z(self) -> tuple[float, float]:
        return self._stats(np.abs(self.errors[:, 2]))

    def row(self) -> list[str]:
        stats = [*self.euclidean, *self.xy, *self.z]
        return [self.tower, self.method.value, repr(self.w), str(self.n_trials), str(self.failures)] + [
            repr(v) for v in stats
        ]


@dataclass(frozen=True)
class BenchReport:
    cells: tuple[BenchCell, ...]

    def cell(self, method: LocalizationMethod | str, w: float) -> BenchCell:
        method = LocalizationMethod(method)
        return next(c for c in self.cells if c.method is method and c.w == w)

    def write_csv(self, path: str | Path) -> Path:
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        with target.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(BENCH_COLUMNS)
            for cell in self.cells:
                writer.writerow(cell.row())
        return target


def hover_position(
    scene: SceneConfig, ins: InsulatorSpec, w: float, azimuth_deg: float = 0.0
) -> tuple[Vec3, float]:
    """Point at horizontal distance ``w`` from the insulator on its outward side, facing it.

    ``azimuth_deg`` turns the viewing direction about the vertical, away from the
    outward normal.
    """
    tower = scene.tower
    lateral = np.cross([0.0, 0.0, 1.0], tower.line_axis)
    lateral /= np.linalg.norm(lateral)
    side = 1.0 if float((ins.center - tower.center) @ lateral) >= 0 else -1.0
    outward = Rotation.from_euler("z", azimuth_deg, degrees=True).apply(side * lateral)
    position = ins.center + w * outward
    return position, yaw_towards(position, ins.center)


def clear_hover(scene: SceneConfig, ins: InsulatorSpec, w: float) -> tuple[Vec3, float]:
    """First hover pose in ``HOVER_AZIMUTHS_DEG`` with an unobstructed view of ``ins``."""
    for azimuth in HOVER_AZIMUTHS_DEG:
        position, yaw = hover_position(scene, ins, w, azimuth)
        cam = camera_pose(body_pose(position, yaw), scene.extrinsics)
        if view_is_clear(scene, cam, ins, scene.camera):
            return position, yaw
    logger.warning(f"No clear view of insulator {ins.id} at w={w}, hovering on the normal")
    return hover_position(scene, ins, w)


def _target_detection(
    scene: SceneConfig, detections: list[DetectionEvent], target: Vec3
) -> DetectionEvent | None:
    """Detection whose bbox-center ray passes closest to ``target``, if within tolerance."""
    best, best_offset = None, TARGET_RAY_TOLERANCE
    for detection in detections:
        origin, direction = bbox_center_ray(detection.bbox, detection.camera_pose_world, scene.camera)
        offset = ray_distance(target, origin, direction)
        if offset <= best_offset:
            best, best_offset = detection, offset
    return best


def collect_observation(
    scene: SceneConfig, ins: InsulatorSpec, w: float, seed: int, trial: int
) -> tuple[PointCloud, RigidTransform] | None:
    """Cumulated body-frame cloud of the insulator seen from the hover point, or None."""
    w_key = int(round(w * 1000))
    detector_rng = make_rng(seed, "detector", w_key, trial)
    lidar_rng = make_rng(seed, "lidar", w_key, trial)
    position, yaw = clear_hover(scene, ins, w)
    body = body_pose(position, yaw)
    cam = camera_pose(body, scene.extrinsics)
    extrinsics = scene.extrinsics
    buffer = DetectionBuffer()

    for tick in range(MAX_SCANS):
        t = tick * SCAN_PERIOD
        detections = simulate_detection(scene, cam, scene.camera, detector_rng, t)
        detection = _target_detection(scene, detections, ins.center)
        if detection is None:
            continue
        cloud = simulate_lidar_scan(scene, lidar_pose(body, extrinsics), lidar_rng, t)
        projections = project_cloud(cloud, extrinsics.T_BL, extrinsics.T_CB, scene.camera)
        filtered = filter_by_bbox(
            cloud, projections, detection.bbox, extrinsics.T_BL, body_pose=body, timestamp=t
        )
        cumulated = buffer.push_and_poll(filtered)
        if cumulated is not None:
            return cumulated, body
    logger.debug(f"No cumulated observation for insulator {ins.id} at w={w} trial {trial}")
    return None


def run_trial(
    scene: SceneConfig,
    w: float,
    methods: tuple[LocalizationMethod, ...],
    params: LocalizerParams,
    seed: int,
    trial: int,
) -> dict[LocalizationMethod, Vec3 | None]:
    """World-frame center error of every method for one trial (None when it fails)."""
    insulators = scene.tower.insulators
    ins = insulators[trial % len(insulators)]
    observation = collect_observation(scene, ins, w, seed, trial)
    results: dict[LocalizationMethod, Vec3 | None] = dict.fromkeys(methods)
    if observation is None:
        return results
    cloud, body = observation
    trial_params = replace(params, rng_seed=trial)
    for method in methods:
        try:
            est = estimate_to_world(localize(method, cloud, trial_params), body)
        except (NoCluster, DegenerateInput, NoPointsWithinTau) as e:
            logger.debug(f"{method.value} failed at w={w} trial {trial}: {e}")
            continue
        results[method] = est.center - ins.center
    return results


async def _run_all(
    scene: SceneConfig,
    w_values: tuple[float, ...],
    methods: tuple[LocalizationMethod, ...],
    params: LocalizerParams,
    seed: int,
    trials: int,
) -> list[tuple[float, int, dict[LocalizationMethod, Vec3 | None]]]:
    keys = [(w, trial) for w in w_values for trial in range(trials)]
    outcomes = await asyncio.gather(
        *(asyncio.to_thread(run_trial, scene, w, methods, params, seed, trial) for w, trial in keys)
    )
    return [(w, trial, outcome) for (w, trial), outcome in zip(keys, outcomes)]


def run_bench(
    scene: SceneConfig,
    w_values: tuple[float, ...] = DEFAULT_W,
    methods: tuple[LocalizationMethod, ...] = tuple(LocalizationMethod),
    trials: int = DEFAULT_TRIALS,
    seed: int = 7,
    params: LocalizerParams | None = None,
) -> BenchReport:
    if trials < 1:
        raise InvalidParameters("trials must be >= 1.")
    if not scene.tower.insulators:
        raise InvalidParameters("The benchmark scene has no insulators.")
    w_values = tuple(sorted(set(w_values)))
    params = params or LocalizerParams()
    results = asyncio.run(_run_all(scene, w_values, methods, params, seed, trials))
    results.sort(key=lambda r: (r[0], r[1]))

    cells = []
    for method in methods:
        for w in w_values:
            errors = [outcome[method] for rw, _, outcome in results if rw == w]
            ok = [e for e in errors if e is not None]
            cells.append(
                BenchCell(
                    tower=scene.tower.kind.value,
                    method=method,
                    w=w,
                    errors=np.array(ok).reshape(-1, 3),
                    failures=len(errors) - len(ok),
                )
            )
    return BenchReport(tuple(cells))


def display_report(report: BenchReport) -> None:
    table = Table(show_header=True, header_style="bold", title="Insulator localization error [m]")
    table.add_column("Method")
    table.add_column("w [m]", justify="right")
    table.add_column("error", justify="right")
    table.add_column("xy", justify="right")
    table.add_column("z", justify="right")
    table.add_column("failed", justify="right")
    for cell in report.cells:
        table.add_row(
            cell.method.value,
            f"{cell.w:g}",
            "{:.2f} ± {:.2f}".format(*cell.euclidean),
            "{:.2f} ± {:.2f}".format(*cell.xy),
            "{:.2f} ± {:.2f}".format(*cell.z),
            f"{cell.failures}/{cell.n_trials}",
        )
    print(table)


@click.command("localize-bench")
@click.option("--verbose", "-v", is_flag=True, help="Print all the output.")
@click.option("--tower", type=click.Choice([k.value for k in TowerKind]), default="A", show_default=True)
@click.option("--w", "w_values", type=float, multiple=True, help="Hover distance(s) from the insulator.")
@click.option(
    "--method",
    "methods",
    type=click.Choice([m.value for m in LocalizationMethod]),
    multiple=True,
    help="Localization method(s); all of them by default.",
)
@click.option("--trials", type=click.IntRange(min=1), default=DEFAULT_TRIALS, show_default=True)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="Scene JSON file.")
@click.option("--seed", type=int, help="Random seed (default: TOWER_INSP_SEED or 7).")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), help="Output directory.")
def bench_command(
    verbose: bool,
    tower: str,
    w_values: tuple[float, ...],
    methods: tuple[str, ...],
    trials: int,
    config_path: str | None,
    seed: int | None,
    out_dir: str | None,
) -> None:
    """Localization error of each method at several hover distances (CSV + table)."""
    configure_logging(verbose)
    env = load_env_config()
    seed = env.seed if seed is None else seed
    config_path = config_path or env.scene_config
    try:
        scene = load_scene(config_path) if config_path else default_scene(tower, seed)
        report = run_bench(
            scene,
            w_values or DEFAULT_W,
            tuple(LocalizationMethod(m) for m in methods) or tuple(LocalizationMethod),
            trials,
            seed,
        )
    except InspectionError as e:
        raise click.ClickException(str(e)) from e

    display_report(report)
    target = report.write_csv(Path(out_dir or env.out_dir) / f"localize_bench_{scene.tower.kind.value}.csv")
    print(f"Wrote {target}")
