"""Single-flight versus two-flight inspection durations over the standard scene family."""

import asyncio
import csv
from dataclasses import dataclass
from pathlib import Path

import click
from loguru import logger
from rich import print
from rich.table import Table
from scipy import stats

from .baseline import insulators_for, max_waypoints, standard_scene, two_flight_duration
from .common import configure_logging, load_env_config
from .errors import InspectionError, InvalidParameters, PlanningFailure
from .mission import MissionConfig, load_mission_config, run_mission
from .scene import SceneConfig, TowerKind, default_scene, load_scene

COMPARE_COLUMNS = (
    "scene_id",
    "seed",
    "N",
    "T_fusion",
    "T_scan",
    "T_tsp",
    "total_two_flight",
    "savings_pct",
)
DEFAULT_N = (4, 8, 12, 16, 20, 24)
DEFAULT_SEED_COUNT = 10


@dataclass(frozen=True)
class ComparisonRow:
    scene_id: str
    seed: int
    n: int
    t_fusion: float
    t_scan: float
    t_tsp: float
    total_two_flight: float

    @property
    def savings(self) -> float:
        return (self.total_two_flight - self.t_fusion) / self.total_two_flight

    @property
    def savings_pct(self) -> float:
        return 100.0 * self.savings

    def row(self) -> list[str]:
        values = (self.t_fusion, self.t_scan, self.t_tsp, self.total_two_flight, self.savings_pct)
        return [self.scene_id, str(self.seed), str(self.n), *(repr(v) for v in values)]


def compare_cell(
    n: int,
    seed: int,
    config: MissionConfig,
    kind: TowerKind | str = TowerKind.A,
    base: SceneConfig | None = None,
) -> ComparisonRow:
    """Fly both strategies on the same scene for ``n`` inspection waypoints."""
    k = insulators_for(n, config.per_insulator)
    scene = standard_scene(seed, k, kind, base)
    log = run_mission(scene, config)
    if log.failed:
        raise PlanningFailure(f"Mission failed for N={n}, seed={seed}: {log.failure_reason}")
    two = two_flight_duration(scene, n, config.limits, config)
    logger.debug(f"N={n} seed={seed}: T_fusion={log.total_duration:.1f} two-flight={two.total:.1f}")
    scene_id = f"{scene.tower.kind.value}{k}-s{seed}"
    return ComparisonRow(scene_id, seed, n, log.total_duration, two.t_scan, two.t_tsp, two.total)


async def _run_cells(
    n_values: tuple[int, ...],
    seeds: list[int],
    config: MissionConfig,
    kind: TowerKind | str,
    base: SceneConfig | None,
) -> list[ComparisonRow]:
    return await asyncio.gather(
        *(
            asyncio.to_thread(compare_cell, n, seed, config, kind, base)
            for n in n_values
            for seed in seeds
        )
    )


def run_comparison(
    n_values: tuple[int, ...],
    seeds: list[int],
    config: MissionConfig | None = None,
    kind: TowerKind | str = TowerKind.A,
    base: SceneConfig | None = None,
) -> list[ComparisonRow]:
    """Paired cells for every N and seed on subsets of ``base`` or the ``kind`` default tower."""
    config = config or MissionConfig()
    if not seeds or not n_values or min(n_values) < 1:
        raise InvalidParameters("Need at least one seed and positive N values.")
    capacity = max_waypoints(base or default_scene(kind), config.per_insulator)
    if max(n_values) > capacity:
        raise InvalidParameters(f"The tower offers at most {capacity} inspection waypoints.")
    rows = asyncio.run(_run_cells(tuple(sorted(set(n_values))), seeds, config, kind, base))
    return sorted(rows, key=lambda r: (r.n, r.seed))


def default_n_values(capacity: int) -> tuple[int, ...]:
    return tuple(n for n in DEFAULT_N if n <= capacity) or (capacity,)


def savings_trend(rows: list[ComparisonRow]) -> tuple[float, float]:
    """Spearman correlation (rho, p-value) of the savings ratio against N."""
    if len({r.n for r in rows}) < 2:
        return float("nan"), float("nan")
    rho, p_value = stats.spearmanr([r.n for r in rows], [r.savings for r in rows])
    return float(rho), float(p_value)


def write_comparison_csv(rows: list[ComparisonRow], path: str | Path) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with target.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(COMPARE_COLUMNS)
        for row in rows:
            writer.writerow(row.row())
    return target


def display_comparison(rows: list[ComparisonRow]) -> None:
    table = Table(show_header=True, header_style="bold", title="Inspection duration [s]")
    table.add_column("N", justify="right")
    table.add_column("T_fusion", justify="right")
    table.add_column("T_scan + T_tsp", justify="right")
    table.add_column("savings", justify="right")
    for n in sorted({r.n for r in rows}):
        cell = [r for r in rows if r.n == n]
        fusion = sum(r.t_fusion for r in cell) / len(cell)
        total = sum(r.total_two_flight for r in cell) / len(cell)
        savings = sum(r.savings_pct for r in cell) / len(cell)
        table.add_row(str(n), f"{fusion:.1f}", f"{total:.1f}", f"{savings:.1f} %")
    print(table)


@click.command("compare")
@click.option("--verbose", "-v", is_flag=True, help="Print all the output.")
@click.option(
    "--tower",
    type=click.Choice([k.value for k in TowerKind]),
    default="A",
    show_default=True,
    help="Tower type when no scene file is given.",
)
@click.option(
    "--config",
    "config_path",
    type=click.Path(exists=True, dir_okay=False),
    help="Scene JSON file whose tower is subset for every cell.",
)
@click.option("--n", "n_values", type=click.IntRange(min=1), multiple=True, help="Inspection waypoint count(s).")
@click.option(
    "--seeds",
    type=click.IntRange(min=1),
    default=DEFAULT_SEED_COUNT,
    show_default=True,
    help="Number of seeded scenes per N.",
)
@click.option("--seed", type=int, help="First seed (default: TOWER_INSP_SEED or 7).")
@click.option(
    "--mission-config",
    "mission_config_path",
    type=click.Path(exists=True, dir_okay=False),
    help="JSON file overriding mission parameters.",
)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), help="Output directory.")
def compare_command(
    verbose: bool,
    tower: str,
    config_path: str | None,
    n_values: tuple[int, ...],
    seeds: int,
    seed: int | None,
    mission_config_path: str | None,
    out_dir: str | None,
) -> None:
    """Compare the online single flight with scan-then-TSP over N inspection waypoints."""
    configure_logging(verbose)
    env = load_env_config()
    first = env.seed if seed is None else seed
    try:
        base = load_scene(config_path) if config_path else None
        config = load_mission_config(mission_config_path) if mission_config_path else MissionConfig()
        if not n_values:
            n_values = default_n_values(max_waypoints(base or default_scene(tower), config.per_insulator))
        seed_list = [first + i for i in range(seeds)]
        rows = run_comparison(n_values, seed_list, config, tower, base)
    except InspectionError as e:
        raise click.ClickException(str(e)) from e

    display_comparison(rows)
    rho, p_value = savings_trend(rows)
    print(f"Savings vs N: Spearman rho = {rho:.3f} (p = {p_value:.3g})")
    target = write_comparison_csv(rows, Path(out_dir or env.out_dir) / "compare.csv")
    print(f"Wrote {target}")
