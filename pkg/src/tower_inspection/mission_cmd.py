from dataclasses import replace
from pathlib import Path

import click
from rich import print
from rich.panel import Panel

from .common import configure_logging, load_env_config
from .errors import InspectionError
from .mission import MissionConfig, MissionLog, load_mission_config, run_mission
from .scene import TowerKind, default_scene, load_scene


def summarize(log: MissionLog) -> str:
    inspected = sum(1 for entry in log.registry if entry.inspected)
    lines = [
        f"Duration: [bold]{log.total_duration:.1f} s[/bold]",
        f"Insulators registered: {len(log.registry)} ({inspected} inspected)",
        f"Captures: {len(log.captures)}",
    ]
    if log.failed:
        lines.append(f"[red]Failed: {log.failure_reason}[/red]")
    return "\n".join(lines)


@click.command("mission-sim")
@click.option("--verbose", "-v", is_flag=True, help="Print all the output.")
@click.option(
    "--tower",
    type=click.Choice([k.value for k in TowerKind]),
    default="A",
    show_default=True,
    help="Tower type when no scene file is given.",
)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="Scene JSON file.")
@click.option(
    "--mission-config",
    "mission_config_path",
    type=click.Path(exists=True, dir_okay=False),
    help="JSON file overriding mission parameters.",
)
@click.option("--seed", type=int, help="Random seed (default: TOWER_INSP_SEED or 7).")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), help="Output directory.")
def mission_command(
    verbose: bool,
    tower: str,
    config_path: str | None,
    mission_config_path: str | None,
    seed: int | None,
    out_dir: str | None,
) -> None:
    """Fly the online single-flight inspection and write its log and flight path."""
    configure_logging(verbose)
    env = load_env_config()
    config_path = config_path or env.scene_config
    try:
        if config_path:
            scene = load_scene(config_path)
            if seed is not None:
                scene = replace(scene, seed=seed)
        else:
            scene = default_scene(tower, env.seed if seed is None else seed)
        mission_cfg = load_mission_config(mission_config_path) if mission_config_path else MissionConfig()
        log = run_mission(scene, mission_cfg)
    except InspectionError as e:
        raise click.ClickException(str(e)) from e

    out = Path(out_dir or env.out_dir)
    log_path = log.write_json(out / "mission_log.json")
    path_path = log.write_csv(out / "flight_path.csv")
    print(Panel(summarize(log), title="Mission", expand=False))
    print(f"Wrote {log_path} and {path_path}")
    if log.failed:
        raise click.ClickException(f"Mission aborted: {log.failure_reason}")
