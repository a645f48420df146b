from pathlib import Path

import click
from loguru import logger
from rich import print

from .common import configure_logging, load_env_config
from .errors import InspectionError
from .scene import TowerKind, default_scene, save_scene


@click.command("scene-gen")
@click.option("--verbose", "-v", is_flag=True, help="Print all the output.")
@click.option(
    "--tower", type=click.Choice([k.value for k in TowerKind]), required=True, help="Tower type."
)
@click.option("--seed", type=int, help="Random seed (default: TOWER_INSP_SEED or 7).")
@click.option("--height", type=float, default=25.0, show_default=True, help="Tower height [m].")
@click.option("--width", type=float, default=10.0, show_default=True, help="Tower width [m].")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), help="Output directory.")
def scene_command(
    verbose: bool, tower: str, seed: int | None, height: float, width: float, out_dir: str | None
) -> None:
    """Write a scene JSON file with one tower, its insulators and two neighbor towers."""
    configure_logging(verbose)
    env = load_env_config()
    seed = env.seed if seed is None else seed
    try:
        scene = default_scene(tower, seed, height=height, width=width)
    except InspectionError as e:
        raise click.ClickException(str(e)) from e

    target = save_scene(scene, Path(out_dir or env.out_dir) / f"scene_{tower}_{seed}.json")
    logger.debug(f"{len(scene.primitives)} collision primitives")
    print(f"Wrote {target} with [bold]{len(scene.insulators)}[/bold] insulators.")
