import click

from .scene_cmd import scene_command


@click.group()
def main() -> None:
    """Simulated power-tower insulator inspection: scenes, localization, missions."""


main.add_command(scene_command, "scene-gen")


def _register_subcommands() -> None:
    """Register subcommands that pull in the heavier simulation modules."""
    from .bench_cmd import bench_command
    from .compare_cmd import compare_command
    from .mission_cmd import mission_command

    main.add_command(bench_command, "localize-bench")
    main.add_command(mission_command, "mission-sim")
    main.add_command(compare_command, "compare")


_register_subcommands()
