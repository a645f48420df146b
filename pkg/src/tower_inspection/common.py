import os
import sys
import zlib
from dataclasses import dataclass

import numpy as np
from dotenv import dotenv_values
from loguru import logger

DEFAULT_SEED = 7
DEFAULT_OUT = "out"


def configure_logging(verbose: bool) -> None:
    """Configure loguru: silent by default, compact format with --verbose."""
    logger.remove()
    if verbose:
        logger.add(sys.stderr, level="DEBUG", format="  {message}")


def _load_dotenv_values(filename: str = ".env") -> dict[str, str]:
    """Read key/value pairs from ``filename`` without mutating the process environment."""
    values = dotenv_values(filename)
    return {key: value for key, value in values.items() if value is not None}


@dataclass(frozen=True)
class EnvConfig:
    seed: int
    out_dir: str
    scene_config: str | None


def load_env_config(filename: str = ".env") -> EnvConfig:
    """Return TOWER_INSP_* defaults with explicit environment variables taking precedence."""
    env_values = _load_dotenv_values(filename)

    def lookup(key: str) -> str:
        return os.environ.get(key, env_values.get(key, "")).strip()

    raw_seed = lookup("TOWER_INSP_SEED")
    try:
        seed = int(raw_seed) if raw_seed else DEFAULT_SEED
    except ValueError:
        logger.warning(f"Ignoring non-integer TOWER_INSP_SEED={raw_seed!r}.")
        seed = DEFAULT_SEED
    return EnvConfig(
        seed=seed,
        out_dir=lookup("TOWER_INSP_OUT") or DEFAULT_OUT,
        scene_config=lookup("TOWER_INSP_CONFIG") or None,
    )


def stream_key(stream: str) -> int:
    return zlib.crc32(stream.encode("utf-8"))


def make_rng(seed: int, stream: str, *keys: int) -> np.random.Generator:
    """Return an independent counter-based generator for a named sub-stream of ``seed``.

    The same (seed, stream, keys) triple yields the same draws on every platform.
    """
    sequence = np.random.SeedSequence(
        entropy=seed & 0xFFFFFFFFFFFFFFFF,
        spawn_key=(stream_key(stream), *(int(k) & 0xFFFFFFFF for k in keys)),
    )
    return np.random.Generator(np.random.Philox(sequence))
