"""
Runtime configuration from environment variables, plus key=value config files.

The entry point loads `.env` with python-dotenv (development only) before this
module is imported, so env vars are visible here. Malformed numeric values fall
back to their defaults instead of failing at import.

Command configs (TrainConfig, SynthConfig, ...) are pydantic models defined
next to the code that consumes them; this module only reads their flat
key=value files and merges them with CLI overrides (flags > file > defaults).
"""
import os
from pathlib import Path
from typing import Any, TypeVar

from pydantic import BaseModel

from looptrack.errors import ConfigFileError


def _int_env(key: str, default: int, minimum: int = 0) -> int:
    try:
        return max(minimum, int(os.getenv(key, str(default))))
    except ValueError:
        return default


def _bool_env(key: str, default: bool) -> bool:
    raw = os.getenv(key)
    if raw is None:
        return default
    return raw.strip().lower() in ("1", "true", "yes")


# Environment: development | production (development loads .env)
ENV = os.getenv("LOOPTRACK_ENV", "development").lower()

LOG_LEVEL = os.getenv("LOOPTRACK_LOG_LEVEL", "INFO").upper()

# 0 keeps torch's own default thread count
NUM_THREADS = _int_env("LOOPTRACK_NUM_THREADS", 0)

# Training output: checkpoint cadence and file names inside the run directory
CHECKPOINT_EVERY = _int_env("LOOPTRACK_CHECKPOINT_EVERY", 100, minimum=1)
CHECKPOINT_NAME = os.getenv("LOOPTRACK_CHECKPOINT_NAME", "checkpoint.pt")
METRICS_FILE = os.getenv("LOOPTRACK_METRICS_FILE", "metrics.jsonl")

# Attempts before giving up when sampled sequences are shorter than the cycle
MAX_RESAMPLE = _int_env("LOOPTRACK_MAX_RESAMPLE", 100, minimum=1)

# Render progress bars on long loops (off in production/CI logs)
SHOW_PROGRESS = _bool_env("LOOPTRACK_PROGRESS", ENV == "development")


# --- Config files ---

ModelT = TypeVar("ModelT", bound=BaseModel)


def read_config_file(path: str | Path) -> dict[str, str]:
    """
    Parse a flat key=value file. Blank lines and lines starting with '#' are
    skipped; anything else without '=' or with an empty key raises
    ConfigFileError naming the file and line.
    """
    values: dict[str, str] = {}
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigFileError(str(path), 0, f"cannot read config file: {e}") from e
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigFileError(str(path), line_no, f"expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip().replace("-", "_")
        if not key:
            raise ConfigFileError(str(path), line_no, "empty key")
        if key in values:
            raise ConfigFileError(str(path), line_no, f"duplicate key {key!r}")
        values[key] = value.strip()
    return values


def write_config_file(path: str | Path, settings: BaseModel) -> None:
    """
    Write a model as key=value lines; lists and tuples become comma-separated.
    Unset optional values are written as "none".
    """
    lines = []
    for key, value in settings.model_dump().items():
        if value is None:
            value = "none"
        elif isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key}={value}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def merge_settings(
    model: type[ModelT],
    config_path: str | Path | None = None,
    overrides: dict[str, Any] | None = None,
) -> ModelT:
    """
    Build `model` from defaults, then the config file, then overrides.
    Overrides whose value is None are treated as "not given"; a file value
    of "none" sets an optional field to None.
    """
    values: dict[str, Any] = {}
    if config_path is not None:
        for key, value in read_config_file(config_path).items():
            values[key] = None if value.lower() == "none" else value
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    return model.model_validate(values)


def split_list(value: Any) -> Any:
    """Pydantic before-validator helper: "1,2,3" -> ["1", "2", "3"]."""
    if isinstance(value, str):
        parts = [p.strip() for p in value.split(",")]
        return [p for p in parts if p]
    return value
