"""Configuration resolution: defaults, environment, JSON file, then CLI flags."""

import json
from pathlib import Path
from typing import Any, Dict, Optional

from dotenv import find_dotenv, load_dotenv

from .defaults import ExperimentDefaults
from .errors import ConfigError
from .models import ArchitectureKind, ExperimentConfig


def load_environment() -> None:
    """Load .env from the working directory into the environment (existing variables win)."""
    load_dotenv(find_dotenv(usecwd=True), override=False)


def env_defaults() -> ExperimentConfig:
    """Dataclass defaults with the environment applied (FEDBENCH_SEED)."""
    return ExperimentConfig(master_seed=ExperimentDefaults.master_seed())


def load_config_file(path) -> Dict[str, Any]:
    """
    Read a JSON config file.

    Args:
        path: Path of the file

    Returns:
        Parsed top-level object

    Raises:
        ConfigError: Missing file, invalid JSON or a non-object top level
    """
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e.msg} at line {e.lineno})")
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}")
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return data


def resolve_config(
    config_path: Optional[str] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> ExperimentConfig:
    """
    Resolve the experiment configuration.

    Precedence, lowest first: dataclass defaults, environment, config file,
    flag overrides. Overrides with a ``None`` value are treated as unset.

    Args:
        config_path: Optional JSON config file
        overrides: Values given on the command line

    Returns:
        Validated configuration

    Raises:
        ConfigError: Listing every problem found
    """
    config = env_defaults()
    if config_path:
        config = ExperimentConfig.from_dict(load_config_file(config_path), base=config)
    flags = {k: v for k, v in (overrides or {}).items() if v is not None}
    if flags:
        config = ExperimentConfig.from_dict(flags, base=config)
    return config.check()


def data_dir(flag: Optional[str] = None) -> Path:
    return Path(flag or ExperimentDefaults.data_dir())


def out_dir(flag: Optional[str] = None) -> Path:
    return Path(flag or ExperimentDefaults.out_dir())


def config_schema() -> Dict[str, Any]:
    """JSON schema of the config file accepted by ``--config``."""
    integer = {"type": "integer"}
    return {
        "$schema": "http://json-schema.org/draft-07/schema#",
        "title": "fedbench experiment configuration",
        "type": "object",
        "additionalProperties": False,
        "properties": {
            "arch": {"type": "string", "enum": [k.value for k in ArchitectureKind]},
            "n_participants": {**integer, "minimum": 1},
            "rounds": {**integer, "minimum": 0, "default": ExperimentDefaults.ROUNDS},
            "epochs_per_round": {**integer, "minimum": 0, "default": ExperimentDefaults.EPOCHS_PER_ROUND},
            "master_seed": {**integer, "minimum": 0, "maximum": (1 << 64) - 1, "default": ExperimentDefaults.MASTER_SEED},
            "learning_rate": {"type": "number", "minimum": 0, "default": ExperimentDefaults.LEARNING_RATE},
            "batch_size": {**integer, "minimum": 1, "default": ExperimentDefaults.BATCH_SIZE},
            "layer_dims": {
                "type": "array",
                "items": {**integer, "minimum": 1},
                "minItems": 2,
                "default": list(ExperimentDefaults.LAYER_DIMS),
            },
            "latency": {
                "type": "string",
                "pattern": "^(zero|fixed:[0-9]+|uniform:[0-9]+:[0-9]+)$",
                "default": "zero",
            },
            "round_deadline": {"type": ["integer", "null"], "minimum": 0, "default": None},
            "weighting": {"type": "string", "enum": ["uniform", "samples"], "default": ExperimentDefaults.WEIGHTING},
            "dfl_topology": {"type": "string", "enum": ["full", "ring"], "default": ExperimentDefaults.DFL_TOPOLOGY},
            "workers": {**integer, "minimum": 1, "default": ExperimentDefaults.WORKERS},
            "convergence_threshold": {
                "type": "number",
                "exclusiveMinimum": 0,
                "exclusiveMaximum": 1,
                "default": ExperimentDefaults.CONVERGENCE_THRESHOLD,
            },
            "record_process_time": {"type": "boolean", "default": False},
        },
    }
