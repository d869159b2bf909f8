import logging
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Type, TypeVar

import yaml
from pydantic import BaseModel

from ..config import config
from ..core.errors import ConfigurationError

logger = logging.getLogger(__name__)

RunModel = TypeVar("RunModel", bound=BaseModel)

RESOLVED_CONFIG_FILE = "resolved_config.yml"

DEFAULT_PRESETS: Dict[str, Any] = {
    "upcycle": {
        "default": {"layer_strategy": "every-other", "num_experts": 8, "router": "expert_choice", "capacity_factor": 2.0},
    },
    "grids": {
        "capacity": [
            {"capacity_factor": c, "num_experts": 8} for c in (1.0, 2.0, 4.0, 8.0)
        ],
    },
}


def load_yaml_file(path: str) -> Dict[str, Any]:
    """YAML mapping from ``path``; anything else is a configuration error."""
    config_path = Path(path)
    if not config_path.exists():
        raise ConfigurationError(f"config file {path} does not exist")
    try:
        with open(config_path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise ConfigurationError(f"config file {path} is not valid YAML: {e}") from e
    if not isinstance(data, dict):
        raise ConfigurationError(f"config file {path} must hold a key-value mapping")
    return data


def load_presets(path: Optional[str] = None) -> Dict[str, Any]:
    """Named ablation presets from presets.yml."""
    try:
        presets_path = Path(path or config.PRESETS_FILE)
        if presets_path.exists():
            with open(presets_path, "r", encoding="utf-8") as f:
                return yaml.safe_load(f) or {}
    except Exception as e:
        logger.warning(f"Failed to load presets: {e}")

    logger.warning("Presets file not found, using built-in defaults")
    return DEFAULT_PRESETS


def set_path(target: Dict[str, Any], dotted: str, value: Any) -> None:
    """``set_path(d, "train.schedule.peak_lr", 0.1)`` creates nested mappings as needed."""
    keys = dotted.split(".")
    node = target
    for key in keys[:-1]:
        child = node.get(key)
        if child is None:
            child = node[key] = {}
        elif not isinstance(child, dict):
            raise ConfigurationError(f"cannot set {dotted}: '{key}' is not a mapping")
        node = child
    node[keys[-1]] = value


def merge(base: Dict[str, Any], overlay: Mapping[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in overlay.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), dict):
            merged[key] = merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def resolve(model: Type[RunModel], file_path: Optional[str], overrides: Mapping[str, Any], base: Optional[Mapping[str, Any]] = None) -> RunModel:
    """``base`` (presets), then the file, then non-None flag overrides keyed by dotted path."""
    values: Dict[str, Any] = dict(base or {})
    if file_path:
        values = merge(values, load_yaml_file(file_path))
    for dotted, value in overrides.items():
        if value is not None:
            set_path(values, dotted, value)
    return model.model_validate(values)


def write_resolved(run_dir: Path, subcommand: str, resolved: BaseModel) -> Path:
    """Write ``resolved_config.yml``; the file replays the run with ``--config``."""
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / RESOLVED_CONFIG_FILE
    payload = resolved.model_dump(mode="json")
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"# {subcommand}\n")
        yaml.safe_dump(payload, f, sort_keys=True)
    return path
