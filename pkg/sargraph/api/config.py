"""
Flat key=value configuration files.

    # comments and blank lines are ignored
    graph = data/graph.txt
    epochs = 20
    layer.0.type = sage
    layer.0.in_dim = 16
    layer.0.out_dim = 32

Layer keys are layer.<i>.<field> with i counting from 0. Comma-separated
values become lists.
"""
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union
import logging

from pydantic import ValidationError

from ..core.errors import InputError
from .models import TrainConfig

logger = logging.getLogger(__name__)

LIST_KEYS = {"bench_modes"}


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, Any]:
    values: Dict[str, Any] = {}
    layers: Dict[int, Dict[str, str]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith('#'):
            continue
        if '=' not in line:
            raise InputError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split('=', 1))
        if key.startswith("layer."):
            parts = key.split('.')
            if len(parts) != 3 or not parts[1].isdigit():
                raise InputError(f"{source}:{lineno}: layer keys look like layer.<i>.<field>, got {key!r}")
            layer = layers.setdefault(int(parts[1]), {})
            if parts[2] in layer:
                raise InputError(f"{source}:{lineno}: {key} given twice")
            layer[parts[2]] = value
            continue
        if key in values:
            raise InputError(f"{source}:{lineno}: {key} given twice")
        values[key] = [v.strip() for v in value.split(',') if v.strip()] if key in LIST_KEYS else value

    if layers:
        if sorted(layers) != list(range(len(layers))):
            raise InputError(f"{source}: layer indices must run 0..{len(layers) - 1}, got {sorted(layers)}")
        values["layers"] = [layers[i] for i in range(len(layers))]
    return values


def build_config(values: Mapping[str, Any], source: str = "<config>") -> TrainConfig:
    try:
        return TrainConfig(**values)
    except ValidationError as e:
        raise InputError(f"invalid configuration in {source}: {e}") from e


def load_config(path: Union[str, Path], overrides: Optional[Mapping[str, Any]] = None) -> TrainConfig:
    """Read a config file; non-None overrides (CLI flags) replace file values"""
    try:
        text = Path(path).read_text(encoding='utf-8')
    except OSError as e:
        raise InputError(f"Cannot read config {path}: {e}") from e
    values = parse_config_text(text, str(path))
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    config = build_config(values, str(path))
    logger.info(f"Loaded config {path}: {len(config.layers)} layers, {config.epochs} epochs")
    return config
