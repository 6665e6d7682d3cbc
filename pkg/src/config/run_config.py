"""
Run-config files.

    # comment
    iterations = 1500
    sampler.exponent = 0.5
    sampler.allow_multi_class = false
    data.pool = artifacts/s1/train.strk
    seeds = 1, 2, 3

Dotted keys build nested sections. Values parse as bool, int, float or
string; a comma-separated value becomes a list. Validation is done by the
pydantic model the file is loaded into, so unknown keys are errors.
"""
import logging
from pathlib import Path
from typing import Any, Dict, Mapping, Type, TypeVar, Union

from pydantic import BaseModel, ValidationError

logger = logging.getLogger(__name__)

ModelT = TypeVar("ModelT", bound=BaseModel)


class ConfigError(ValueError):
    pass


def parse_value(raw: str) -> Any:
    text = raw.strip()
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        return text[1:-1]
    if "," in text:
        return [parse_value(part) for part in text.split(",") if part.strip()]
    lowered = text.lower()
    if lowered in ("true", "yes", "on"):
        return True
    if lowered in ("false", "no", "off"):
        return False
    if lowered in ("none", "null"):
        return None
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def _strip_comment(line: str) -> str:
    if line.lstrip().startswith("#"):
        return ""
    cut = line.find(" #")
    return line if cut < 0 else line[:cut]


def set_dotted(values: Dict[str, Any], key: str, value: Any) -> None:
    parts = key.split(".")
    if any(not p for p in parts):
        raise ConfigError(f"Malformed key {key!r}")
    node = values
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(f"Key {key!r} nests under scalar {part!r}")
        node = child
    if isinstance(node.get(parts[-1]), dict):
        raise ConfigError(f"Key {key!r} would overwrite a section")
    node[parts[-1]] = value


def parse_run_config(text: str) -> Dict[str, Any]:
    values: Dict[str, Any] = {}
    seen = set()
    for number, line in enumerate(text.splitlines(), start=1):
        line = _strip_comment(line).strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"Line {number}: expected 'key = value', got {line!r}")
        key, raw = line.split("=", 1)
        key = key.strip()
        if key in seen:
            raise ConfigError(f"Line {number}: duplicate key {key!r}")
        seen.add(key)
        set_dotted(values, key, parse_value(raw))
    return values


def _error_key(error: dict) -> str:
    return ".".join(str(part) for part in error.get("loc", ()))


def build_config(values: Mapping[str, Any], model_cls: Type[ModelT]) -> ModelT:
    try:
        return model_cls.model_validate(dict(values))
    except ValidationError as e:
        first = e.errors()[0]
        key = _error_key(first)
        if first.get("type") == "extra_forbidden":
            raise ConfigError(f"Unknown config key {key!r}") from e
        raise ConfigError(f"Invalid value for {key!r}: {first.get('msg')}") from e


def load_config(path: Union[str, Path], model_cls: Type[ModelT], overrides: Mapping[str, Any] = None) -> ModelT:
    """Parse `path` and validate it into `model_cls`; `overrides` are dotted keys applied last."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found at: {path}")
    try:
        values = parse_run_config(path.read_text(encoding="utf-8"))
        for key, value in (overrides or {}).items():
            set_dotted(values, key, value)
        config = build_config(values, model_cls)
    except ConfigError as e:
        logger.error(f"Failed to load config {path}: {str(e)}")
        raise
    logger.info(f"Loaded {model_cls.__name__} from {path}")
    return config
