"""Run configuration: section dataclasses, the flat `section.key = value` format, a JSON mirror and presets.

    # comments start with '#'
    seed = 7
    train.iterations = 2000
    densify.gradient_source = SSIM_ONLY
    mesh.depth_truncation = none
"""

import dataclasses
import enum
import json
import logging
import math
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

from . import utils
from .compression import CompressConfig
from .density import DensifyConfig
from .evaluation import EvalConfig
from .meshing import MeshConfig
from .objective import LossWeights
from .pipeline import BlockConfig
from .rasterizer import RenderOptions
from .training import TrainConfig, TrimConfig


logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

SECTIONS = {
    "train": TrainConfig,
    "loss": LossWeights,
    "densify": DensifyConfig,
    "trim": TrimConfig,
    "blocks": BlockConfig,
    "compress": CompressConfig,
    "mesh": MeshConfig,
    "eval": EvalConfig,
    "render": RenderOptions,
}
TOP_LEVEL = {"seed": int, "threads": int}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}
_NONE = {"none", "null", ""}


@dataclass(frozen=True)
class RunConfig:
    """Every tunable of a run, grouped by stage"""

    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    trim: TrimConfig = field(default_factory=TrimConfig)
    blocks: BlockConfig = field(default_factory=BlockConfig)
    compress: CompressConfig = field(default_factory=CompressConfig)
    mesh: MeshConfig = field(default_factory=MeshConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    render: RenderOptions = field(default_factory=RenderOptions)
    seed: int = 0
    threads: int = 1

    def validate(self) -> "RunConfig":
        """Checks every section

        Raises:
            utils.ConfigError: a value is out of range
        """

        for name in SECTIONS:
            getattr(self, name).validate(name)
        if self.seed < 0:
            raise utils.ConfigError("seed", f"must be >= 0, got {self.seed}")
        if self.threads < 1:
            raise utils.ConfigError("threads", f"must be >= 1, got {self.threads}")
        return self

    def with_values(self, values: Mapping[str, Any]) -> "RunConfig":
        """Returns a copy with dotted keys (`section.key` or a top-level key) replaced and type-coerced

        Raises:
            utils.ConfigError: a key is unknown or a value can't be coerced
        """

        sections: Dict[str, Dict[str, Any]] = {}
        top: Dict[str, Any] = {}
        for key, value in values.items():
            if "." in key:
                section, name = key.split(".", 1)
                if section not in SECTIONS:
                    raise utils.ConfigError(key, f"unknown section '{section}'")
                hints = typing.get_type_hints(SECTIONS[section])
                if name not in {f.name for f in dataclasses.fields(SECTIONS[section])}:
                    raise utils.ConfigError(key, "unknown key")
                sections.setdefault(section, {})[name] = coerce(key, value, hints[name])
            elif key in TOP_LEVEL:
                top[key] = coerce(key, value, TOP_LEVEL[key])
            else:
                raise utils.ConfigError(key, "unknown key")
        changes = {name: dataclasses.replace(getattr(self, name), **kw) for name, kw in sections.items()}
        return dataclasses.replace(self, **changes, **top)

    def to_flat(self) -> Dict[str, Any]:
        flat: Dict[str, Any] = {key: getattr(self, key) for key in TOP_LEVEL}
        for name in SECTIONS:
            for f in dataclasses.fields(getattr(self, name)):
                value = getattr(getattr(self, name), f.name)
                flat[f"{name}.{f.name}"] = value.value if isinstance(value, enum.Enum) else value
        return flat

    def dumps(self) -> str:
        """Flat text form; parsing it gives back an equal config"""
        lines = []
        for key, value in self.to_flat().items():
            lines.append(f"{key} = {format_value(value)}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        nested: Dict[str, Any] = {key: getattr(self, key) for key in TOP_LEVEL}
        for key, value in self.to_flat().items():
            if "." in key:
                section, name = key.split(".", 1)
                if isinstance(value, float) and math.isinf(value):
                    value = repr(value)
                nested.setdefault(section, {})[name] = value
        return json.dumps(nested, indent=1, sort_keys=True)


def format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def coerce(key: str, value: Any, kind: Any) -> Any:
    """Converts a raw config value to the annotated type

    Raises:
        utils.ConfigError: the value doesn't fit the type
    """

    origin = typing.get_origin(kind)
    if origin is Union:
        options = [a for a in typing.get_args(kind) if a is not type(None)]
        if value is None or (isinstance(value, str) and value.strip().lower() in _NONE):
            return None
        return coerce(key, value, options[0])
    text = value.strip() if isinstance(value, str) else value
    try:
        if kind is bool:
            if isinstance(text, bool):
                return text
            if str(text).lower() in _TRUE:
                return True
            if str(text).lower() in _FALSE:
                return False
            raise ValueError(f"expected a boolean, got {value!r}")
        if kind is int:
            if isinstance(text, bool) or (isinstance(text, float) and not text.is_integer()):
                raise ValueError(f"expected an integer, got {value!r}")
            return int(text)
        if kind is float:
            if isinstance(text, bool):
                raise ValueError(f"expected a number, got {value!r}")
            return float(text)
        if isinstance(kind, type) and issubclass(kind, enum.Enum):
            return kind(str(text).upper())
        if kind is str:
            return str(text)
    except (TypeError, ValueError) as e:
        raise utils.ConfigError(key, str(e)) from e
    raise utils.ConfigError(key, f"unsupported type {kind}")


def parse_flat(text: str, source: str = "<config>") -> Dict[str, str]:
    """Reads `key = value` lines

    Raises:
        utils.ConfigError: a line has no '=' or a key repeats
    """

    values: Dict[str, str] = {}
    for number, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise utils.ConfigError(f"{source}:{number}", f"expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in values:
            raise utils.ConfigError(key, f"repeated at {source}:{number}")
        values[key] = value
    return values


def flatten_json(data: Mapping[str, Any]) -> Dict[str, Any]:
    values: Dict[str, Any] = {}
    for key, value in data.items():
        if isinstance(value, Mapping):
            for name, inner in value.items():
                values[f"{key}.{name}"] = inner
        else:
            values[key] = value
    return values


PRESETS: Dict[str, Dict[str, Any]] = {
    "town": {},
    "street": {"train.position_lr": 8e-5, "densify.densify_interval": 200},
}


def preset(name: str) -> RunConfig:
    """Returns a named preset

    Raises:
        utils.ConfigError: the name is unknown
    """

    if name not in PRESETS:
        raise utils.ConfigError("preset", f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return RunConfig().with_values(PRESETS[name]).validate()


def load_config(
    path: Optional[PathLike] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    environ: Optional[Mapping[str, str]] = None,
) -> RunConfig:
    """Builds a validated config from a preset name or file, then environment overrides, then explicit overrides.

    Files ending in .json use the nested JSON mirror; anything else is read as flat text. A file may name a base
    preset with a `preset = street` line.

    Raises:
        utils.ConfigError: a value is invalid
        utils.MissingArtifactError: the file doesn't exist
    """

    config = RunConfig()
    if path is not None:
        if str(path) in PRESETS:
            config = preset(str(path))
        else:
            path = Path(path)
            if not path.exists():
                raise utils.MissingArtifactError(path)
            if path.suffix.lower() == ".json":
                try:
                    values = flatten_json(json.loads(path.read_text()))
                except json.JSONDecodeError as e:
                    raise utils.ConfigError(str(path), f"invalid JSON: {e}") from e
            else:
                values = parse_flat(path.read_text(), str(path))
            base = values.pop("preset", None)
            if base is not None:
                config = preset(str(base))
            config = config.with_values(values)

    environ = os.environ if environ is None else environ
    env_values = {}
    if environ.get("SCV2_THREADS"):
        env_values["threads"] = environ["SCV2_THREADS"]
    if environ.get("SCV2_SEED"):
        env_values["seed"] = environ["SCV2_SEED"]
    config = config.with_values(env_values)
    if overrides:
        config = config.with_values({k: v for k, v in overrides.items() if v is not None})
    logger.debug("Loaded config from %s", path or "defaults")
    return config.validate()
