##############################################################################
# config.py
# key = value run configuration files
##############################################################################
"""
Run configuration: one flat namespace of ``key = value`` lines covering the
model, the optimizer and the data paths. ``#`` starts a comment.

A file may begin from a preset with ``preset = toy|desk|paper``; later keys
override the preset's values. Unknown keys are rejected.
"""
import configparser
import dataclasses
import logging
import os
from typing import Dict, Iterable, List, Mapping, Optional, Tuple, Union

from bimamba._exceptions import ConfigError
from bimamba.model import PRESETS, ModelConfig
from bimamba.train import TrainConfig

__all__ = [
    "RunConfig",
    "PATH_KEYS",
    "parse_text",
    "parse_overrides",
    "resolve",
    "load_config",
    "describe_keys",
]

logger = logging.getLogger(__name__)

_SECTION = "run"
PRESET_KEY = "preset"
PATH_KEYS = ("data_dir", "out_dir")

_TRUE = ("1", "true", "yes", "on")
_FALSE = ("0", "false", "no", "off")


@dataclasses.dataclass
class RunConfig:
    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    data_dir: str = ""
    out_dir: str = ""

    def to_items(self) -> List[Tuple[str, str]]:
        items = list(self.model.to_items())
        items += [
            (f.name, _format(getattr(self.train, f.name)))
            for f in dataclasses.fields(self.train)
        ]
        items += [(key, getattr(self, key)) for key in PATH_KEYS]
        return items

    def dump(self) -> str:
        """Serializes every key; `resolve` of the output is identical."""
        return "".join(f"{key} = {value}\n" for key, value in self.to_items())


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _model_keys() -> List[str]:
    return ModelConfig.field_names()


def _train_fields() -> Dict[str, dataclasses.Field]:
    return {f.name: f for f in dataclasses.fields(TrainConfig)}


def _coerce_train(key: str, raw: str, kind) -> Union[int, float, bool]:
    raw = raw.strip()
    try:
        if kind in (bool, "bool"):
            lowered = raw.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(raw)
        if kind in (int, "int"):
            return int(raw)
        return float(raw)
    except ValueError:
        type_name = getattr(kind, "__name__", kind)
        raise ConfigError(
            f"{key} expects a value of type {type_name}, got {raw!r}"
        ) from None


def parse_text(text: str, source: str = "<config>") -> Dict[str, str]:
    """
    Parses ``key = value`` lines into a mapping of raw strings.

    Raises:
        ConfigError: On malformed lines or repeated keys.
    """
    parser = configparser.ConfigParser(
        interpolation=None,
        inline_comment_prefixes=("#",),
        comment_prefixes=("#",),
        delimiters=("=",),
        empty_lines_in_values=False,
    )
    # Keys are case-sensitive
    parser.optionxform = str
    try:
        parser.read_string(f"[{_SECTION}]\n" + text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"Cannot parse {source}: {e.message}") from None
    if parser.sections() != [_SECTION]:
        raise ConfigError(f"{source}: section headers are not allowed")
    return dict(parser[_SECTION])


def parse_overrides(overrides: Iterable[str]) -> Dict[str, str]:
    items = {}
    for override in overrides:
        key, sep, value = override.partition("=")
        if not sep or not key.strip():
            raise ConfigError(
                f"Override {override!r} is not of the form key=value"
            )
        items[key.strip()] = value.strip()
    return items


def resolve(
    items: Mapping[str, str], base: Optional[RunConfig] = None
) -> RunConfig:
    """
    Applies raw ``key -> value`` strings on top of `base` (defaults when
    omitted). A ``preset`` key replaces the model section before the other
    keys apply.
    """
    base = base or RunConfig()
    items = dict(items)
    model = base.model
    if PRESET_KEY in items:
        name = items.pop(PRESET_KEY)
        if name not in PRESETS:
            raise ConfigError(
                f"Unknown preset {name!r}, expected one of:"
                f" {', '.join(PRESETS)}"
            )
        model = PRESETS[name]

    model_keys = set(_model_keys())
    train_fields = _train_fields()
    known = model_keys | set(train_fields) | set(PATH_KEYS)
    unknown = sorted(k for k in items if k not in known)
    if unknown:
        raise ConfigError(
            f"Unknown config keys: {', '.join(unknown)}"
            " (see --help for the accepted keys)"
        )

    model_items = dict(model.to_items())
    model_items.update({k: v for k, v in items.items() if k in model_keys})
    train_kwargs = {
        f.name: getattr(base.train, f.name) for f in train_fields.values()
    }
    for key, raw in items.items():
        if key in train_fields:
            train_kwargs[key] = _coerce_train(key, raw, train_fields[key].type)
    paths = {key: items.get(key, getattr(base, key)) for key in PATH_KEYS}
    return RunConfig(
        ModelConfig.from_items(model_items),
        TrainConfig(**train_kwargs),
        **paths,
    )


def load_config(
    source: Optional[str] = None, overrides: Iterable[str] = ()
) -> RunConfig:
    """
    Resolves a run config from a preset name or a config file path (or
    defaults when `source` is None), then applies ``key=value`` overrides.
    """
    items: Dict[str, str] = {}
    if source is not None:
        if source in PRESETS and not os.path.exists(source):
            items[PRESET_KEY] = source
        else:
            try:
                with open(source, encoding="utf-8") as f:
                    text = f.read()
            except OSError as e:
                raise ConfigError(
                    f"Cannot read config file {source!r}: {e.strerror}"
                ) from None
            items.update(parse_text(text, source))
    items.update(parse_overrides(overrides))
    config = resolve(items)
    logger.debug("Resolved config:\n" + config.dump())
    return config


def describe_keys() -> str:
    """A help listing of every accepted key and its default."""
    defaults = RunConfig()
    lines = [
        "config keys (file lines or -o key=value):",
        f"  {PRESET_KEY} = {' | '.join(PRESETS)}",
    ]
    lines += [f"  {key} = {value}" for key, value in defaults.to_items()]
    return "\n".join(lines)
