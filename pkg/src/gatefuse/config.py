"""Run configuration: flat dotted keys from a TOML file, overridable from the command line."""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigurationError
from .fusion import VARIANTS, FusionConfig
from .synth import TaskSpec
from .trainer import TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

ECHO_NAME = "config.resolved.toml"

_TASK = {f.name: f.default for f in fields(TaskSpec) if f.name != "seed"}
_FUSION = {
    f.name: f.default
    for f in fields(FusionConfig)
    if f.name not in ("modalities", "gate_variant", "component_level")
}
_TRAIN = {f.name: f.default for f in fields(TrainConfig) if f.name != "seed"}

DEFAULTS: dict[str, object] = {
    "seed": 0,
    "variant": "full",
    **{f"task.{k}": v for k, v in _TASK.items()},
    "gen.n": 5000,
    "gen.name": "synth",
    **{f"fusion.{k}": v for k, v in _FUSION.items()},
    "model.head": "classification",
    **{f"train.{k}": v for k, v in _TRAIN.items()},
    "eval.split": "val",
    "eval.subset": "",
    "ablate.variants": ["concat-only", "attention-only", "attention+inner", "full"],
    "ablate.seeds": [0, 1, 2, 3, 4],
    "ablate.split": "test",
    "paths.data": [],
    "paths.out": "",
    "paths.checkpoint": "",
}
# TOML has no tuples; lists keep the echoed config equal to the resolved one
DEFAULTS = {k: list(v) if isinstance(v, tuple) else v for k, v in DEFAULTS.items()}


def flatten(tree: dict, prefix: str = "") -> dict[str, object]:
    out = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(key: str, value):
    default = DEFAULTS[key]
    if default is None:
        if value in ("", None):
            return None
        return [int(x) for x in _as_list(value)] or None
    if isinstance(default, bool):
        if isinstance(value, str):
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise ConfigurationError(f"{key}: expected a boolean, got {value!r}")
        return bool(value)
    if isinstance(default, int):
        try:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        except (TypeError, ValueError):
            raise ConfigurationError(f"{key}: expected an integer, got {value!r}") from None
    if isinstance(default, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigurationError(f"{key}: expected a number, got {value!r}") from None
    if isinstance(default, (list, tuple)):
        items = _as_list(value)
        kind = type(default[0]) if len(default) else str
        try:
            return [kind(x) for x in items]
        except (TypeError, ValueError):
            raise ConfigurationError(f"{key}: expected a list of {kind.__name__}, got {value!r}") from None
    return str(value)


def _as_list(value) -> list:
    if isinstance(value, (list, tuple)):
        return list(value)
    if isinstance(value, str):
        return [x.strip() for x in value.split(",") if x.strip()]
    return [value]


@dataclass
class RunConfig:
    values: dict[str, object] = field(default_factory=lambda: dict(DEFAULTS))

    def __getitem__(self, key: str):
        return self.values[key]

    def update(self, items: dict[str, object], source: str = "override") -> None:
        for key, value in items.items():
            if key not in DEFAULTS:
                raise ConfigurationError(f"unknown config key {key!r} (from {source})")
            value = _coerce(key, value)
            for v in [value] if key == "variant" else value if key == "ablate.variants" else []:
                if v not in VARIANTS:
                    raise ConfigurationError(f"{key}: unknown variant {v!r}; choose from {sorted(VARIANTS)}")
            self.values[key] = value

    def section(self, name: str) -> dict[str, object]:
        n = len(name) + 1
        return {k[n:]: v for k, v in self.values.items() if k.startswith(name + ".")}

    def task_spec(self) -> TaskSpec:
        task = self.section("task")
        dims, n = list(task["modality_dims"]), int(task["n_modalities"])
        if len(dims) != n and len(set(dims)) == 1:
            task["modality_dims"] = dims[:1] * n  # one shared width
        return TaskSpec(seed=int(self["seed"]), **task)

    def fusion_config(self, modalities) -> FusionConfig:
        variant = self["variant"]
        if variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
        return FusionConfig.for_variant(variant, modalities=tuple(modalities), **self.section("fusion"))

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=int(self["seed"]), **self.section("train"))

    def to_toml(self) -> str:
        lines = []
        for key in sorted(self.values):
            lines.append(f"{_toml_key(key)} = {_toml_value(self.values[key])}")
        return "\n".join(lines) + "\n"

    def echo(self, directory) -> Path:
        path = Path(directory) / ECHO_NAME
        path.write_text(self.to_toml())
        return path


def _toml_key(key: str) -> str:
    return ".".join(p if p.replace("_", "").isalnum() else f'"{p}"' for p in key.split("."))


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if v is None:
        return "[]"
    s = str(v).replace("\\", "\\\\").replace('"', '\\"')
    return f'"{s}"'


def load_config(path=None, overrides: dict[str, object] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path:
        p = Path(path)
        try:
            text = p.read_text()
        except FileNotFoundError:
            raise ConfigurationError(f"config file not found: {p}") from None
        except OSError as exc:
            raise ConfigurationError(f"cannot read config file {p}: {exc}") from None
        try:
            tree = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigurationError(f"{p}: invalid TOML: {exc}") from None
        cfg.update(flatten(tree), source=str(p))
    if overrides:
        cfg.update(overrides)
    return cfg


def parse_assignments(items) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigurationError(f"expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = _parse_scalar(v.strip())
    return out


def _parse_scalar(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text
