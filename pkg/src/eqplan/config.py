"""Run configuration: nested dataclasses, JSON files, env and flag overrides."""
from __future__ import annotations

import json
import os
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass

from .model import ModelConfig
from .scene import GeneratorConfig
from .train import TrainConfig

ENV_PREFIX = "EQPLAN_"


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    seed: int = 0
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)


@dataclass
class EvalConfig:
    r_coll: float = 1.0
    collide_with: str = "gt"
    theta_start: float = 1.0
    theta_stop: float = 359.0
    theta_step: float = 1.0
    translations: int = 20
    translation_bound: float = 100.0
    translation_seed: int = 0
    tolerance: float = 1e-6


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    score_mode: str = "paper"

    def validate(self):
        self.model.validate()
        self.data.generator.validate()
        self.train.validate()
        if self.score_mode not in ("paper", "invariant"):
            raise ConfigError("score_mode: must be 'paper' or 'invariant'")
        if self.eval.collide_with not in ("gt", "pred"):
            raise ConfigError("eval.collide_with: must be 'gt' or 'pred'")
        if not self.eval.r_coll > 0:
            raise ConfigError("eval.r_coll: must be positive")
        g, m = self.data.generator, self.model
        if (g.t_past, g.t_future) != (m.T_p, m.T_f):
            raise ConfigError("data.generator.t_past/t_future must match model.T_p/T_f")


def _hints(cls):
    return typing.get_type_hints(cls)


def from_dict(cls, data: dict, path: str = ""):
    """Build a (nested) dataclass, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected an object")
    hints = _hints(cls)
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(path + k for k in unknown)}")
    kwargs = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        tp = hints[f.name]
        val = data[f.name]
        key = path + f.name
        if is_dataclass(tp):
            kwargs[f.name] = from_dict(tp, val, key + ".")
        else:
            kwargs[f.name] = _coerce(tp, val, key)
    return cls(**kwargs)


def _coerce(tp, val, key):
    if tp is bool:
        if isinstance(val, bool):
            return val
        if isinstance(val, str) and val.lower() in ("true", "1", "yes", "on", "false", "0", "no", "off"):
            return val.lower() in ("true", "1", "yes", "on")
        raise ConfigError(f"{key}: expected a boolean, got {val!r}")
    if tp is int:
        if isinstance(val, bool):
            raise ConfigError(f"{key}: expected an integer, got {val!r}")
        try:
            out = int(val)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected an integer, got {val!r}") from None
        if isinstance(val, float) and val != out:
            raise ConfigError(f"{key}: expected an integer, got {val!r}")
        return out
    if tp is float:
        if isinstance(val, bool):
            raise ConfigError(f"{key}: expected a number, got {val!r}")
        try:
            return float(val)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected a number, got {val!r}") from None
    if tp is str:
        if not isinstance(val, str):
            raise ConfigError(f"{key}: expected a string, got {val!r}")
        return val
    raise ConfigError(f"{key}: unsupported type {tp}")


def dumps(cfg: RunConfig) -> str:
    return json.dumps(asdict(cfg), indent=2) + "\n"


def loads(text: str) -> RunConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    return from_dict(RunConfig, data)


def load(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


def flat_defaults(cfg=None, prefix=""):
    """[(dotted key, default value)] for every leaf field."""
    cfg = RunConfig() if cfg is None else cfg
    out = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if is_dataclass(v):
            out += flat_defaults(v, prefix + f.name + ".")
        else:
            out.append((prefix + f.name, v))
    return out


def set_key(cfg: RunConfig, dotted: str, value):
    """Override one leaf, e.g. ``train.epochs``; values may be strings."""
    parts = dotted.split(".")
    obj = cfg
    for part in parts[:-1]:
        if not is_dataclass(obj) or part not in {f.name for f in fields(obj)}:
            raise ConfigError(f"unknown config key: {dotted}")
        obj = getattr(obj, part)
    leaf = parts[-1]
    if not is_dataclass(obj) or leaf not in {f.name for f in fields(obj)}:
        raise ConfigError(f"unknown config key: {dotted}")
    tp = _hints(type(obj))[leaf]
    if is_dataclass(tp):
        raise ConfigError(f"{dotted}: is a section, not a value")
    setattr(obj, leaf, _coerce(tp, value, dotted))


def apply_env(cfg: RunConfig, environ=None):
    """``EQPLAN_TRAIN__EPOCHS=5`` sets ``train.epochs``."""
    environ = os.environ if environ is None else environ
    known = {k.lower(): k for k, _ in flat_defaults()}
    for name, value in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        dotted = known.get(name[len(ENV_PREFIX):].lower().replace("__", "."))
        if dotted is not None:
            set_key(cfg, dotted, value)
    return cfg
