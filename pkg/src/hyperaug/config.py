"""Run configuration: a TOML file plus ``section.key=value`` overrides."""
from __future__ import annotations

import dataclasses
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .hypergrad import ConfigError, HypergradConfig
from .models import ModelSpec
from .trainloop import TrainConfig

__all__ = ["DataConfig", "RunConfig", "load_run_config", "build_run_config", "parse_override", "set_path", "ConfigError", "SEED_ENV"]

SEED_ENV = "RA_SEED"
DATA_KINDS = ("mnist", "cifar10", "synth")
PRECISIONS = ("float32", "float64")


@dataclass(frozen=True)
class DataConfig:
    kind: str = "synth"
    path: str | None = None
    validation_fraction: float = 0.10
    split_seed: int = 0
    subset: int = 0
    synth_n: int = 600
    synth_test_n: int = 200
    synth_classes: int = 4

    def __post_init__(self):
        if self.kind not in DATA_KINDS:
            raise ConfigError("data.kind", f"must be one of {DATA_KINDS}, got {self.kind!r}")
        if self.kind != "synth" and not self.path:
            raise ConfigError("data.path", f"required for data.kind = {self.kind!r}")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ConfigError("data.validation_fraction", f"must lie in (0, 1), got {self.validation_fraction!r}")
        if self.subset < 0:
            raise ConfigError("data.subset", "must be >= 0 (0 keeps everything)")
        if self.synth_n < 2 or self.synth_test_n < 1 or self.synth_classes < 2:
            raise ConfigError("data.synth_n", "synthetic sizes must be positive (and at least 2 classes)")


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    data: DataConfig = field(default_factory=DataConfig)
    output_dir: str = "runs/default"
    precision: str = "float64"

    @property
    def seed(self) -> int:
        return self.train.seed

    @property
    def method(self) -> str:
        return self.train.method

    def to_dict(self) -> dict:
        train = dataclasses.asdict(self.train)
        hyper = train.pop("hypergrad")
        top = {"seed": train.pop("seed"), "method": train.pop("method")}
        return {
            **top,
            "output_dir": self.output_dir,
            "precision": self.precision,
            "train": train,
            "hypergrad": hyper,
            "model": self.model.to_dict(),
            "data": dataclasses.asdict(self.data),
        }


_TOP_KEYS = {"seed", "method", "output_dir", "precision"}
_SECTIONS = {
    "train": {f.name for f in dataclasses.fields(TrainConfig)} - {"hypergrad", "seed", "method"},
    "hypergrad": {f.name for f in dataclasses.fields(HypergradConfig)},
    "model": {"kind", "hidden", "channels", "num_classes", "input_shape"},
    "data": {f.name for f in dataclasses.fields(DataConfig)},
}
_DEFAULTS = {
    "train": TrainConfig(),
    "hypergrad": HypergradConfig(),
    "model": ModelSpec(),
    "data": DataConfig(),
}


def parse_override(text: str) -> tuple[str, object]:
    """``section.key=value``; the value is read as a TOML literal, else as a bare string."""
    if "=" not in text:
        raise ConfigError(text, "override must look like key=value")
    key, raw = (s.strip() for s in text.split("=", 1))
    if not key:
        raise ConfigError(text, "empty key in override")
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return key, value


def set_path(tree: dict, dotted: str, value):
    parts = dotted.split(".")
    node = tree
    for p in parts[:-1]:
        nxt = node.setdefault(p, {})
        if not isinstance(nxt, dict):
            raise ConfigError(dotted, f"{p!r} is not a section")
        node = nxt
    node[parts[-1]] = value


# stand-ins for fields whose default is None
_NONE_DEFAULT_TYPES = {"hypergrad.unroll_cache_cap": 0, "data.path": ""}


def _check_type(key: str, value, default):
    """Reject values whose type cannot stand in for the default's type."""
    if default is None:
        default = _NONE_DEFAULT_TYPES.get(key)
    if default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(key, f"expected a list of integers, got {value!r}")
        return tuple(value)
    return value


def _section(tree: dict, name: str) -> dict:
    raw = tree.get(name, {})
    if not isinstance(raw, dict):
        raise ConfigError(name, "must be a table")
    out = {}
    default = _DEFAULTS[name]
    for key, value in raw.items():
        if value is None:
            continue
        dotted = f"{name}.{key}"
        if key not in _SECTIONS[name]:
            raise ConfigError(dotted, "unknown key")
        out[key] = _check_type(dotted, value, getattr(default, key))
    return out


def build_run_config(tree: dict, env: dict | None = None) -> RunConfig:
    """Validate a parsed config tree; every failure is a :class:`ConfigError`."""
    for key in tree:
        if key not in _TOP_KEYS and key not in _SECTIONS:
            raise ConfigError(key, "unknown key")
    seed = _check_type("seed", tree.get("seed", 0), 0)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            seed = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(SEED_ENV, f"must be an integer, got {env[SEED_ENV]!r}") from None
    method = _check_type("method", tree.get("method", "madao"), "")
    precision = _check_type("precision", tree.get("precision", "float64"), "")
    if precision not in PRECISIONS:
        raise ConfigError("precision", f"must be one of {PRECISIONS}, got {precision!r}")
    output_dir = _check_type("output_dir", tree.get("output_dir", "runs/default"), "")

    sections = {name: _section(tree, name) for name in _SECTIONS}
    try:
        hyper = HypergradConfig(**sections["hypergrad"])
    except ConfigError as exc:
        raise ConfigError(f"hypergrad.{exc.key}", str(exc).split(": ", 1)[1]) from None
    data = DataConfig(**sections["data"])
    model_kw = dict(sections["model"])
    if "input_shape" not in model_kw:
        model_kw["input_shape"] = {"mnist": (1, 28, 28), "cifar10": (3, 32, 32), "synth": (1, 16, 16)}[data.kind]
    if "num_classes" not in model_kw:
        model_kw["num_classes"] = data.synth_classes if data.kind == "synth" else 10
    try:
        model = ModelSpec(**model_kw)
    except ValueError as exc:
        msg = str(exc)
        key = next((f"model.{k}" for k in ("kind", "input_shape", "num_classes") if k.replace("_", " ") in msg or k in msg), "model")
        raise ConfigError(key, msg) from None
    train_kw = dict(sections["train"])
    train_kw.setdefault("dataset_kind", data.kind)
    try:
        train = TrainConfig(hypergrad=hyper, seed=seed, method=method, **train_kw)
    except ConfigError as exc:
        key = exc.key if exc.key in ("seed", "method") else f"train.{exc.key}"
        raise ConfigError(key, str(exc).split(": ", 1)[1]) from None
    return RunConfig(train=train, model=model, data=data, output_dir=output_dir, precision=precision)


def load_run_config(path, overrides=(), env: dict | None = None) -> RunConfig:
    """Read ``path`` (TOML), apply ``section.key=value`` overrides, validate."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror or exc}") from None
    try:
        tree = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("config", f"{path}: {exc}") from None
    for item in overrides:
        key, value = parse_override(item)
        set_path(tree, key, value)
    return build_run_config(tree, env)
