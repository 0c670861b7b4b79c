"""Experiment configuration files.

A config is a JSON object::

    {
      "seed": 0,                       # required
      "out": "runs/ours-5shot",        # optional, --out overrides
      "data": "data/default",          # dataset root for run/ablate/sweep
      "shift":    {ShiftSpec fields},
      "sizes":    {"n_source": 6000, "n_target_train": 60, "n_target_test": 600},
      "model":    {ModelConfig fields except seed},
      "train":    {TrainConfig fields except seed},
      "protocol": {"n": 5, "k": 10, "ns": [1, 3, 5, 7, 9], "method": "ours", "group_size": 600}
    }

Unknown keys anywhere are rejected before any work starts.
"""
import json
import os
from dataclasses import MISSING, dataclass, field, fields

from siamxd.data import ShiftSpec
from siamxd.model import ConfigError, ModelConfig
from siamxd.training import DEFAULT_SHOTS, METHODS, TrainConfig


@dataclass(frozen=True)
class Sizes:
    n_source: int = 6000
    n_target_train: int = 60
    n_target_test: int = 600


SMOKE_SIZES = Sizes(600, 20, 100)


@dataclass(frozen=True)
class Protocol:
    n: int = 5
    k: int = 10
    ns: tuple = DEFAULT_SHOTS
    method: str = "ours"
    group_size: int = 600

    def __post_init__(self):
        object.__setattr__(self, "ns", tuple(self.ns))
        if self.method not in METHODS:
            raise ConfigError(f"protocol.method must be one of {METHODS}, got {self.method!r}")
        if self.k < 2 or self.n < 1 or not self.ns or min(self.ns) < 1 or self.group_size < 2:
            raise ConfigError(f"invalid protocol {self}")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    out: str = None
    data: str = None
    shift: ShiftSpec = field(default_factory=ShiftSpec)
    sizes: Sizes = field(default_factory=Sizes)
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    protocol: Protocol = field(default_factory=Protocol)

    def model_config(self, input_dim):
        kw = dict(self.model)
        kw.setdefault("input_dim", input_dim)
        return ModelConfig(**kw)


SECTIONS = {"shift": ShiftSpec, "sizes": Sizes, "model": ModelConfig, "train": TrainConfig, "protocol": Protocol}
EXCLUDED = {"model": {"seed"}, "train": {"seed"}}


def _check_type(section, key, value, default):
    if default is MISSING or default is None:
        return
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, tuple):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{section}.{key}: expected {type(default).__name__}, got {value!r}")


def _section(name, raw):
    cls = SECTIONS[name]
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be an object")
    allowed = {f.name: f for f in fields(cls)}
    for key in EXCLUDED.get(name, ()):
        allowed.pop(key)
    unknown = sorted(set(raw) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r}: {unknown}; allowed: {sorted(allowed)}")
    for key, value in raw.items():
        f = allowed[key]
        default = f.default if f.default is not MISSING else (
            f.default_factory() if f.default_factory is not MISSING else MISSING)
        _check_type(name, key, value, default)
    if name == "model":
        return dict(raw)
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"section {name!r}: {exc}") from exc


def parse_config(raw):
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    top = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {unknown}; allowed: {sorted(top)}")
    if "seed" not in raw:
        raise ConfigError("config needs an explicit integer 'seed'")
    seed = raw["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    kw = {"seed": seed}
    for key in ("out", "data"):
        if key in raw:
            if not isinstance(raw[key], str):
                raise ConfigError(f"{key} must be a path string")
            kw[key] = raw[key]
    for name in SECTIONS:
        if name in raw:
            kw[name] = _section(name, raw[name])
    if "model" in kw:
        # validate now; input_dim may still be filled in from the data later
        ModelConfig(**{"input_dim": 1, "conv_channels": 0, **kw["model"]}) if "input_dim" not in kw["model"] \
            else ModelConfig(**kw["model"])
    return ExperimentConfig(**kw)


def load_config(path):
    if not os.path.exists(path):
        raise ConfigError(f"config file {path} does not exist")
    with open(path, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_config(raw)
