"""INI experiment configuration with per-module sections."""
from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from ..model import ModelConfig
from ..training import TrainConfig

UNTARGETED_METHODS = ("fgsm", "deepfool", "cw")
TARGETED_METHODS = ("fgsm", "be", "cw")

CW_DEFAULTS = {
    "untargeted": {"c": 0.05, "eta": 2e-5, "max_iters": 30},
    "targeted": {"c": 15.0, "eta": 0.002, "max_iters": 50},
}

STREAMS = {"target": 1, "cw_init": 2}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetParams:
    n_train: int = 2000
    n_test: int = 200
    seed: int = 42


@dataclass(frozen=True)
class AttackParams:
    method: str = "fgsm"
    mode: str = "untargeted"
    n_images: int = 100
    target_rank: int = 10
    workers: int = 1
    # C&W; None picks the per-mode default
    c: float | None = None
    eta: float | None = None
    max_iters: int | None = None
    lr: float = 0.002
    weight_decay: float = 1e-5
    patience: int = 5
    # backward error
    alpha: float = 0.5
    iterations: int = 5
    margin: float = 0.0
    # deepfool
    top_amount: int = 1
    deepfool_max_iters: int = 1

    def resolved(self) -> "AttackParams":
        if self.mode not in CW_DEFAULTS:
            raise ConfigError(f"attack.mode must be 'untargeted' or 'targeted', not {self.mode!r}")
        allowed = UNTARGETED_METHODS if self.mode == "untargeted" else TARGETED_METHODS
        if self.method not in allowed:
            raise ConfigError(f"method {self.method!r} has no {self.mode} variant; choose from {allowed}")
        if self.n_images < 0:
            raise ConfigError("attack.n_images must be >= 0")
        defaults = CW_DEFAULTS[self.mode]
        return replace(self, **{k: v for k, v in defaults.items() if getattr(self, k) is None})


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetParams = field(default_factory=DatasetParams)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackParams = field(default_factory=AttackParams)
    seed: int = 0
    output_dir: str = "runs"
    model_path: str = ""

    def train_config(self) -> TrainConfig:
        return replace(self.training, model=self.model)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp["experiment"] = {"seed": str(self.seed), "output_dir": self.output_dir,
                            "model_path": self.model_path}
        for name, obj in self._sections():
            cp[name] = {f.name: _fmt(getattr(obj, f.name)) for f in fields(obj) if f.name != "model"}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def hash(self) -> str:
        return hashlib.sha256(self.to_ini().encode("utf-8")).hexdigest()[:16]

    def _sections(self):
        return [("dataset", self.dataset), ("model", self.model),
                ("training", self.training), ("attack", self.attack)]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(cls, key: str, raw: str):
    types = {f.name: f.type for f in fields(cls)}
    if key not in types:
        raise ConfigError(f"unknown key {key!r} for {cls.__name__}")
    t = str(types[key])
    raw = raw.strip()
    if raw == "" and "None" in t:
        return None
    try:
        if t.startswith("int"):
            return int(raw)
        if t.startswith("float"):
            return float(raw)
        if t.startswith("bool"):
            return raw.lower() in ("1", "true", "yes", "on")
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


_SECTION_TYPES = {"dataset": DatasetParams, "model": ModelConfig,
                  "training": TrainConfig, "attack": AttackParams}


def parse_config(text: str, overrides=()) -> ExperimentConfig:
    """Parse INI text; ``overrides`` are ``section.key=value`` strings."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        section, name = key.split(".", 1)
        if not cp.has_section(section):
            cp.add_section(section)
        cp[section][name] = value

    parts = {}
    for section, cls in _SECTION_TYPES.items():
        kwargs = {}
        if cp.has_section(section):
            for key, raw in cp[section].items():
                if key == "model" and cls is TrainConfig:
                    raise ConfigError("training.model is set through the [model] section")
                kwargs[key] = _coerce(cls, key, raw)
        parts[section] = cls(**kwargs)
    exp = {}
    if cp.has_section("experiment"):
        for key, raw in cp["experiment"].items():
            if key == "seed":
                exp["seed"] = int(raw)
            elif key in ("output_dir", "model_path"):
                exp[key] = raw.strip()
            else:
                raise ConfigError(f"unknown key {key!r} in [experiment]")
    for section in cp.sections():
        if section not in _SECTION_TYPES and section != "experiment":
            raise ConfigError(f"unknown section [{section}]")
    cfg = ExperimentConfig(parts["dataset"], parts["model"], parts["training"],
                           parts["attack"].resolved(), **exp)
    return cfg


def load_config(path, overrides=()) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config(path.read_text(), overrides)


def stream_seed(master: int, stream: str, index: int) -> int:
    """Independent seed for ``(master, stream, index)``; adding images never shifts others."""
    state = np.random.SeedSequence([master, STREAMS[stream], index]).generate_state(1, np.uint64)
    return int(state[0] >> np.uint64(1))
