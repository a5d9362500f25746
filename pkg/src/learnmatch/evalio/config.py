"""Experiment configuration and its TOML-subset file format.

The file is flat tables only: top-level ``seed``/``out_dir`` plus the
``[data]``, ``[model]``, ``[matching]`` and ``[train]`` tables. Values are
strings, booleans, ints, floats or arrays of numbers. Unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import tomli


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    generator: str = "two_moons"  # two_moons | blobs | csv
    n: int = 500
    noise_sd: float = 0.1
    angle_deg: float = 30.0
    num_classes: int = 3
    n_per_class: int = 100
    shift: list = field(default_factory=lambda: [2.0, 2.0])
    scale: float = 1.5
    source_csv: str = ""
    target_csv: str = ""
    label_column: str = "-1"


@dataclass
class ModelConfig:
    feature_hidden: list = field(default_factory=lambda: [64, 64])
    meta_hidden: list = field(default_factory=lambda: [64, 64])
    disc_hidden: int = 32
    hidden_activation: str = "relu"
    meta_init: str = "distance_prior"  # glorot | zero_last | distance_prior


@dataclass
class MatchingConfig:
    mode: str = "emb+mmd"
    pair_repr: str = "diff"
    bandwidth: Any = "median"
    multipliers: list = field(default_factory=lambda: [0.25, 0.5, 1.0, 2.0, 4.0])
    tau: float = 0.8
    disc_lr: float = 0.05


@dataclass
class TrainConfig:
    method: str = "l2m"  # l2m | source_only | mmd_align | adv_align
    epochs: int = 100
    batch_size: int = 64
    eta0: float = 0.5
    beta0: float = 0.01
    gamma: float = 0.001
    upsilon: float = 0.75
    lambda_max: float = 2.0
    lambda_mode: str = "ramp"  # ramp | constant
    meta_loss_sign: int = 1
    tau: float = 0.8
    m: int = 5
    meta_enabled: bool = True
    meta_every: str = "epoch"  # epoch | step
    main_progression: str = "lookahead"  # lookahead | adopt
    clip_norm: float = 5.0
    baseline_clip_norm: float = 0.0
    meta_weight_decay: float = 1e-4


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    matching: MatchingConfig = field(default_factory=MatchingConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **sections) -> "ExperimentConfig":
        """Copy with per-section overrides, e.g. ``cfg.replace(train={"epochs": 2})``."""
        out = from_dict(self.to_dict())
        for name, values in sections.items():
            if name in ("seed", "out_dir"):
                setattr(out, name, values)
                continue
            section = getattr(out, name)
            for k, v in values.items():
                if not hasattr(section, k):
                    raise ConfigError(f"unknown key {name}.{k}")
                setattr(section, k, v)
        validate(out)
        return out


_SECTIONS = {"data": DataConfig, "model": ModelConfig, "matching": MatchingConfig, "train": TrainConfig}
_CHOICES = {
    ("data", "generator"): ("two_moons", "blobs", "csv"),
    ("model", "hidden_activation"): ("relu", "tanh"),
    ("model", "meta_init"): ("glorot", "zero_last", "distance_prior"),
    ("matching", "mode"): ("emb", "logit", "mmd", "adv", "emb+mmd", "emb+adv", "logit+mmd", "logit+adv"),
    ("matching", "pair_repr"): ("diff", "concat"),
    ("train", "method"): ("l2m", "source_only", "mmd_align", "adv_align"),
    ("train", "lambda_mode"): ("ramp", "constant"),
    ("train", "meta_every"): ("epoch", "step"),
    ("train", "main_progression"): ("lookahead", "adopt"),
}


def _coerce(section: str, key: str, default, value):
    where = f"{section}.{key}" if section else key
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list) or any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in value):
            raise ConfigError(f"{where} must be an array of numbers, got {value!r}")
        return list(value)
    # bandwidth: float or "median"
    if isinstance(value, str) and value == "median":
        return value
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    raise ConfigError(f"{where} must be a number or 'median', got {value!r}")


def from_dict(raw: dict) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for key, value in raw.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"[{key}] must be a table")
            section = getattr(cfg, key)
            for k, v in value.items():
                if not hasattr(section, k):
                    raise ConfigError(f"unknown key {key}.{k}")
                setattr(section, k, _coerce(key, k, getattr(section, k), v))
        elif key in ("seed", "out_dir"):
            setattr(cfg, key, _coerce("", key, getattr(cfg, key), value))
        else:
            raise ConfigError(f"unknown key {key!r}")
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    for (section, key), allowed in _CHOICES.items():
        value = getattr(getattr(cfg, section), key)
        if value not in allowed:
            raise ConfigError(f"{section}.{key} = {value!r}; expected one of {allowed}")
    t = cfg.train
    if t.eta0 <= 0 or t.beta0 <= 0:
        raise ConfigError("train.eta0 and train.beta0 must be positive")
    if not 0.0 <= t.tau <= 1.0 or not 0.0 <= cfg.matching.tau <= 1.0:
        raise ConfigError("tau must lie in [0, 1]")
    if t.m < 1 or t.epochs < 1 or t.batch_size < 1:
        raise ConfigError("train.m, train.epochs and train.batch_size must be >= 1")
    if t.meta_loss_sign not in (1, -1):
        raise ConfigError("train.meta_loss_sign must be 1 or -1")
    if t.clip_norm < 0 or t.baseline_clip_norm < 0:
        raise ConfigError("clip norms must be >= 0 (0 disables clipping)")


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomli.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomli.TOMLDecodeError as err:
        raise ConfigError(f"{path}: {err}") from None
    return from_dict(raw)


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        text = repr(v)
        return text if any(ch in text for ch in ".en") else text + ".0"
    if isinstance(v, str):
        escaped = v.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(v, list):
        return "[" + ", ".join(_format_value(x) for x in v) + "]"
    raise ConfigError(f"cannot serialize {v!r}")


def dumps_config(cfg: ExperimentConfig) -> str:
    d = cfg.to_dict()
    lines = [f"seed = {_format_value(d['seed'])}", f"out_dir = {_format_value(d['out_dir'])}"]
    for name in _SECTIONS:
        lines += ["", f"[{name}]"]
        lines += [f"{k} = {_format_value(v)}" for k, v in d[name].items()]
    return "\n".join(lines) + "\n"


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(dumps_config(cfg), encoding="utf-8")
