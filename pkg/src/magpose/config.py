"""Run configuration: defaults <- JSON file <- command-line flags, addressed by dotted keys."""
from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict

from .datagen import SamplingConfig
from .dipole import DEFAULT_MAGNET, MagnetSpec
from .errors import ContractError
from .evalbench import DEFAULT_HEIGHTS_MM
from .lm_solver import LmConfig
from .posenet.model import ModelConfig
from .posenet.training import TrainConfig
from .sensor_array import DEFAULT_PITCH, DEFAULT_RANGE_LIMIT, SensorArrayGeometry


def default_config() -> dict:
    train = TrainConfig().to_dict()
    train.update({"subsample": 1.0, "split_fractions": [0.96, 0.02, 0.02], "split_seed": 0})
    return {
        "seed": 0,
        "threads": None,
        "magnet": DEFAULT_MAGNET.to_dict(),
        "geometry": {"rows": 4, "cols": 4, "pitch": DEFAULT_PITCH, "range_limit": DEFAULT_RANGE_LIMIT},
        "sampling": SamplingConfig().to_dict(),
        "model": ModelConfig().to_dict(),
        "train": train,
        "lm": asdict(LmConfig()),
        "eval": {
            "split": "test",
            "heights_mm": list(DEFAULT_HEIGHTS_MM),
            "noise_sigma": 0.0,
            "saturate": False,
            "sensor_bias_sigma": 0.0,
            "limit": None,
        },
        "bench": {"iterations": 100, "warmup": 10},
    }


def _check_known(base: dict, update: dict, prefix=""):
    for k, v in update.items():
        if k not in base:
            raise ContractError(f"unknown config key: {prefix}{k}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            _check_known(base[k], v, f"{prefix}{k}.")


def merge(base: dict, update: dict) -> dict:
    """Deep-merge ``update`` into a copy of ``base``; keys must already exist."""
    _check_known(base, update)
    out = copy.deepcopy(base)
    for k, v in update.items():
        if isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def set_dotted(cfg: dict, key: str, value) -> dict:
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise ContractError(f"unknown config key: {key}")
        node = node[p]
    if parts[-1] not in node:
        raise ContractError(f"unknown config key: {key}")
    node[parts[-1]] = value
    return cfg


def parse_value(text: str):
    try:
        return json.loads(text)
    except ValueError:
        return text


def load_config(path=None, overrides: dict | None = None, dotted: list | None = None) -> dict:
    """Defaults, then the JSON file at ``path``, then ``overrides`` (dotted key -> value)."""
    cfg = default_config()
    if path:
        with open(path) as fh:
            cfg = merge(cfg, json.load(fh))
    for item in dotted or []:
        if "=" not in item:
            raise ContractError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        set_dotted(cfg, k.strip(), parse_value(v))
    for k, v in (overrides or {}).items():
        if v is not None:
            set_dotted(cfg, k, v)
    return cfg


def magnet_from(cfg) -> MagnetSpec:
    return MagnetSpec.from_dict(cfg["magnet"])


def geometry_from(cfg) -> SensorArrayGeometry:
    g = cfg["geometry"]
    return SensorArrayGeometry.grid(int(g["rows"]), int(g["cols"]), float(g["pitch"]), float(g["range_limit"]))


def sampling_from(cfg) -> SamplingConfig:
    d = dict(cfg["sampling"])
    return SamplingConfig.from_dict(d)


def model_from(cfg) -> ModelConfig:
    return ModelConfig.from_dict(cfg["model"])


def train_from(cfg) -> TrainConfig:
    t = {k: v for k, v in cfg["train"].items() if k in TrainConfig.__dataclass_fields__}
    return TrainConfig(**t)


def lm_from(cfg) -> LmConfig:
    return LmConfig(**cfg["lm"])


def degrees(value):
    return None if value is None else math.radians(float(value))
