"""Run configuration: built-in defaults < config file < CLI overrides.

The config file is JSON with four sections (encoder, psp, train, data); the
resolved effective config is echoed to <out>/config.resolved.json on every
training run.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass

from .encoder import EncoderConfig


DEFAULTS = {
    "encoder": {
        "dim": 48,
        "depth": 4,
        "heads": 6,
        "mlp_ratio": 4,
        "dropout": 0.1,
    },
    "psp": {
        "class_restricted_projection": True,
        "rectify_prototypes": True,
    },
    "train": {
        "epochs": 30,
        "batch_size": 16,
        "lr": 1e-4,
        "weight_decay": 1e-2,
        "projection_period": 5,
        "seed": 0,
        "class_weighted": True,
    },
    "data": {
        "normalize": True,
    },
}


class ConfigError(ValueError):
    pass


def load_config(path: str | None = None, overrides: dict | None = None) -> dict:
    """Merge defaults, an optional JSON file, and flat 'section.key' overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        with open(path) as f:
            user = json.load(f)
        for section, values in user.items():
            if section not in cfg:
                raise ConfigError(f"unknown config section '{section}'")
            for key, val in values.items():
                if key not in cfg[section]:
                    raise ConfigError(f"unknown config key '{section}.{key}'")
                cfg[section][key] = val
    for dotted, val in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if section not in cfg or key not in cfg[section]:
            raise ConfigError(f"unknown config key '{dotted}'")
        cfg[section][key] = type(DEFAULTS[section][key])(val) \
            if not isinstance(val, type(DEFAULTS[section][key])) else val
    return cfg


def encoder_config(cfg: dict, seq_len: int, patch_size: int,
                   channels: int) -> EncoderConfig:
    e = cfg["encoder"]
    return EncoderConfig(dim=e["dim"], depth=e["depth"], heads=e["heads"],
                         mlp_ratio=e["mlp_ratio"], dropout=e["dropout"],
                         seq_len=seq_len, patch_size=patch_size,
                         channels=channels)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-4
    weight_decay: float = 1e-2
    projection_period: int = 5
    seed: int = 0
    class_weighted: bool = True

    def __post_init__(self):
        if self.epochs < 0 or self.projection_period < 1 or self.batch_size < 1:
            raise ConfigError("train config out of range")


def train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"],
                       lr=t["lr"], weight_decay=t["weight_decay"],
                       projection_period=t["projection_period"], seed=t["seed"],
                       class_weighted=t["class_weighted"])
