"""Configuration defaults, YAML loading, dotted overrides, config hashing.

One schema covers all phases; per-phase sections inherit the shared `train`
base. Full-scale dims (d=128, hidden=2048, expander 1024) are reachable by
overriding the `model` section; defaults are small enough for a laptop CPU.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import yaml

DEFAULTS: dict = {
    "model": {
        "d": 32,
        "hidden": 256,
        "expander_hidden": 128,
        "chord_dim": 0,
    },
    "data": {
        "hop_bars": 1,
        "split_ratio": 0.9,
        "seed": 0,
        # random transposition augmentation range in semitones (0 disables)
        "augment_transpose": 0,
    },
    "train": {
        "seed": 0,
        "lr_start": 1e-3,
        "lr_end": 1e-5,
        "lr_horizon_steps": 10000,
        "kl_weight": 0.1,
        "kl_warmup_frac": 0.1,
        "beta": 0.1,
        "tau": 1.0,
        "cross_factor_negatives": True,
        "patience": 10,
        "eval_on": "test",  # accuracy split driving early stopping
        "advance_accuracy": 0.8,  # finetune1 -> finetune2 advancement bar
    },
    "phases": {
        "pretrain2": {"batch_size": 128, "max_epochs": 200, "K": 0},
        "pretrain4": {"batch_size": 128, "max_epochs": 200, "K": 512},
        "pretrain8": {"batch_size": 128, "max_epochs": 200, "K": 512},
        "finetune1": {"batch_size": 64, "max_epochs": 25, "K": 256},
        "finetune2": {"batch_size": 64, "max_epochs": 200, "K": 256},
    },
    "ablation": {
        "no_contrastive": False,
        "no_fixed": False,
    },
}

PHASE_ORDER = ["pretrain2", "pretrain4", "pretrain8", "finetune1", "finetune2"]


class ConfigError(Exception):
    pass


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in out:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(out[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {key!r} must be a mapping")
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path=None, overrides: list[str] | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text()) or {}
        cfg = _deep_merge(cfg, loaded)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        dotted, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        node = cfg
        keys = dotted.split(".")
        for key in keys[:-1]:
            if key not in node or not isinstance(node[key], dict):
                raise ConfigError(f"unknown config section {key!r} in {dotted!r}")
            node = node[key]
        if keys[-1] not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        node[keys[-1]] = value
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]
