"""Run configuration: one YAML file per run plus command-line overrides."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import yaml


class ConfigError(ValueError):
    pass


DEFAULT_CONFIG = {
    "seed": 0,
    "scene": {
        "n_frames": 20,
        "image_size": 64,
        "expr_dim": 8,
        "motion_seed": 7,
        "head_texture_seed": 1,
        "torso_texture_seed": 2,
        "background_color": [0.45, 0.45, 0.45],
        "expr_amplitude": 1.0,
        "pose_amplitude": 1.0,
    },
    "model": {
        "id_dim": 16,
        "ill_dim": 8,
        "w_dim": 8,
        "trunk_layers": 6,
        "trunk_width": 48,
        "head_layers": 2,
        "head_width": 24,
        "feature_dim": 8,
        "deform_layers": 3,
        "deform_width": 24,
        "l_pos_deform": 4,
        "l_pos_field": 8,
        "l_dir": 4,
        "include_raw": True,
        "upsample_factor": 4,
        "upsample_width": 16,
    },
    "render": {
        "near": 1.2,
        "far": 4.2,
        "sample_count": 64,
        "guide_halfwidth": 0.3,
    },
    "fit": {
        "total_iters": 2000,
        "learning_rate": 1.0e-3,
        "loss_alpha": 0.5,
        "eval_every": 100,
        "holdout": [],
    },
    "edit": {
        "instruction": "",
        "s_t": 12.0,
        "s_i": 1.5,
        "t_min": 0.25,
        "t_max": 0.95,
        "denoise_steps": 25,
        "total_iters": 2000,
        "learning_rate": 1.0e-3,
        "loss_alpha": 0.5,
        "eval_every": 100,
        "update_period": 10,
    },
    "eval": {
        "embedder_dim": 64,
        "embedder_seed": 0,
    },
}


def default_config() -> dict:
    return copy.deepcopy(DEFAULT_CONFIG)


def _merge(base: dict, override: dict, path: str = ""):
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where} must be a mapping")
            _merge(base[key], value, where)
        else:
            base[key] = value


def load_config(path=None, overrides=()) -> dict:
    """Defaults, optionally updated from a YAML file, then from
    ``key.subkey=value`` override strings."""
    config = default_config()
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text())
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a mapping")
        _merge(config, loaded)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        node = config
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"unknown config key: {key}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key: {key}")
        node[parts[-1]] = yaml.safe_load(raw)
    return config


def config_hash(config: dict) -> str:
    return hashlib.sha256(
        json.dumps(config, sort_keys=True).encode()).hexdigest()
