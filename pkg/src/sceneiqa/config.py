"""Run configuration: a YAML key-value tree with strict schema validation.

Precedence is flags > file > defaults. Unknown keys are rejected by name so
typos never silently fall back to defaults.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

import yaml


class ConfigError(ValueError):
    """Configuration file or override violates the schema."""


DEFAULTS = {
    "run_seed": 0,
    "output_dir": "runs/default",
    "dataset": {
        "manifest": "manifest.csv",
        "split": "split.txt",
        "data_root": "",          # empty: directory containing the manifest
    },
    "model": {
        "backbone": "toy_cnn",
        "input_size": 224,
        "patches_per_image": 5,
        "top_k": 5,
        "hyper_head": "hypernetwork",
        "semantic_dim": 64,
        "target_hidden": 16,
        "full_vector": False,
        "backbone_weights": "",
    },
    "train": {
        "max_epochs": 300,
        "lr_backbone": 1e-5,
        "lr_heads": 1e-4,
        "lr_rescale": 0.0,
        "decay_every": 10,
        "decay_factor": 0.05,
        "decay_mode": "complement",
        "patience": 40,
        "huber_delta": 1.0,
        "loss_weight_quality": 1.0,
        "loss_weight_class": 0.5,
        "batch_size": 8,
        "attribute": "Overall",
        "val_fraction": 0.15,
        "teacher_force_class": False,
    },
    "eval": {
        "attribute": "Overall",
        "median_mode": "standard",
        "model_name": "sceneiqa",
    },
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    def section(self, name: str) -> dict:
        return self.values[name]

    def __getitem__(self, key):
        return self.values[key]


def _merge(base: dict, override: dict, path: str = ""):
    for key, val in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {where} must be a section")
            _merge(base[key], val, where)
        else:
            if val is None:
                raise ConfigError(f"config key {where} has no value")
            expected = type(base[key])
            if expected in (int, float) and isinstance(val, (int, float)) \
                    and not isinstance(val, bool):
                base[key] = expected(val)
            elif isinstance(val, expected):
                base[key] = val
            else:
                raise ConfigError(
                    f"config key {where} expects {expected.__name__}, got {val!r}"
                )


def load_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Load a config file (or defaults if path is None) and apply overrides.

    An empty file yields the documented reference configuration.
    """
    cfg = RunConfig()
    if path is not None:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        _merge(cfg.values, raw)
    if overrides:
        _merge(cfg.values, overrides)
    return cfg


def config_help_lines() -> list[str]:
    """Every config key with its default, for --help output."""
    lines = []

    def walk(tree, prefix=""):
        for key, val in tree.items():
            where = f"{prefix}.{key}" if prefix else key
            if isinstance(val, dict):
                walk(val, where)
            else:
                lines.append(f"  {where} = {val!r}")

    walk(DEFAULTS)
    return lines
