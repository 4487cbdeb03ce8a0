"""Layered run configuration: built-in defaults, then a YAML/JSON config
file, then command-line overrides, in that order. Every key must already
exist in the defaults tree - typos fail loudly instead of silently training
with a default. The fully resolved tree is plain JSON-serializable data and
is echoed into every artifact a run produces.
"""

from __future__ import annotations

import copy
import json
import os
from pathlib import Path

import yaml

from photostyle.evaluation import EvalConfig
from photostyle.model import ModelConfig
from photostyle.taxonomy import StyleTaxonomy, ava14, load_taxonomy
from photostyle.training import TrainConfig

CACHE_DIR_ENV = "PHOTOSTYLE_CACHE_DIR"


class ConfigError(ValueError):
    """Malformed configuration file, unknown key, or invalid value."""


DEFAULTS: dict = {
    "data": {
        "manifest": None,
        "taxonomy": "ava14",
        "image_root": ".",
        "saliency_root": None,
        "cache_dir": None,
        "jobs": 1,
    },
    "saliency": {
        "working_long_side": 64,
        "smooth_sigma": 2.5,
        "center_prior_weight": 0.0,
        "center_prior_sigma_frac": 0.25,
    },
    "model": {
        "columns": ["saliency", "rgb_patch"],
        "backbone": "toy",
        "fusion_dim": 512,
        "dropout_rate": 0.5,
        "saliency_projection_dim": None,
        "pretrained_backbone": False,
        "init_seed": 0,
    },
    "train": {
        "epochs": 30,
        "batch_size": 32,
        "base_lr": 1e-3,
        "head_lr": 1e-2,
        "momentum": 0.9,
        "weight_decay": 1e-4,
        "lr_decay_factor": 0.1,
        "lr_decay_every": 10,
        "global_seed": 0,
        "class_weighting": False,
        "freeze_backbone": False,
        "patience": None,
        "resize_short": 256,
        "crop": "random",
        "crop_size": 224,
        "hflip": True,
        "saliency_input": "aligned",
        "val_fraction": 0.1,
        "checkpoint_dir": "runs/default",
    },
    "eval": {
        "patch_policy": "grid",
        "patch_size": 224,
        "patch_count": 50,
        "resize_short": 256,
        "global_seed": 0,
        "saliency_input": "aligned",
        "batch_size": 50,
        "checkpoint": None,
        "out_dir": "runs/default/eval",
        "figures": True,
    },
}


def load_config_file(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        payload = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if payload is None:
        return {}
    if not isinstance(payload, dict):
        raise ConfigError(f"{path}: top level must be a mapping of sections")
    return payload


def merge_config(base: dict, override: dict, prefix: str = "") -> dict:
    """Recursively overlay `override` onto a copy of `base`, rejecting keys
    that the base tree does not define."""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        dotted = f"{prefix}{key}"
        if key not in merged:
            raise ConfigError(f"unknown config key '{dotted}'")
        if isinstance(merged[key], dict) and not isinstance(value, (dict, type(None))):
            raise ConfigError(f"config key '{dotted}' must be a mapping")
        if isinstance(merged[key], dict):
            merged[key] = merge_config(merged[key], value or {}, prefix=f"{dotted}.")
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def parse_set_option(text: str) -> tuple[list[str], object]:
    """'train.epochs=5' -> (['train', 'epochs'], 5), values parsed as YAML."""
    if "=" not in text:
        raise ConfigError(f"--set expects section.key=value, got '{text}'")
    dotted, raw = text.split("=", 1)
    keys = [k for k in dotted.strip().split(".") if k]
    if len(keys) < 2:
        raise ConfigError(f"--set key must be section.key, got '{dotted}'")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse --set value '{raw}': {exc}") from exc
    return keys, value


def apply_set(config: dict, keys: list[str], value) -> None:
    node = config
    for i, key in enumerate(keys[:-1]):
        if key not in node or not isinstance(node[key], dict):
            raise ConfigError(f"unknown config section '{'.'.join(keys[: i + 1])}'")
        node = node[key]
    leaf = keys[-1]
    if leaf not in node:
        raise ConfigError(f"unknown config key '{'.'.join(keys)}'")
    if isinstance(node[leaf], dict):
        raise ConfigError(f"config key '{'.'.join(keys)}' is a section, not a value")
    node[leaf] = value


def resolve_config(
    config_file: str | Path | None = None,
    set_options: list[str] | None = None,
    env: dict | None = None,
) -> dict:
    """defaults < file < --set flags, then environment overrides for the
    cache directory. Returns a plain JSON-serializable tree."""
    resolved = copy.deepcopy(DEFAULTS)
    if config_file is not None:
        resolved = merge_config(resolved, load_config_file(config_file))
    for option in set_options or []:
        keys, value = parse_set_option(option)
        apply_set(resolved, keys, value)
    env = os.environ if env is None else env
    cache_override = env.get(CACHE_DIR_ENV)
    if cache_override:
        resolved["data"]["cache_dir"] = cache_override
    return resolved


def serialize_config(config: dict) -> str:
    return json.dumps(config, indent=2, sort_keys=True)


def taxonomy_from(config: dict) -> StyleTaxonomy:
    """'ava14' builtin or a path to a one-class-per-line file."""
    spec = config["data"]["taxonomy"]
    if spec == "ava14":
        return ava14()
    path = Path(spec)
    if not path.exists():
        raise ConfigError(f"taxonomy '{spec}' is neither a builtin name nor an existing file")
    return load_taxonomy(path)


def model_config_from(config: dict, num_classes: int) -> ModelConfig:
    section = config["model"]
    return ModelConfig(
        columns=tuple(section["columns"]),
        num_classes=num_classes,
        backbone_id=section["backbone"],
        fusion_dim=section["fusion_dim"],
        dropout_rate=section["dropout_rate"],
        saliency_projection_dim=section["saliency_projection_dim"],
        pretrained_backbone=section["pretrained_backbone"],
        init_seed=section["init_seed"],
    )


def train_config_from(config: dict) -> TrainConfig:
    section = dict(config["train"])
    section.pop("checkpoint_dir", None)
    return TrainConfig(**section)


def eval_config_from(config: dict) -> EvalConfig:
    section = dict(config["eval"])
    section.pop("checkpoint", None)
    section.pop("out_dir", None)
    section.pop("figures", None)
    return EvalConfig(**section, jobs=config["data"]["jobs"])
