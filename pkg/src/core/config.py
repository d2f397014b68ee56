from pathlib import Path
from typing import Any, Dict, Optional

import yaml
from dotmap import DotMap

from src.core.errors import ConfigError
from src.utils.helpers import merge_configs

# Every accepted key. None means "derived elsewhere" (variant preset or recipe).
DEFAULT_CONFIG: Dict[str, Any] = {
    "seed": 0,
    "output_dir": "runs/default",
    "logging": {
        "level": "INFO",
        "file": "logs/swinct.log",
    },
    "model": {
        "variant": "swin-t",
        "img_size": None,
        "patch_size": None,
        "in_channels": None,
        "embed_dim": None,
        "depths": None,
        "num_heads": None,
        "window_size": None,
        "mlp_ratio": None,
        "drop_path_rate": None,
        "num_classes": 2,
    },
    "pipeline": {
        "task": "classification",
        "crop_size": 48,
        "expand_factor": 40,
        "negative_fraction": 0.2,
        "negatives_per_volume": 4,
        "positive_slices": "center",
        "paper_splits": False,
        "hu_window": [-1000.0, 400.0],
        "cls_ratios": [6.0, 1.2, 1.0],
        "cls_fractions": [0.78, 0.06, 0.16],
        "seg_ratios": [8, 1, 1],
        "phantom": {
            "size": 64,
            "nodule_prob": 0.5,
        },
    },
    "train": {
        "recipe": "regular",
        "epochs": None,
        "iterations": None,
        "batch_size": None,
        "base_lr": None,
        "weight_decay": None,
        "warmup": None,
        "eval_interval": None,
        "ema": False,
        "ema_decay": 0.9999,
        "ema_eval": False,
        "clip_grad": None,
        "dtype": "float64",
        "init": None,
    },
}

TASKS = ("classification", "segmentation")
POSITIVE_SLICE_POLICIES = ("center", "through_nodule", "all")
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


def load_config(config_path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> DotMap:
    """
    Load a RunConfig document (YAML or JSON) and merge it onto the defaults.

    Args:
        config_path: Path to the configuration file; None uses defaults only.
        overrides: Nested mapping applied after the file (CLI flags).

    Returns:
        DotMap: The validated configuration.

    Raises:
        ConfigError: Missing file, parse failure, unknown keys or bad values.
    """
    user_config: Dict[str, Any] = {}
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f"Configuration file not found: {config_path}")
        with open(path, "r", encoding="utf-8") as f:
            try:
                user_config = yaml.safe_load(f) or {}
            except yaml.YAMLError as e:
                raise ConfigError(f"Cannot parse configuration {config_path}: {e}")
        if not isinstance(user_config, dict):
            raise ConfigError(f"Configuration {config_path} must be a mapping at the top level")

    merged = merge_configs(DEFAULT_CONFIG, user_config)
    if overrides:
        merged = merge_configs(merged, overrides)
    validate_config(merged)
    return DotMap(merged, _dynamic=False)


def apply_overrides(cfg: DotMap, overrides: Dict[str, Any]) -> DotMap:
    """Merge further overrides onto an already loaded configuration and revalidate it."""
    merged = merge_configs(cfg.toDict(), overrides)
    validate_config(merged)
    return DotMap(merged, _dynamic=False)


def validate_config(cfg: Dict[str, Any]) -> None:
    """Cross-field checks that defaults-by-type cannot express."""
    if cfg["logging"]["level"] not in LOG_LEVELS:
        raise ConfigError(f"logging.level must be one of {LOG_LEVELS}")
    pipeline = cfg["pipeline"]
    if pipeline["task"] not in TASKS:
        raise ConfigError(f"pipeline.task must be one of {TASKS}")
    if pipeline["positive_slices"] not in POSITIVE_SLICE_POLICIES:
        raise ConfigError(f"pipeline.positive_slices must be one of {POSITIVE_SLICE_POLICIES}")
    if pipeline["expand_factor"] < 1:
        raise ConfigError("pipeline.expand_factor must be >= 1")
    if not 0 < pipeline["negative_fraction"] <= 1:
        raise ConfigError("pipeline.negative_fraction must be in (0, 1]")
    if pipeline["negatives_per_volume"] < 0:
        raise ConfigError("pipeline.negatives_per_volume must be >= 0")
    if pipeline["crop_size"] < 2:
        raise ConfigError("pipeline.crop_size must be >= 2")
    if pipeline["phantom"]["size"] < 16:
        raise ConfigError("pipeline.phantom.size must be >= 16")
    if not 0.0 <= pipeline["phantom"]["nodule_prob"] <= 1.0:
        raise ConfigError("pipeline.phantom.nodule_prob must be in [0, 1]")
    for key in ("cls_ratios", "cls_fractions", "seg_ratios"):
        if len(pipeline[key]) != 3 or any(v < 0 for v in pipeline[key]):
            raise ConfigError(f"pipeline.{key} needs three non-negative values (train, val, test)")
    if any(v <= 0 for v in pipeline["cls_ratios"]):
        raise ConfigError("pipeline.cls_ratios must be positive")
    low, high = pipeline["hu_window"]
    if not low < high:
        raise ConfigError("pipeline.hu_window must be increasing")
    if cfg["train"]["dtype"] not in ("float32", "float64"):
        raise ConfigError("train.dtype must be float32 or float64")
    if not 0.0 <= cfg["train"]["ema_decay"] <= 1.0:
        raise ConfigError("train.ema_decay must be in [0, 1]")
