"""Run configuration: strict JSON with unknown keys rejected (fail-fast).

Layout:

    {
      "seed": 42,
      "encoder": {...EncoderConfig fields...},
      "fusion": {...FusionConfig fields...},
      "augment": {...AugmentConfig fields...},
      "train": {lr, weight_decay, batch_size, max_epochs, patience,
                mode, class_weights}
    }

Every section is optional and defaults to the desk-scale configuration.
The same section builders reconstruct configs from a checkpoint's
configuration echo.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

from .augment import AugmentConfig
from .encoders import EncoderConfig
from .fusion import FusionConfig
from .trainer import TrainConfig


class ConfigError(Exception):
    """Invalid run configuration."""


_TOP_KEYS = ("seed", "encoder", "fusion", "augment", "train")
_TRAIN_SCALARS = ("lr", "weight_decay", "batch_size", "max_epochs", "patience",
                  "mode", "class_weights")


def _normalize_mode(mode: str) -> str:
    return mode.replace("-", "_")


def _build(cls, section: dict, where: str):
    valid = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in section.items():
        if key not in valid:
            raise ConfigError(f"unknown key {key!r} in {where}")
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def build_train_config(doc: dict, where: str = "config") -> TrainConfig:
    for key in doc:
        if key not in _TOP_KEYS:
            raise ConfigError(f"unknown key {key!r} in {where}")
    train_section = dict(doc.get("train", {}))
    for key in train_section:
        if key not in _TRAIN_SCALARS:
            raise ConfigError(f"unknown key {key!r} in {where}.train")
    if "mode" in train_section:
        train_section["mode"] = _normalize_mode(str(train_section["mode"]))
    if isinstance(train_section.get("class_weights"), list):
        train_section["class_weights"] = tuple(train_section["class_weights"])
    kwargs = dict(train_section)
    if "seed" in doc:
        kwargs["seed"] = int(doc["seed"])
    kwargs["encoder"] = _build(EncoderConfig, doc.get("encoder", {}), f"{where}.encoder")
    kwargs["fusion"] = _build(FusionConfig, doc.get("fusion", {}), f"{where}.fusion")
    kwargs["augment"] = _build(AugmentConfig, doc.get("augment", {}), f"{where}.augment")
    try:
        return TrainConfig(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def load_run_config(path=None) -> TrainConfig:
    """Parse the JSON config file, or return the defaults when absent."""
    if path is None:
        return TrainConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return build_train_config(doc, where=str(path))


def config_echo(cfg: TrainConfig) -> dict:
    """JSON-ready echo of the full configuration, stored in checkpoints."""
    return {
        "seed": cfg.seed,
        "encoder": dataclasses.asdict(cfg.encoder),
        "fusion": dataclasses.asdict(cfg.fusion),
        "augment": dataclasses.asdict(cfg.augment),
        "train": {"lr": cfg.lr, "weight_decay": cfg.weight_decay,
                  "batch_size": cfg.batch_size, "max_epochs": cfg.max_epochs,
                  "patience": cfg.patience, "mode": cfg.mode,
                  "class_weights": list(cfg.class_weights) if cfg.class_weights else None},
    }


def train_config_from_echo(echo: dict) -> TrainConfig:
    doc = {key: value for key, value in echo.items() if key in _TOP_KEYS}
    train = dict(doc.get("train", {}))
    if train.get("class_weights") is None:
        train.pop("class_weights", None)
    doc["train"] = train
    return build_train_config(doc, where="checkpoint config echo")
