"""Flat ``key = value`` run configuration.

Every training, sampling, augmentation and encoder knob lives in one
namespace so a run is described by a single text file.  Flags given on
the command line override file values.
"""
from __future__ import annotations

import dataclasses
import os
from pathlib import Path
from typing import Any

from .data import AugmentPolicy, SamplerConfig
from .model import EncoderConfig
from .training import TrainConfig


class ConfigKeyError(ValueError):
    pass


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in str(text).replace(" ", "").split(",") if v)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in str(text).replace(" ", "").split(",") if v)


# key -> (parser, default, help)
SCHEMA: dict[str, tuple[Any, Any, str]] = {
    "seed": (int, None, "global seed (falls back to $COREECHO_SEED, then 0)"),
    "dtype": (str, "float64", "float64 or float32"),
    "workers": (int, 1, "data worker threads"),
    "plan": (str, "coreecho", "coreecho or l1 (plain end-to-end L1 baseline)"),
    "batch_size": (int, 16, "videos per batch (N)"),
    "stage1_epochs": (int, 25, "first-stage epochs"),
    "stage2_epochs": (int, 5, "second-stage epochs"),
    "transfer_epochs": (int, 100, "probe / fine-tune epochs"),
    "tau": (float, 1.0, "RnC temperature"),
    "lr": (float, 1e-4, "base learning rate"),
    "stage2_lr": (float, None, "second-stage learning rate (default: lr)"),
    "weight_decay": (float, 1e-4, "decoupled weight decay"),
    "optimizer": (str, "adamw", "adamw or sgd"),
    "betas": (_floats, (0.9, 0.999), "AdamW betas"),
    "eps": (float, 1e-8, "AdamW epsilon"),
    "momentum": (float, 0.9, "SGD momentum"),
    "scheduler": (str, "step", "step or none"),
    "step_size": (int, 15, "step LR period in epochs"),
    "gamma": (float, 0.1, "step LR decay factor"),
    "dropout": (float, 0.4, "head dropout rate"),
    "loss": (str, "l1", "transfer loss: l1, mse or bce"),
    "val_clips": (int, 1, "clips averaged per video during validation"),
    "clip_frames": (int, 36, "frames per clip (F_c)"),
    "stride": (int, 4, "temporal sampling stride (T)"),
    "augment": (str, "pad-crop", "pad-crop, affine or none"),
    "pad_fraction": (float, 6 / 112, "pad-crop padding per side as a fraction of frame size"),
    "rotation": (float, 20.0, "affine max rotation (degrees)"),
    "scale_min": (float, 0.8, "affine min scale"),
    "scale_max": (float, 1.1, "affine max scale"),
    "translation": (float, 0.1, "affine max translation (fraction of size)"),
    "widths": (_ints, (8, 16, 32), "encoder channel widths"),
    "temporal_strides": (_ints, (2, 2, 2), "encoder temporal stride per block"),
    "embed_dim": (int, 512, "embedding width C_E"),
}


def defaults() -> dict[str, Any]:
    return {k: v[1] for k, v in SCHEMA.items()}


def parse_value(key: str, raw: str):
    if key not in SCHEMA:
        raise ConfigKeyError(f"unknown config key {key!r}")
    parser = SCHEMA[key][0]
    if raw is None or str(raw).strip().lower() in ("", "none"):
        return None
    try:
        return parser(raw)
    except ValueError as exc:
        raise ConfigKeyError(f"bad value for {key}: {raw!r}") from exc


def read_config(path) -> dict[str, Any]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigKeyError(f"{path}:{lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        out[key] = parse_value(key, raw)
    return out


def format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return str(value)


def write_config(path, values: dict[str, Any]) -> None:
    lines = [f"{k} = {format_value(values[k])}" for k in SCHEMA if k in values]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def resolve(file_values: dict | None = None, overrides: dict | None = None) -> dict[str, Any]:
    """defaults < config file < explicit overrides; seed falls back to the env."""
    values = defaults()
    for src in (file_values or {}, overrides or {}):
        for k, v in src.items():
            if k not in SCHEMA:
                raise ConfigKeyError(f"unknown config key {k!r}")
            if v is not None:
                values[k] = v
    if values["seed"] is None:
        values["seed"] = int(os.environ.get("COREECHO_SEED", 0))
    return values


def train_config(values: dict) -> TrainConfig:
    names = {f.name for f in dataclasses.fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in values.items() if k in names})


def sampler_config(values: dict) -> SamplerConfig:
    return SamplerConfig(values["clip_frames"], values["stride"])


def augment_policy(values: dict) -> AugmentPolicy:
    return AugmentPolicy(values["augment"], values["pad_fraction"], values["rotation"],
                         (values["scale_min"], values["scale_max"]), values["translation"])


def encoder_config(values: dict, height: int, width: int, channels: int) -> EncoderConfig:
    return EncoderConfig(frames=values["clip_frames"], height=height, width=width, channels=channels,
                         widths=values["widths"], temporal_strides=values["temporal_strides"],
                         embed_dim=values["embed_dim"])
