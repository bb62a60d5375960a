"""Typed settings on top of the flat key-value config format.

A config file selects a profile and overrides individual fields with dotted
keys, for example:

    profile = tiny
    pipeline.lambda_enh = 0.05
    train.max_epochs = 40
    data.train_count = 96

Unknown keys and malformed values are format errors so typos fail loudly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

from . import io
from .errors import ContractError, FormatError
from .pipelines import PipelineConfig
from .training import TrainSchedule

_PROFILES = {
    "default": PipelineConfig,
    "tiny": PipelineConfig.tiny,
}

_PIPELINE_INT = ("base_channels", "enh_channels", "image_channels", "palette_size")
_PIPELINE_FLOAT = ("lambda_base", "lambda_enh", "beta")
_ENTROPY_INT = ("num_blocks", "kernel_size", "expansion_factor", "group_size")
_SCHEDULE_INT = ("plateau_patience", "early_stop_patience", "max_epochs",
                 "batch_size", "seed")
_SCHEDULE_FLOAT = ("learning_rate", "decay_factor", "min_learning_rate",
                   "min_relative_improvement", "grad_clip",
                   "validation_fraction")
_DATA_INT = ("train_count", "train_size", "eval_count", "eval_size",
             "train_seed", "eval_seed")


@dataclass(frozen=True)
class Settings:
    pipeline: PipelineConfig
    schedule: TrainSchedule
    train_count: int = 64
    train_size: int = 48
    eval_count: int = 8
    eval_size: int = 64
    train_seed: int = 1234
    eval_seed: int = 5678

    def __post_init__(self):
        if self.train_count < 2 or self.eval_count < 1:
            raise ContractError("Settings: dataset counts too small")
        if self.train_size < 16 or self.eval_size < 16:
            raise ContractError("Settings: image sizes must be >= 16")


def _to_int(key, value):
    try:
        return int(value, 10)
    except ValueError:
        raise FormatError(f"config key '{key}': expected integer, got '{value}'")


def _to_float(key, value):
    try:
        out = float(value)
    except ValueError:
        raise FormatError(f"config key '{key}': expected number, got '{value}'")
    if not math.isfinite(out):
        raise FormatError(f"config key '{key}': value must be finite")
    return out


def parse_settings(text):
    """Builds Settings from config text; every key must be recognized."""
    raw = io.parse_config_text(text)
    profile = raw.pop("profile", "default")
    if profile not in _PROFILES:
        raise FormatError(
            f"unknown profile '{profile}' (choose from {sorted(_PROFILES)})"
        )
    pipe_kw, entropy_kw, sched_kw, data_kw = {}, {}, {}, {}
    for key, value in raw.items():
        section, _, field = key.partition(".")
        if section == "pipeline" and field in _PIPELINE_INT:
            pipe_kw[field] = _to_int(key, value)
        elif section == "pipeline" and field in _PIPELINE_FLOAT:
            pipe_kw[field] = _to_float(key, value)
        elif section == "entropy" and field in _ENTROPY_INT:
            entropy_kw[field] = _to_int(key, value)
        elif section == "train" and field in _SCHEDULE_INT:
            sched_kw[field] = _to_int(key, value)
        elif section == "train" and field in _SCHEDULE_FLOAT:
            sched_kw[field] = _to_float(key, value)
        elif section == "data" and field in _DATA_INT:
            data_kw[field] = _to_int(key, value)
        else:
            raise FormatError(f"unknown config key '{key}'")

    # construction re-runs each dataclass's own validation; surface those
    # complaints as file problems, not caller bugs
    try:
        pipeline = _PROFILES[profile]()
        if entropy_kw:
            pipe_kw["entropy"] = replace(pipeline.entropy, **entropy_kw)
        if pipe_kw:
            pipeline = replace(pipeline, **pipe_kw)
        schedule = TrainSchedule(**sched_kw)
        return Settings(pipeline=pipeline, schedule=schedule, **data_kw)
    except ContractError as exc:
        raise FormatError(f"invalid config: {exc}") from exc


def load_settings(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_settings(fh.read())
