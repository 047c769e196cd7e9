"""Run configuration: JSON files with strict schema validation.

One file fully determines a training run.  Unknown keys are rejected and
type mismatches are reported per field, so a typo cannot silently fall back
to a default.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json

from .training import TrainConfig


class ConfigError(ValueError):
    pass


_FIELD_TYPES = {
    "system": str,
    "mode": str,
    "n_rollouts": int,
    "n_samples": int,
    "batch_size": int,
    "n_updates": int,
    "buffer_capacity": int,
    "temp_start": (int, float),
    "temp_end": (int, float),
    "lr_policy": (int, float),
    "lr_w": (int, float),
    "grad_clip": (int, float),
    "indicator_kind": str,
    "indicator_sigma": (int, float),
    "hidden_width": int,
    "n_hidden": int,
    "seed": int,
    "n_steps": (int, type(None)),
    "objective_kind": str,
    "control": str,
    "use_replay": bool,
    "use_alignment": bool,
    "init_velocity": str,
}


def validate_config_dict(data: dict) -> dict:
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    problems = []
    for key in data:
        if key not in _FIELD_TYPES:
            problems.append(f"unknown field {key!r}")
    for key, value in data.items():
        if key in _FIELD_TYPES:
            expected = _FIELD_TYPES[key]
            if isinstance(value, bool) and expected is not bool and key != "n_steps":
                problems.append(f"field {key!r}: expected {expected}, got bool")
            elif not isinstance(value, expected):
                problems.append(f"field {key!r}: expected {expected}, got {type(value).__name__}")
    if problems:
        raise ConfigError("; ".join(problems))
    return data


def config_from_dict(data: dict) -> TrainConfig:
    validate_config_dict(data)
    try:
        return TrainConfig(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(filename: str) -> TrainConfig:
    try:
        with open(filename) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {filename}: {exc}") from exc
    return config_from_dict(data)


def config_to_dict(cfg: TrainConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_hash(cfg: TrainConfig) -> str:
    canon = json.dumps(config_to_dict(cfg), sort_keys=True)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def save_config(cfg: TrainConfig, filename: str) -> None:
    with open(filename, "w") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


# Benchmark defaults for the bundled systems; ``mode`` is overridden per run.
DOUBLE_WELL_DEFAULTS = TrainConfig()
CHAIN4_DEFAULTS = TrainConfig(
    system="chain4", n_rollouts=10, n_samples=64, batch_size=64, n_updates=30,
    buffer_capacity=2000, temp_start=2400.0, temp_end=1200.0,
    indicator_sigma=0.5, hidden_width=128, mode="S")
