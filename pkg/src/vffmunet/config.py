"""Flat key=value run configuration with a strict schema.

Every network/training field maps to exactly one documented key.  Unknown
keys are hard errors (with the offending line number) so typos in experiment
sweeps cannot pass silently.  Command-line flags override file values.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .errors import ConfigError
from .network import NetworkConfig
from .train import TrainConfig


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_int_list(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.replace(" ", "").split(",") if x)


def _parse_size(s: str) -> tuple[int, int]:
    parts = s.lower().replace(" ", "").split("x")
    if len(parts) == 1:
        n = int(parts[0])
        return (n, n)
    if len(parts) == 2:
        return (int(parts[0]), int(parts[1]))
    raise ValueError(f"not a size: {s!r}")


def _parse_choice(*choices):
    def parse(s: str) -> str:
        v = s.strip()
        if v not in choices:
            raise ValueError(f"must be one of {choices}, got {s!r}")
        return v

    return parse


# key -> (parser, default)
SCHEMA: dict = {
    "stage_channels": (_parse_int_list, (8, 16, 24, 32, 48, 64)),
    "heads": (int, 12),
    "pooled_len": (int, 64),
    "in_channels": (int, 3),
    "input_size": (_parse_size, (256, 256)),
    "vf_mode": (_parse_choice("naive", "factored"), "factored"),
    "lr_max": (float, 1e-4),
    "lr_min": (float, 1e-5),
    "weight_decay": (float, 1e-2),
    "schedule_period": (int, 50),
    "batch_size": (int, 8),
    "epochs": (int, 1),
    "loss_weight": (float, 0.6),
    "seed": (int, 0),
    "augment": (_parse_bool, True),
    "max_steps": (int, 0),  # 0 means unlimited
    "split_ratio": (float, 0.7),
    "data_root": (str, ""),
    "run_dir": (str, "runs/default"),
    "precision": (_parse_choice("f32", "f64"), "f32"),
    "threads": (int, 1),
}


@dataclass
class RunConfig:
    values: dict

    def __getattr__(self, key):
        try:
            return self.values[key]
        except KeyError:
            raise AttributeError(key) from None

    def network(self) -> NetworkConfig:
        cfg = NetworkConfig(
            stage_channels=self.values["stage_channels"],
            heads=self.values["heads"],
            pooled_len=self.values["pooled_len"],
            in_channels=self.values["in_channels"],
            input_size=self.values["input_size"],
            vf_mode=self.values["vf_mode"],
        )
        cfg.validate()
        return cfg

    def training(self) -> TrainConfig:
        v = self.values
        cfg = TrainConfig(
            lr_max=v["lr_max"],
            lr_min=v["lr_min"],
            weight_decay=v["weight_decay"],
            schedule_period=v["schedule_period"],
            batch_size=v["batch_size"],
            epochs=v["epochs"],
            loss_weight=v["loss_weight"],
            seed=v["seed"],
            augment=v["augment"],
            max_steps=v["max_steps"] or None,
        )
        cfg.validate()
        return cfg

    @property
    def dtype(self):
        return np.float32 if self.values["precision"] == "f32" else np.float64

    def resolved_text(self) -> str:
        lines = []
        for key in SCHEMA:
            v = self.values[key]
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v) if key != "input_size" else f"{v[0]}x{v[1]}"
            lines.append(f"{key} = {v}")
        return "\n".join(lines) + "\n"


def parse_config_file(path) -> dict:
    """Read key=value lines; '#' starts a comment; unknown keys are errors."""
    values = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value, got {raw.rstrip()!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in SCHEMA:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            parser, _ = SCHEMA[key]
            try:
                values[key] = parser(value.strip())
            except (ValueError, TypeError) as e:
                raise ConfigError(f"{path}:{lineno}: bad value for {key}: {e}") from None
    return values


def make_run_config(file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults <- file values <- CLI overrides (strongest last)."""
    values = {key: default for key, (_, default) in SCHEMA.items()}
    for source in (file_values or {}), (overrides or {}):
        for key, value in source.items():
            if value is None:
                continue
            if key not in SCHEMA:
                raise ConfigError(f"unknown key {key!r}")
            values[key] = value
    return RunConfig(values)
