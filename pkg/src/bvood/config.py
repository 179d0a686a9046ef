"""YAML run configuration shared by the CLI commands."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .factorgen import FactorError, PartitionSpec
from .selection import SweepGrid
from .vae import VaeConfig


class ConfigError(ValueError):
    pass


SCHEMA: dict[str, dict[str, type]] = {
    "data": {"factor": str, "in_value": str, "companions": dict, "held": dict,
             "n_train": int, "n_val": int, "n_test1": int, "n_test2": int, "seed": int},
    "sweep": {"betas": list, "n_latents": list},
    "train": {"hidden": list, "learning_rate": float, "epochs": int,
              "batch_size": int, "seed": int},
    "select": {"percentile": int, "weights": list},
}

EXAMPLE = """\
data:
  factor: time-of-day
  in_value: day
  n_train: 1000
  n_val: 200
  n_test1: 100
  n_test2: 100
  seed: 0
sweep:
  betas: [1.0, 1.4, 1.8]
  n_latents: [8, 16]
train:
  hidden: [256, 64]
  learning_rate: 1.0e-4
  epochs: 20
  batch_size: 32
  seed: 0
select:
  percentile: 75
  weights: [1.0, 1.0]
"""


@dataclass
class RunConfig:
    partition: PartitionSpec
    grid: SweepGrid = field(default_factory=lambda: SweepGrid((1.0, 1.4, 1.8), (8, 16)))
    train: VaeConfig = field(default_factory=VaeConfig)
    percentile: int = 75
    weights: tuple[float, float] = (1.0, 1.0)


def _coerce(key: str, value, kind: type):
    try:
        if kind is float:
            # PyYAML reads "1e-4" as a string
            return float(value)
        if kind is int:
            if isinstance(value, bool) or float(value) != int(value):
                raise ValueError
            return int(value)
        if kind is str:
            if not isinstance(value, str):
                raise ValueError
            return value
        if not isinstance(value, kind):
            raise ValueError
        return value
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected {kind.__name__}, got {value!r}") from None


def parse_config(text: str) -> RunConfig:
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping of sections")
    vals: dict[str, dict] = {}
    for section, body in raw.items():
        if section not in SCHEMA:
            raise ConfigError(f"unknown key {section!r}")
        if not isinstance(body, dict):
            raise ConfigError(f"section {section!r} must be a mapping")
        vals[section] = {}
        for key, value in body.items():
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {section}.{key}")
            vals[section][key] = _coerce(f"{section}.{key}", value, SCHEMA[section][key])

    data = vals.get("data", {})
    if "factor" not in data or "in_value" not in data:
        raise ConfigError("data.factor and data.in_value are required")
    try:
        partition = PartitionSpec(**data)
        cfg = RunConfig(partition)
        if "sweep" in vals:
            s = vals["sweep"]
            cfg.grid = SweepGrid(tuple(s.get("betas", cfg.grid.betas)),
                                 tuple(s.get("n_latents", cfg.grid.n_latents)))
        if "train" in vals:
            t = dict(vals["train"])
            if "hidden" in t:
                t["hidden"] = tuple(t["hidden"])
            base = cfg.train
            cfg.train = VaeConfig(n_latent=base.n_latent, beta=base.beta, **{
                k: t.get(k, getattr(base, k))
                for k in ("hidden", "learning_rate", "epochs", "batch_size", "seed")})
        sel = vals.get("select", {})
        cfg.percentile = sel.get("percentile", cfg.percentile)
        if not 1 <= cfg.percentile <= 100:
            raise ConfigError("select.percentile must be in [1, 100]")
        if "weights" in sel:
            w = sel["weights"]
            if len(w) != 2:
                raise ConfigError("select.weights needs two values (mse, kl)")
            cfg.weights = (float(w[0]), float(w[1]))
    except (FactorError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
