"""Run configuration: one JSON object with flat dotted keys.

Example::

    {"scene.noise_sigma": 0.05, "agent.budget": 77, "train.sequences": 50000,
     "master_seed": 0}

Missing keys take the dataclass defaults. Unknown keys are rejected.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .evaluation import ALL_METHODS, BUDGETED, EvalConfig
from .scene import ConfigError, SceneConfig
from .train import EpisodeParams, TrainConfig

KNOWN_METHODS = set(ALL_METHODS) | BUDGETED


@dataclass
class AgentConfig:
    pool_size: int = 210
    budget: int = 77
    tau_max: int = 3
    m_max: int = 10
    inlier_threshold: Optional[float] = None  # None: 2.5 x scene noise
    threshold_fraction: float = 0.1

    def validate(self):
        if self.pool_size < 1 or self.budget < 0 or self.tau_max < 0 or self.m_max < 1:
            raise ConfigError("agent: pool_size >= 1, budget >= 0, tau_max >= 0, m_max >= 1 required")
        if self.inlier_threshold is not None and self.inlier_threshold <= 0:
            raise ConfigError("agent.inlier_threshold must be positive")
        if not 0 < self.threshold_fraction <= 1:
            raise ConfigError("agent.threshold_fraction must be in (0, 1]")

    def episode_params(self) -> EpisodeParams:
        return EpisodeParams(self.budget, self.tau_max, self.m_max, self.threshold_fraction, self.inlier_threshold)


@dataclass
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    train_scene_count: int = 300
    master_seed: int = 0
    out_dir: str = "out"

    SECTIONS = ("scene", "agent", "train", "eval")

    def validate(self) -> "RunConfig":
        self.scene.validate()
        self.agent.validate()
        self.train.validate()
        if self.eval.seeds < 1 or self.eval.k_top < 1 or self.eval.workers < 1:
            raise ConfigError("eval: seeds, k_top and workers must be >= 1")
        bad = set(self.eval.methods) - KNOWN_METHODS
        if bad:
            raise ConfigError(f"unknown eval methods {sorted(bad)}")
        if self.train_scene_count < 0:
            raise ConfigError("train_scene_count must be >= 0")
        return self

    def to_flat(self) -> dict:
        out = {}
        for sec in self.SECTIONS:
            for f in fields(getattr(self, sec)):
                v = getattr(getattr(self, sec), f.name)
                out[f"{sec}.{f.name}"] = list(v) if isinstance(v, tuple) else v
        for name in ("train_scene_count", "master_seed", "out_dir"):
            out[name] = getattr(self, name)
        return out

    @classmethod
    def from_flat(cls, flat: dict) -> "RunConfig":
        return cls().with_overrides(flat)

    def with_overrides(self, flat: dict) -> "RunConfig":
        parts = {sec: {} for sec in self.SECTIONS}
        top = {}
        for key, value in flat.items():
            sec, _, name = key.partition(".")
            if name:
                if sec not in parts:
                    raise ConfigError(f"unknown config section in {key!r}")
                parts[sec][name] = value
            else:
                top[key] = value
        updated = {}
        for sec, vals in parts.items():
            current = getattr(self, sec)
            known = {f.name: getattr(current, f.name) for f in fields(current)}
            for name, v in vals.items():
                if name not in known:
                    raise ConfigError(f"unknown config key {sec}.{name}")
                vals[name] = _coerce(v, known[name], f"{sec}.{name}")
            updated[sec] = replace(current, **vals)
        for key, v in top.items():
            if key not in ("train_scene_count", "master_seed", "out_dir"):
                raise ConfigError(f"unknown config key {key}")
            updated[key] = _coerce(v, getattr(self, key), key)
        return replace(self, **updated)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_flat(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a JSON object of dotted keys")
        return cls.from_flat(data)


def _coerce(value, default, key):
    """Match the type of the default; None defaults accept numbers or None."""
    if value is None or default is None:
        return value
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(default, tuple):
            return tuple(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise TypeError
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, str):
            return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot use {value!r} where {type(default).__name__} is expected") from None
    return value


def parse_assignment(text: str) -> tuple[str, object]:
    """``key=value`` with a JSON value; bare words are taken as strings."""
    key, sep, raw = text.partition("=")
    if not sep:
        raise ConfigError(f"expected key=value, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def desk_scale() -> RunConfig:
    """Small settings that train on one CPU in minutes."""
    return RunConfig().with_overrides({
        "agent.pool_size": 32, "agent.budget": 12, "agent.tau_max": 3, "agent.m_max": 4,
        "train.lr0": 0.5, "train.sequences": 50000, "train.epochs": 30, "train.snapshot_interval": 25,
        "train.val_sequences": 1000, "eval.k_top": 4, "train_scene_count": 300,
    })
