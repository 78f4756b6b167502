"""Experiment configuration: TOML sections mapped onto dataclasses.

Sections: ``[env]``, ``[bandit]``, ``[rollout]``, ``[policy]``,
``[optimize]``, ``[starpo_s]``, ``[diagnostics]`` and ``[train]``. Unknown
keys and invalid values raise :class:`ConfigError` naming the field path.
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .diagnostics import CollapseConfig
from .envs import ENV_NAMES, BanditConfig
from .errors import ConfigError
from .filtering import FilterConfig
from .optimize import OptimizeConfig, gradient_shaping_preset

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

ALGORITHMS = ("starpo-ppo", "starpo-grpo", "starpo-s-ppo", "starpo-s-grpo")
STARPO_S_RETAIN = 0.25


@dataclass
class EnvSection:
    name: str = "bandit"
    instance_seed: int = 1
    eval_seed: int = 2
    num_train_instances: int = 10_000
    eval_size: int = 256
    instances_file: str | None = None
    state_reward: bool = False
    lake_size: list[int] = field(default_factory=lambda: [4, 4])
    hole_prob: float = 0.2

    def validate(self):
        if self.name not in ENV_NAMES:
            raise ValueError(f"must be one of {ENV_NAMES}")
        if self.num_train_instances < 1 or self.eval_size < 1:
            raise ValueError("instance counts must be >= 1")
        if len(self.lake_size) != 2 or min(self.lake_size) < 2:
            raise ValueError("lake_size must be two integers >= 2")
        if not 0.0 <= self.hole_prob < 1.0:
            raise ValueError("hole_prob must lie in [0, 1)")


@dataclass
class BanditSection:
    lo_name: str = "Phoenix"
    hi_name: str = "Dragon"
    lo_reward: float = 0.15
    hi_p: float = 0.25
    reversed: bool = False

    def build(self) -> BanditConfig:
        return BanditConfig(self.lo_name, self.hi_name, self.lo_reward, self.hi_p, self.reversed)

    def validate(self):
        self.build()


@dataclass
class RolloutSection:
    P: int = 8
    N: int = 16
    max_turns: int = 5
    max_actions_per_turn: int = 5
    max_actions_per_episode: int = 10
    online_k: int = 1
    temperature: float = 1.0
    max_response_tokens: int = 16
    think_required: bool = True
    response_mask: bool = True

    def validate(self):
        if self.P < 1 or self.N < 1:
            raise ValueError("P and N must be >= 1")
        if self.N < 2:
            raise ValueError("N must be >= 2 for group statistics")
        if self.max_turns < 1 or self.max_actions_per_turn < 1 or self.max_actions_per_episode < 1:
            raise ValueError("turn and action budgets must be >= 1")
        if self.online_k < 1:
            raise ValueError("online_k must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.max_response_tokens < 1:
            raise ValueError("max_response_tokens must be >= 1")


@dataclass
class PolicySection:
    embed_dim: int = 8
    hidden: int = 64
    window: int = 48
    think_vocab: int = 4
    init_scale: float = 0.05
    seed: int = 0

    def validate(self):
        if min(self.embed_dim, self.hidden, self.window) < 1:
            raise ValueError("dimensions must be >= 1")
        if self.think_vocab < 0:
            raise ValueError("think_vocab must be >= 0")


@dataclass
class StarpoSSection:
    retain_fraction: float | None = None
    preset: bool | None = None

    def validate(self):
        if self.retain_fraction is not None and not 0.0 < self.retain_fraction <= 1.0:
            raise ValueError("retain_fraction must lie in (0, 1]")


@dataclass
class DiagnosticsSection:
    warn_std_floor: float = 0.05
    warn_patience: int = 5
    spike_factor: float = 10.0
    spike_window: int = 50
    min_history: int = 10
    erratic_flips: int | None = None
    erratic_window: int = 10

    def build(self) -> CollapseConfig:
        return CollapseConfig(**dataclasses.asdict(self))

    def validate(self):
        if self.warn_patience < 1 or self.spike_window < 1 or self.min_history < 1:
            raise ValueError("window sizes must be >= 1")
        if self.spike_factor <= 1:
            raise ValueError("spike_factor must be > 1")


@dataclass
class TrainSection:
    algorithm: str = "starpo-grpo"
    loops: int = 125
    seed: int = 0
    eval_interval: int = 1
    eval_temperature: float = 0.5
    halt_on_collapse: bool = False
    checkpoint_interval: int = 0
    workers: int = 1
    log_trajectories: bool = True

    def validate(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"must be one of {ALGORITHMS}")
        if self.loops < 1 or self.eval_interval < 1 or self.workers < 1:
            raise ValueError("loops, eval_interval and workers must be >= 1")
        if self.eval_temperature <= 0:
            raise ValueError("eval_temperature must be > 0")


SECTIONS = {
    "env": EnvSection, "bandit": BanditSection, "rollout": RolloutSection, "policy": PolicySection,
    "optimize": OptimizeConfig, "starpo_s": StarpoSSection, "diagnostics": DiagnosticsSection,
    "train": TrainSection,
}


@dataclass
class ExperimentConfig:
    env: EnvSection = field(default_factory=EnvSection)
    bandit: BanditSection = field(default_factory=BanditSection)
    rollout: RolloutSection = field(default_factory=RolloutSection)
    policy: PolicySection = field(default_factory=PolicySection)
    optimize: OptimizeConfig = field(default_factory=OptimizeConfig)
    starpo_s: StarpoSSection = field(default_factory=StarpoSSection)
    diagnostics: DiagnosticsSection = field(default_factory=DiagnosticsSection)
    train: TrainSection = field(default_factory=TrainSection)

    @property
    def mode(self) -> str:
        return "ppo" if self.train.algorithm.endswith("ppo") else "grpo"

    @property
    def stabilized(self) -> bool:
        return self.train.algorithm.startswith("starpo-s")

    def filter_config(self) -> FilterConfig:
        default = STARPO_S_RETAIN if self.stabilized else 1.0
        p = self.starpo_s.retain_fraction if self.starpo_s.retain_fraction is not None else default
        preset = self.preset_enabled()
        return FilterConfig(p, kl_removed=preset, clip_higher=preset)

    def preset_enabled(self) -> bool:
        return self.starpo_s.preset if self.starpo_s.preset is not None else self.stabilized

    def effective_optimize(self) -> OptimizeConfig:
        return gradient_shaping_preset(self.optimize) if self.preset_enabled() else self.optimize

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config root must be a table")
        sections = {}
        for name, value in data.items():
            if name not in SECTIONS:
                raise ConfigError(f"{name}: unknown section")
            if not isinstance(value, dict):
                raise ConfigError(f"{name}: expected a table")
            sections[name] = _build_section(name, SECTIONS[name], value)
        cfg = cls(**sections)
        for name in SECTIONS:
            section = getattr(cfg, name)
            if hasattr(section, "validate"):
                try:
                    section.validate()
                except ValueError as exc:
                    raise ConfigError(f"{name}: {exc}") from None
        return cfg


def _build_section(name: str, cls, values: dict):
    known = {f.name: f for f in fields(cls)}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"{name}.{key}: unknown key")
        default = _default(known[key])
        if default is not None and value is not None and not _compatible(default, value):
            raise ConfigError(f"{name}.{key}: expected {type(default).__name__}, got {type(value).__name__}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


def _default(f: dataclasses.Field):
    if f.default is not dataclasses.MISSING:
        return f.default
    if f.default_factory is not dataclasses.MISSING:
        return f.default_factory()
    return None


def _compatible(default, value) -> bool:
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    return isinstance(value, type(default))


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return ExperimentConfig.from_dict(data)
