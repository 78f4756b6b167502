"""Environments and a small name-based factory."""

from __future__ import annotations

from .bandit import BanditConfig, BanditEnv, bandit_vocab
from .base import EnvSpec, Environment, Observation, StepOutcome, read_instances, write_instances
from .frozenlake import FrozenLakeEnv, LakeGrid, lake_vocab
from .sokoban import SokobanEnv, SokobanGrid, SokobanVariant, VARIANTS, sokoban_vocab

ENV_NAMES = ("bandit", "bandit-rev", "sokoban", "sokoban-newvocab", "sokoban-large", "frozenlake")


def family(name: str) -> str:
    if name not in ENV_NAMES:
        raise ValueError(f"unknown environment {name!r}; expected one of {ENV_NAMES}")
    return name.split("-")[0]


def make_vocab(name: str, think_size: int = 4, bandit: BanditConfig | None = None):
    fam = family(name)
    if fam == "bandit":
        return bandit_vocab(bandit or BanditConfig(), think_size)
    if fam == "sokoban":
        return sokoban_vocab(think_size)
    return lake_vocab(think_size)


def make_env(name: str, *, vocab=None, max_turns: int = 5, max_actions_per_turn: int = 5,
             max_actions_per_episode: int = 10, instance_seed: int = 0, num_instances: int | None = None,
             instances=None, bandit: BanditConfig | None = None, state_reward: bool = False,
             lake_size: tuple[int, int] = (4, 4), hole_prob: float = 0.2) -> Environment:
    fam = family(name)
    kwargs = dict(instance_seed=instance_seed, num_instances=num_instances, instances=instances)
    budget = dict(max_turns=max_turns, max_actions_per_turn=max_actions_per_turn,
                  max_actions_per_episode=max_actions_per_episode)
    if fam == "bandit":
        cfg = bandit or BanditConfig()
        if name == "bandit-rev" and not cfg.reversed:
            cfg = BanditConfig(cfg.lo_name, cfg.hi_name, cfg.lo_reward, cfg.hi_bernoulli_p, True)
        return BanditEnv(cfg, EnvSpec(cfg.arm_names, **budget), vocab or bandit_vocab(cfg), **kwargs)
    if fam == "sokoban":
        variant = {"sokoban": VARIANTS["default"], "sokoban-newvocab": VARIANTS["newvocab"],
                   "sokoban-large": VARIANTS["large"]}[name]
        from .sokoban import ACTIONS
        return SokobanEnv(variant, EnvSpec(ACTIONS, **budget), vocab or sokoban_vocab(),
                          state_reward=state_reward, **kwargs)
    from .frozenlake import ACTIONS
    return FrozenLakeEnv(EnvSpec(ACTIONS, **budget), vocab or lake_vocab(), size=lake_size,
                         hole_prob=hole_prob, **kwargs)


__all__ = [
    "BanditConfig", "BanditEnv", "EnvSpec", "Environment", "FrozenLakeEnv", "LakeGrid", "Observation",
    "SokobanEnv", "SokobanGrid", "SokobanVariant", "StepOutcome", "ENV_NAMES", "family", "make_env",
    "make_vocab", "read_instances", "write_instances",
]
