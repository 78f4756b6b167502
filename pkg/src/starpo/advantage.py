"""Advantage estimators: GAE over per-turn rewards, and group-normalized GRPO.

Rewards arrive at turn boundaries, so GAE runs over the turn sequence of a
trajectory with one value estimate per turn (read at the turn's first
generated token). Per-turn or per-trajectory advantages are then copied onto
the tokens that enter the loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GroupSizeError, NumericError, ShapeError
from .policy import windows
from .rollout import Trajectory

STD_EPS = 1e-8


@dataclass(frozen=True)
class GaeConfig:
    gamma: float = 1.0
    lam: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.lam <= 1.0):
            raise ValueError("gamma and lambda must lie in [0, 1]")


@dataclass
class AdvantageTensor:
    """Per-trajectory advantages aligned with each trajectory's loss mask."""

    values: list[np.ndarray]
    estimator: str

    def __post_init__(self):
        if self.estimator not in ("GAE", "GRPO"):
            raise ValueError(f"unknown estimator {self.estimator!r}")
        for v in self.values:
            if not np.all(np.isfinite(v)):
                raise NumericError("non-finite advantage")


def gae(rewards, values, config: GaeConfig = GaeConfig()) -> np.ndarray:
    """A_t = sum_l (gamma*lam)^l delta_{t+l}, delta_t = r_t + gamma V_{t+1} - V_t, V_T = 0."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if rewards.shape != values.shape or rewards.ndim != 1:
        raise ShapeError(f"rewards {rewards.shape} and values {values.shape} must be aligned 1-D streams")
    next_values = np.append(values[1:], 0.0)
    deltas = rewards + config.gamma * next_values - values
    out = np.empty_like(deltas)
    acc = 0.0
    decay = config.gamma * config.lam
    for t in range(len(deltas) - 1, -1, -1):
        acc = deltas[t] + decay * acc
        out[t] = acc
    return out


def critic_targets(rewards, gamma: float = 1.0) -> np.ndarray:
    """Discounted reward-to-go at every position."""
    rewards = np.asarray(rewards, dtype=np.float64)
    out = np.empty_like(rewards)
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def grpo_advantage(rewards) -> np.ndarray:
    """(R - mean) / std within one group, population std; zero for degenerate groups."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.ndim != 1 or len(rewards) < 2:
        raise GroupSizeError("group normalization needs at least two rewards")
    centered = rewards - rewards.mean()
    std = np.sqrt(np.mean(centered ** 2))
    if std < STD_EPS:
        return np.zeros_like(rewards)
    return centered / std


def broadcast_to_tokens(advantage, trajectory: Trajectory, all_tokens: bool = False) -> np.ndarray:
    """Copy a scalar (GRPO) or per-turn (GAE) advantage onto the loss tokens."""
    mask = trajectory.loss_mask(all_tokens)
    turn_of = trajectory.turn_of[mask]
    adv = np.asarray(advantage, dtype=np.float64)
    if adv.ndim == 0:
        return np.full(len(turn_of), float(adv))
    if len(adv) != len(trajectory.turns):
        raise ShapeError(f"{len(adv)} per-turn advantages for {len(trajectory.turns)} turns")
    return adv[turn_of]


def turn_values(policy, trajectory: Trajectory) -> np.ndarray:
    """Critic estimate at each turn's first generated token."""
    ctx = windows(trajectory.tokens, policy.window, policy.vocab.pad_id)[trajectory.turn_starts()]
    return policy.forward(ctx).values


def grpo_tensor(groups: list[list[Trajectory]], all_tokens: bool = False) -> AdvantageTensor:
    out = []
    for group in groups:
        adv = grpo_advantage([t.total_reward for t in group])
        out.extend(broadcast_to_tokens(a, t, all_tokens) for a, t in zip(adv, group))
    return AdvantageTensor(out, "GRPO")


def gae_tensor(policy, trajectories: list[Trajectory], config: GaeConfig = GaeConfig(),
               all_tokens: bool = False) -> tuple[AdvantageTensor, list[np.ndarray]]:
    """GAE advantages plus the critic regression targets for each trajectory."""
    advs, targets = [], []
    for traj in trajectories:
        rewards = traj.turn_rewards
        advs.append(broadcast_to_tokens(gae(rewards, turn_values(policy, traj), config), traj, all_tokens))
        targets.append(critic_targets(rewards, config.gamma))
    return AdvantageTensor(advs, "GAE"), targets
