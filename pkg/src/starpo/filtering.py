"""Uncertainty-based prompt filtering for StarPO-S.

A prompt group's uncertainty is the population standard deviation of its
trajectory rewards. Only the ceil(p * P) most uncertain groups are kept for
the update; ties go to the lower group index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import GroupSizeError
from .rollout import RolloutBatch

ZERO_STD = 1e-8


@dataclass(frozen=True)
class FilterConfig:
    retain_fraction: float = 0.25
    kl_removed: bool = True
    clip_higher: bool = True

    def __post_init__(self):
        if not 0.0 < self.retain_fraction <= 1.0:
            raise ValueError("retain_fraction must lie in (0, 1]")


@dataclass
class FilterResult:
    batch: RolloutBatch
    kept: list[int]
    uncertainties: np.ndarray
    collapse_warning: bool


def uncertainty(rewards) -> float:
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.ndim != 1 or len(rewards) < 2:
        raise GroupSizeError("uncertainty needs at least two rollouts per group")
    return float(np.sqrt(np.mean((rewards - rewards.mean()) ** 2)))


def retained_count(P: int, retain_fraction: float) -> int:
    # guard against float noise such as 0.25 * 12 = 3.0000000000000004
    return max(1, min(P, math.ceil(round(retain_fraction * P, 9))))


def filter_batch(batch: RolloutBatch, config: FilterConfig) -> FilterResult:
    U = np.array([uncertainty(r) for r in batch.group_rewards()])
    keep = retained_count(batch.P, config.retain_fraction)
    order = sorted(range(batch.P), key=lambda g: (-U[g], g))[:keep]
    kept = sorted(order)
    filtered = RolloutBatch([batch.groups[g] for g in kept], batch.policy_version,
                            [batch.instance_ids[g] for g in kept] if batch.instance_ids else [])
    return FilterResult(filtered, kept, U, bool(np.all(U < ZERO_STD)))
