"""Two-arm bandit with symbolic arm names (and the reversed BanditRev)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..vocab import Vocabulary
from .base import EnvSpec, Environment, StepOutcome


@dataclass(frozen=True)
class BanditConfig:
    lo_name: str = "Phoenix"
    hi_name: str = "Dragon"
    lo_reward: float = 0.15
    hi_bernoulli_p: float = 0.25
    reversed: bool = False

    def __post_init__(self):
        if self.lo_name == self.hi_name:
            raise ValueError("arm names must differ")
        if not 0.0 < self.lo_reward < 1.0:
            raise ValueError("lo_reward must lie in (0, 1)")
        if not 0.0 < self.hi_bernoulli_p < 1.0:
            raise ValueError("hi_bernoulli_p must lie in (0, 1)")
        if not self.hi_bernoulli_p > self.lo_reward:
            raise ValueError("hi arm must have the larger expected value")

    @property
    def arm_names(self) -> tuple[str, str]:
        return (self.hi_name, self.lo_name)

    def is_hi(self, arm: str) -> bool:
        """True when ``arm`` is tied to the Bernoulli distribution."""
        return (arm == self.hi_name) != self.reversed

    def expected_value(self, arm: str) -> float:
        if arm not in (self.lo_name, self.hi_name):
            raise ValueError(f"unknown arm {arm!r}")
        return self.hi_bernoulli_p if self.is_hi(arm) else self.lo_reward

    def pull(self, arm: str, rng: np.random.Generator) -> tuple[float, bool]:
        """Reward and whether the draw came from the hi distribution.

        Unknown labels pay 0 and count as a miss.
        """
        if arm not in (self.lo_name, self.hi_name):
            return 0.0, False
        if self.is_hi(arm):
            return float(rng.random() < self.hi_bernoulli_p), True
        return self.lo_reward, False


def bandit_vocab(config: BanditConfig, think_size: int = 4) -> Vocabulary:
    return Vocabulary.build(config.arm_names, [" ", "\n"], think_size)


class BanditEnv(Environment):
    """Single-turn episodes: the first pull ends the episode."""

    name = "bandit"

    def __init__(self, config: BanditConfig | None = None, spec: EnvSpec | None = None,
                 vocab: Vocabulary | None = None, **kwargs):
        self.config = config or BanditConfig()
        spec = spec or EnvSpec(self.config.arm_names)
        super().__init__(spec, vocab or bandit_vocab(self.config), **kwargs)
        if self.config.reversed:
            self.name = "bandit-rev"

    def _load(self, instance_id: int):
        # one prompt state shared by every instance
        return self.config.arm_names

    def _start(self, state) -> None:
        self._arms = state

    def _render(self) -> str:
        return " ".join(self._arms)

    def _layout(self, state):
        return list(state)

    def pull(self, arm: str) -> StepOutcome:
        return self.step([arm])

    def _apply(self, action: str) -> tuple[float, bool, bool]:
        reward, hi = self.config.pull(action, self.rng)
        return reward, True, hi

    def expected_value(self, arm: str) -> float:
        return self.config.expected_value(arm)
