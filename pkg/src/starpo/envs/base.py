"""Environment contract shared by every task.

An environment owns one episode at a time. ``reset`` loads a generated
instance and keys the episode's transition stream on ``(seed, instance_id)``;
``step`` executes an ordered list of primitive actions (one turn) while
enforcing the turn and action budgets.
"""

from __future__ import annotations

import json
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import InstanceError, LifecycleError
from ..vocab import Vocabulary


@dataclass(frozen=True)
class EnvSpec:
    action_names: tuple[str, ...]
    max_turns: int = 5
    max_actions_per_turn: int = 5
    max_actions_per_episode: int = 10

    def __post_init__(self):
        object.__setattr__(self, "action_names", tuple(self.action_names))
        if not self.action_names:
            raise ValueError("action_names must be non-empty")
        if len(set(self.action_names)) != len(self.action_names):
            raise ValueError("action_names must be unique")
        if self.max_turns < 1:
            raise ValueError("max_turns must be >= 1")
        if self.max_actions_per_turn < 1:
            raise ValueError("max_actions_per_turn must be >= 1")
        if self.max_actions_per_episode < 1:
            raise ValueError("max_actions_per_episode must be >= 1")


@dataclass(frozen=True)
class Observation:
    text: str
    tokens: tuple[int, ...]


@dataclass(frozen=True)
class StepOutcome:
    reward: float
    next_observation: Observation
    terminated: bool
    success: bool
    actions_executed: int = 0

    def __post_init__(self):
        if self.success and not self.terminated:
            raise ValueError("success implies terminated")


def episode_stream(seed: int, instance_id: int) -> np.random.Generator:
    """Counter-based (Philox) random stream keyed on ``(seed, instance_id)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(instance_id)])))


class Environment:
    """Base class; subclasses implement ``_load``, ``_apply`` and ``_render``."""

    name = "base"

    def __init__(self, spec: EnvSpec, vocab: Vocabulary, *, instance_seed: int = 0,
                 num_instances: int | None = None, instances: Sequence | None = None):
        self.spec = spec
        self.vocab = vocab
        self.instance_seed = instance_seed
        self._fixed = list(instances) if instances is not None else None
        if self._fixed is not None:
            num_instances = len(self._fixed)
        self.num_instances = num_instances
        self._cache: dict[int, object] = {}
        self._live = False
        self._terminated = False
        self.turns_taken = 0
        self.actions_taken = 0
        self.rng: np.random.Generator | None = None
        self.instance_id: int | None = None

    # -- instances ---------------------------------------------------------

    def instance(self, instance_id: int):
        if not isinstance(instance_id, (int, np.integer)) or instance_id < 0 or (
                self.num_instances is not None and instance_id >= self.num_instances):
            raise InstanceError(f"{self.name}: unknown instance_id {instance_id!r}")
        instance_id = int(instance_id)
        if instance_id not in self._cache:
            if self._fixed is not None:
                self._cache[instance_id] = self._fixed[instance_id]
            else:
                self._cache[instance_id] = self._load(instance_id)
        return self._cache[instance_id]

    def instance_record(self, instance_id: int) -> dict:
        """JSONL record ``{env, instance_id, layout, seed_hint}`` for an instance."""
        layout = self._layout(self.instance(instance_id))
        return {"env": self.name, "instance_id": int(instance_id), "layout": layout,
                "seed_hint": self._seed_hint(instance_id)}

    def _seed_hint(self, instance_id: int) -> int:
        return int(np.random.SeedSequence([self.instance_seed, instance_id]).generate_state(1)[0])

    # -- lifecycle ---------------------------------------------------------

    def reset(self, seed: int, instance_id: int) -> Observation:
        state = self.instance(instance_id)
        self.instance_id = int(instance_id)
        self.rng = episode_stream(seed, instance_id)
        self.turns_taken = 0
        self.actions_taken = 0
        self._terminated = False
        self._live = True
        self._start(state)
        return self.observe()

    @property
    def terminated(self) -> bool:
        return self._terminated

    @property
    def remaining_actions(self) -> int:
        return self.spec.max_actions_per_episode - self.actions_taken

    @property
    def exhausted(self) -> bool:
        """Episode over for budget reasons (turns or actions used up)."""
        return self.turns_taken >= self.spec.max_turns or self.remaining_actions <= 0

    @property
    def done(self) -> bool:
        return self._terminated or self.exhausted

    def observe(self) -> Observation:
        text = self._render()
        return Observation(text, tuple(self.vocab.encode(text)))

    def step(self, actions: Iterable[str]) -> StepOutcome:
        if not self._live:
            raise LifecycleError(f"{self.name}: step before reset")
        if self._terminated:
            raise LifecycleError(f"{self.name}: step after termination")
        if self.turns_taken >= self.spec.max_turns:
            raise LifecycleError(f"{self.name}: turn budget of {self.spec.max_turns} exhausted")
        self.turns_taken += 1
        # over-budget actions are truncated, not rejected
        todo = list(actions)[:max(self.remaining_actions, 0)]
        reward = 0.0
        success = False
        executed = 0
        for action in todo:
            self.actions_taken += 1
            executed += 1
            r, terminated, success = self._apply(action)
            reward += r
            if terminated:
                self._terminated = True
                break
        return StepOutcome(reward, self.observe(), self._terminated, success, executed)

    # -- subclass hooks ----------------------------------------------------

    def _load(self, instance_id: int):
        raise NotImplementedError

    def _start(self, state) -> None:
        raise NotImplementedError

    def _apply(self, action: str) -> tuple[float, bool, bool]:
        """Execute one primitive action: ``(reward, terminated, success)``."""
        raise NotImplementedError

    def _render(self) -> str:
        raise NotImplementedError

    def _layout(self, state):
        raise NotImplementedError


def write_instances(path: str | Path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def read_instances(path: str | Path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InstanceError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            missing = {"env", "instance_id", "layout"} - set(rec)
            if missing:
                raise InstanceError(f"{path}:{lineno}: missing fields {sorted(missing)}")
            records.append(rec)
    return records
