"""Multi-turn rollout collection.

Every turn: render the observation, prefill the assistant prefix, sample a
response, parse it, then either step the environment or charge the format
penalty. Episodes end on termination, on the turn limit, or when the
environment's action budget is spent. All episodes of a batch advance in
lockstep so that one forward pass serves every active sequence.

Randomness is keyed per trajectory on ``(seed, policy_version, group,
rollout)``, so results do not depend on how groups are split across workers.
"""

from __future__ import annotations

import copy
import json
from collections.abc import Callable, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .envs.base import Environment
from .policy import Policy
from .protocol import ParseOutcome, parse
from .vocab import ANSWER_CLOSE, THINK_OPEN


@dataclass(frozen=True)
class RolloutSettings:
    temperature: float = 1.0
    max_response_tokens: int = 16
    think_required: bool = True
    # score prompt/observation tokens too, for training without response masking
    score_all_tokens: bool = False


@dataclass
class Turn:
    observation: tuple[int, ...]
    prompt: tuple[int, ...]
    generated: tuple[int, ...]
    parse: ParseOutcome
    executed: tuple[str, ...]
    reward: float
    start: int

    @property
    def think_length(self) -> int:
        return len(self.parse.response.think_tokens) if self.parse.format_ok else 0


@dataclass
class Trajectory:
    instance_id: int
    group: int
    turns: list[Turn]
    tokens: np.ndarray
    logprobs: np.ndarray
    generated: np.ndarray
    turn_of: np.ndarray
    entropies: np.ndarray
    success: bool
    policy_version: int = 0

    @property
    def total_reward(self) -> float:
        return float(sum(t.reward for t in self.turns))

    @property
    def turn_rewards(self) -> np.ndarray:
        return np.array([t.reward for t in self.turns])

    @property
    def num_generated(self) -> int:
        return int(self.generated.sum())

    @property
    def think_length(self) -> int:
        return sum(t.think_length for t in self.turns)

    @property
    def num_actions(self) -> int:
        return sum(len(t.executed) for t in self.turns)

    def turn_starts(self) -> np.ndarray:
        return np.array([t.start for t in self.turns], dtype=np.int64)

    def loss_mask(self, all_tokens: bool = False) -> np.ndarray:
        return np.ones_like(self.generated) if all_tokens else self.generated.copy()

    def to_dict(self, vocab=None) -> dict:
        turns = []
        for t in self.turns:
            rec = {
                "observation": list(t.observation), "prompt": list(t.prompt), "generated": list(t.generated),
                "format_ok": t.parse.format_ok, "executed": list(t.executed), "reward": t.reward,
            }
            if vocab is not None:
                rec["response_text"] = vocab.decode(t.prompt + t.generated)
            turns.append(rec)
        return {
            "instance_id": self.instance_id, "group": self.group, "policy_version": self.policy_version,
            "total_reward": self.total_reward, "success": self.success, "turns": turns,
            "tokens": self.tokens.tolist(), "generated": self.generated.astype(int).tolist(),
            "logprobs": [None if np.isnan(x) else x for x in self.logprobs.tolist()],
        }


@dataclass
class RolloutBatch:
    groups: list[list[Trajectory]]
    policy_version: int
    instance_ids: list[int] = field(default_factory=list)

    @property
    def trajectories(self) -> list[Trajectory]:
        return [t for g in self.groups for t in g]

    @property
    def P(self) -> int:
        return len(self.groups)

    @property
    def N(self) -> int:
        return len(self.groups[0]) if self.groups else 0

    def group_rewards(self) -> list[np.ndarray]:
        return [np.array([t.total_reward for t in g]) for g in self.groups]


class InstanceSampler:
    """Draws P distinct instance ids per batch from a pool of ``num_instances``."""

    def __init__(self, num_instances: int, seed: int = 0):
        self.num_instances = num_instances
        self.seed = seed

    def sample(self, P: int, step: int) -> list[int]:
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, step]))
        return [int(i) for i in rng.choice(self.num_instances, size=P, replace=P > self.num_instances)]


def episode_seeds(seed: int, version: int, group: int, rollout: int) -> tuple[int, int]:
    """(environment seed, sampling seed) for one trajectory."""
    a, b = np.random.SeedSequence([seed, version, group, rollout]).generate_state(2, np.uint64)
    return int(a), int(b)


class _Episode:
    def __init__(self, env: Environment, group: int, instance_id: int, env_seed: int, sample_seed: int):
        self.env = env
        self.group = group
        self.instance_id = instance_id
        self.rng = np.random.default_rng(sample_seed)
        self.obs = env.reset(env_seed, instance_id).tokens
        self.tokens: list[int] = []
        self.logprobs: list[float] = []
        self.generated: list[bool] = []
        self.turn_of: list[int] = []
        self.entropies: list[float] = []
        self.turns: list[Turn] = []
        self.success = False
        self.done = False

    def extend(self, ids, turn: int, logprobs=None, entropies=None) -> None:
        self.tokens.extend(ids)
        self.turn_of.extend([turn] * len(ids))
        if logprobs is None:
            self.logprobs.extend([np.nan] * len(ids))
            self.generated.extend([False] * len(ids))
        else:
            self.logprobs.extend(logprobs)
            self.generated.extend([True] * len(ids))
            self.entropies.extend(entropies)

    def finish(self, version: int) -> Trajectory:
        return Trajectory(self.instance_id, self.group, self.turns, np.array(self.tokens, dtype=np.int64),
                          np.array(self.logprobs), np.array(self.generated, dtype=bool),
                          np.array(self.turn_of, dtype=np.int64), np.array(self.entropies), self.success, version)


def run_episodes(policy: Policy, env: Environment, jobs: Sequence[tuple[int, int, int, int]],
                 settings: RolloutSettings, version: int) -> list[Trajectory]:
    """Run ``(group, instance_id, env_seed, sample_seed)`` jobs in lockstep."""
    vocab = policy.vocab
    prefill = (vocab.id(THINK_OPEN),) if settings.think_required else ()
    stop_ids = (vocab.id(ANSWER_CLOSE), vocab.eot_id)
    max_actions = env.spec.max_actions_per_turn
    episodes = []
    for group, instance_id, env_seed, sample_seed in jobs:
        clone = copy.copy(env)  # shares the instance cache
        episodes.append(_Episode(clone, group, instance_id, env_seed, sample_seed))

    for turn in range(env.spec.max_turns):
        active = [e for e in episodes if not e.done]
        if not active:
            break
        for e in active:
            e.turn_obs = tuple(e.obs)
            e.extend(e.obs, turn)
            e.extend(prefill, turn)
        samples = policy.sample_batch([e.tokens for e in active], [e.rng for e in active],
                                      settings.temperature, settings.max_response_tokens, stop_ids)
        for e, (toks, logps, ents) in zip(active, samples):
            start = len(e.tokens)
            e.extend(toks, turn, logps, ents)
            outcome = parse(prefill + tuple(toks), vocab, think_required=settings.think_required,
                            max_actions=max_actions)
            if outcome.format_ok:
                step = e.env.step(outcome.response.answer_actions)
                reward = step.reward
                executed = outcome.response.answer_actions[:step.actions_executed]
                e.obs = step.next_observation.tokens
                e.success = e.success or step.success
                e.done = e.env.done
            else:
                reward = outcome.penalty
                executed = ()
            e.turns.append(Turn(e.turn_obs, prefill, tuple(toks), outcome, tuple(executed), reward, start))
            if len(e.turns) >= env.spec.max_turns:
                e.done = True

    trajectories = [e.finish(version) for e in episodes]
    if settings.score_all_tokens:
        for traj in trajectories:
            missing = np.flatnonzero(~traj.generated)
            if len(missing):
                traj.logprobs[missing] = policy.sequence_log_probs(traj.tokens, missing, settings.temperature)
    return trajectories


def _run_chunk(args):
    return run_episodes(*args)


def collect(policy: Policy, env: Environment, instance_ids: Sequence[int], N: int,
            settings: RolloutSettings = RolloutSettings(), *, seed: int = 0, policy_version: int = 0,
            workers: int = 1) -> RolloutBatch:
    """P = len(instance_ids) groups of N trajectories sharing an initial state."""
    if len(instance_ids) * N < 1:
        raise ValueError("P * N must be >= 1")
    jobs = []
    for g, iid in enumerate(instance_ids):
        for n in range(N):
            env_seed, sample_seed = episode_seeds(seed, policy_version, g, n)
            jobs.append((g, int(iid), env_seed, sample_seed))
    if workers > 1 and len(instance_ids) > 1:
        per = -(-len(instance_ids) // workers)
        chunks = [jobs[i * per * N:(i + 1) * per * N] for i in range(workers)]
        chunks = [c for c in chunks if c]
        with ProcessPoolExecutor(max_workers=len(chunks)) as pool:
            parts = list(pool.map(_run_chunk, [(policy, env, c, settings, policy_version) for c in chunks]))
        trajectories = [t for part in parts for t in part]
    else:
        trajectories = run_episodes(policy, env, jobs, settings, policy_version)
    groups = [trajectories[g * N:(g + 1) * N] for g in range(len(instance_ids))]
    return RolloutBatch(groups, policy_version, [int(i) for i in instance_ids])


class RolloutSchedule:
    """Online-k reuse: a fresh batch every ``k`` updates, the cached one otherwise."""

    def __init__(self, collect_fn: Callable[[int], RolloutBatch], k: int = 1):
        if k < 1:
            raise ValueError("reuse count k must be >= 1")
        self.collect_fn = collect_fn
        self.k = k
        self._cached: RolloutBatch | None = None
        self.fresh_batches = 0

    def next_training_batch(self, update_step: int) -> RolloutBatch:
        if self._cached is None or update_step % self.k == 0:
            self._cached = self.collect_fn(update_step)
            self.fresh_batches += 1
        return self._cached


def write_trajectories(path: str | Path, batch: RolloutBatch, vocab=None, mode: str = "a") -> None:
    with open(path, mode, encoding="utf-8") as fh:
        for traj in batch.trajectories:
            fh.write(json.dumps(traj.to_dict(vocab), ensure_ascii=False) + "\n")


def read_trajectories(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
