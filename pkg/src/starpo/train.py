"""Train and eval orchestration.

One loop iteration (an "update iteration") is: fetch a rollout batch
(fresh or reused under Online-k), optionally filter groups by reward std,
estimate advantages, take one Adam step per shuffled minibatch of E
trajectories, evaluate, and feed the collapse detector.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .advantage import GaeConfig, gae_tensor, grpo_tensor
from .config import ExperimentConfig
from .diagnostics import (CollapseState, MetricsRecord, evaluate, mean_in_group_std, update_collapse_state,
                          write_metrics_csv)
from .envs import Environment, make_env, make_vocab
from .errors import CheckpointError, NumericError
from .filtering import filter_batch
from .optimize import Adam, apply_update, minibatches, token_loss
from .policy import Gradient, Policy
from .rollout import InstanceSampler, RolloutSchedule, RolloutSettings, collect, write_trajectories

log = logging.getLogger(__name__)


def build_env(cfg: ExperimentConfig, vocab, *, eval_set: bool = False, name: str | None = None) -> Environment:
    e, r = cfg.env, cfg.rollout
    instances = None
    if cfg.env.instances_file and not eval_set:
        from .envs import read_instances
        instances = [rec["layout"] for rec in read_instances(cfg.env.instances_file)]
    return make_env(
        name or e.name, vocab=vocab, max_turns=r.max_turns, max_actions_per_turn=r.max_actions_per_turn,
        max_actions_per_episode=r.max_actions_per_episode,
        instance_seed=e.eval_seed if eval_set else e.instance_seed,
        num_instances=e.eval_size if eval_set else e.num_train_instances,
        instances=instances, bandit=cfg.bandit.build(), state_reward=e.state_reward,
        lake_size=tuple(e.lake_size), hole_prob=e.hole_prob)


def rollout_settings(cfg: ExperimentConfig) -> RolloutSettings:
    r = cfg.rollout
    return RolloutSettings(r.temperature, r.max_response_tokens, r.think_required, not r.response_mask)


@dataclass
class TrainResult:
    records: list[MetricsRecord]
    state: CollapseState
    policy: Policy
    summary: dict = field(default_factory=dict)


def train_step(policy: Policy, adam: Adam, batch, cfg: ExperimentConfig, rng: np.random.Generator) -> list[float]:
    """All minibatch updates for one (already filtered) batch; returns the step norms."""
    ocfg = cfg.effective_optimize()
    all_tokens = not cfg.rollout.response_mask
    trajs = batch.trajectories
    targets = None
    if cfg.mode == "grpo":
        adv = grpo_tensor(batch.groups, all_tokens)
    else:
        adv, targets = gae_tensor(policy, trajs, GaeConfig(ocfg.gamma, ocfg.lam), all_tokens)
    norms = []
    for idx in minibatches(len(trajs), ocfg.update_batch_size, rng):
        total = Gradient.zeros_like(policy.params)
        for lo in range(0, len(idx), ocfg.minibatch_size):
            chunk = idx[lo:lo + ocfg.minibatch_size]
            sub_adv = type(adv)([adv.values[i] for i in chunk], adv.estimator)
            res = token_loss([trajs[i] for i in chunk], sub_adv, policy, ocfg, cfg.mode,
                             value_targets=[targets[i] for i in chunk] if targets is not None else None,
                             all_tokens=all_tokens, temperature=cfg.rollout.temperature, batch_size=len(idx))
            total += res.gradient
        norms.append(apply_update(policy.params, total, adam, ocfg.lr))
    return norms


def run_train(cfg: ExperimentConfig, out_dir: str | Path | None = None, *, seed: int | None = None,
              workers: int | None = None, progress=None) -> TrainResult:
    seed = cfg.train.seed if seed is None else seed
    workers = cfg.train.workers if workers is None else workers
    started = time.perf_counter()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
        traj_path = out / "trajectories.jsonl"
        if cfg.train.log_trajectories:
            traj_path.write_text("")

    vocab = make_vocab(cfg.env.name, cfg.policy.think_vocab, cfg.bandit.build())
    train_env = build_env(cfg, vocab)
    eval_env = build_env(cfg, vocab, eval_set=True)
    p = cfg.policy
    policy = Policy(vocab, embed_dim=p.embed_dim, hidden=p.hidden, window=p.window,
                    seed=p.seed + seed, init_scale=p.init_scale)
    initial = policy.copy()
    ocfg = cfg.effective_optimize()
    fcfg = cfg.filter_config()
    adam = Adam(policy.params, ocfg.adam_beta1, ocfg.adam_beta2, ocfg.adam_eps)
    settings = rollout_settings(cfg)
    sampler = InstanceSampler(train_env.num_instances, seed)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    eval_ids = list(range(cfg.env.eval_size))

    def fresh(update: int):
        return collect(policy, train_env, sampler.sample(cfg.rollout.P, update), cfg.rollout.N, settings,
                       seed=seed, policy_version=update, workers=workers)

    schedule = RolloutSchedule(fresh, cfg.rollout.online_k)
    state = CollapseState()
    ccfg = cfg.diagnostics.build()
    records: list[MetricsRecord] = []
    total_steps = 0
    numeric_abort = None
    halted = False

    for update in range(cfg.train.loops):
        batch = schedule.next_training_batch(update)
        in_group = mean_in_group_std(batch.group_rewards())
        filtered = filter_batch(batch, fcfg) if fcfg.retain_fraction < 1.0 else None
        train_batch = filtered.batch if filtered else batch
        try:
            norms = train_step(policy, adam, train_batch, cfg, shuffle_rng)
        except NumericError as exc:
            log.warning("update %d aborted: %s", update, exc)
            numeric_abort = {"step": update, "error": str(exc)}
            norms = [math.inf]
        total_steps += len(norms) if numeric_abort is None else 0
        if cfg.train.log_trajectories and out is not None and batch.policy_version == update:
            write_trajectories(traj_path, batch, vocab)

        rec = MetricsRecord(step=update, mean_in_group_reward_std=in_group,
                            gradient_norm=float(max(norms)) if norms else math.nan,
                            retained_groups=train_batch.P, gradient_steps=len(norms),
                            policy_version=batch.policy_version)
        last = update == cfg.train.loops - 1
        if update % cfg.train.eval_interval == 0 or last or numeric_abort:
            ev = evaluate(policy, eval_env, eval_ids, temperature=cfg.train.eval_temperature,
                          seed=cfg.env.eval_seed, settings=settings, initial=initial)
            rec.success_rate = ev.success_rate
            rec.mean_token_entropy = ev.mean_token_entropy
            rec.mean_think_length = ev.mean_think_length
            rec.mean_total_length = ev.mean_total_length
            rec.kl_to_initial = ev.kl_to_initial
            rec.mean_reward = ev.mean_reward
            rec.format_rate = ev.format_rate
        records.append(rec)
        state = update_collapse_state(state, rec, ccfg)
        if progress is not None:
            progress(rec, state)
        if out is not None and cfg.train.checkpoint_interval and (update + 1) % cfg.train.checkpoint_interval == 0:
            policy.save(out / f"ckpt_{update + 1:05d}.json", **checkpoint_meta(cfg, update + 1))
        if numeric_abort or (state.irreversible and cfg.train.halt_on_collapse):
            halted = True
            break

    successes = [r.success_rate for r in records if not math.isnan(r.success_rate)]
    summary = {
        "env": cfg.env.name,
        "algorithm": cfg.train.algorithm,
        "seed": seed,
        "updates": len(records),
        "gradient_steps": total_steps,
        "final_success": successes[-1] if successes else None,
        "peak_success": max(successes) if successes else None,
        "collapse_step": state.irreversible_step,
        "early_warning_step": state.warning_step,
        "early_warning_metric": state.warning_metric,
        "halted": halted,
        "numeric_abort": numeric_abort,
        "optimize": asdict(ocfg),
        "starpo_s": {"retain_fraction": fcfg.retain_fraction, "preset": cfg.preset_enabled()},
        "think_required": cfg.rollout.think_required,
        "online_k": cfg.rollout.online_k,
        "fresh_batches": schedule.fresh_batches,
        "wall_seconds": round(time.perf_counter() - started, 3),
    }
    if out is not None:
        write_metrics_csv(out / "metrics.csv", records)
        policy.save(out / "checkpoint.json", **checkpoint_meta(cfg, len(records)))
        (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return TrainResult(records, state, policy, summary)


def checkpoint_meta(cfg: ExperimentConfig, updates: int) -> dict:
    return {"env": cfg.env.name, "updates": updates, "rollout": asdict(cfg.rollout),
            "bandit": asdict(cfg.bandit), "env_section": asdict(cfg.env)}


def run_eval(checkpoint: str | Path, env_name: str | None = None, *, eval_seed: int | None = None,
             eval_size: int | None = None, temperature: float = 0.5) -> dict:
    policy, meta = Policy.load(checkpoint)
    cfg = ExperimentConfig()
    if "rollout" in meta:
        cfg = ExperimentConfig.from_dict({"rollout": meta["rollout"], "bandit": meta.get("bandit", {}),
                                          "env": meta.get("env_section", {})})
    name = env_name or meta.get("env") or cfg.env.name
    cfg.env.name = name
    if eval_seed is not None:
        cfg.env.eval_seed = eval_seed
    if eval_size is not None:
        cfg.env.eval_size = eval_size
    expected = make_vocab(name, policy.vocab.think_size, cfg.bandit.build())
    if expected != policy.vocab:
        raise CheckpointError(f"checkpoint vocabulary does not match environment {name!r}")
    env = build_env(cfg, policy.vocab, eval_set=True, name=name)
    ev = evaluate(policy, env, list(range(cfg.env.eval_size)), temperature=temperature,
                  seed=cfg.env.eval_seed, settings=rollout_settings(cfg))
    result = {"env": name, "eval_seed": cfg.env.eval_seed, "eval_size": cfg.env.eval_size,
              "temperature": temperature, **ev.as_dict()}
    result["kl_to_initial"] = None
    return result
