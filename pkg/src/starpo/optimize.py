"""Token-level clipped surrogate objectives, Adam, and the update schedule.

The policy loss over a batch of G trajectories is

    L = -(1/G) sum_i (1/|tau_i|) sum_t [ min(rho A, clip(rho, 1-eps_low, 1+eps_high) A)
                                        + beta * H_t - kl_coeff * k1_t ]

with rho = exp(logp - logp_old), H_t the exact entropy of the token
distribution and k1_t = logp_old - logp. PPO and GRPO share this loss and
differ only in where the advantages come from; PPO additionally regresses
the critic onto reward-to-go targets.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .advantage import AdvantageTensor
from .errors import NumericError, ShapeError
from .policy import Gradient, Policy, log_softmax, windows
from .rollout import Trajectory

log = logging.getLogger(__name__)

MODES = ("ppo", "grpo")
CLIP_HIGHER_EPS = 0.28


@dataclass(frozen=True)
class OptimizeConfig:
    eps_low: float = 0.2
    eps_high: float = 0.2
    kl_coeff: float = 0.001
    entropy_beta: float = 0.001
    lr: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    update_batch_size: int = 32
    minibatch_size: int = 4
    value_coeff: float = 0.5
    gamma: float = 1.0
    lam: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.eps_low <= self.eps_high < 1.0:
            raise ValueError("need 0 < eps_low <= eps_high < 1")
        if self.entropy_beta < 0 or self.kl_coeff < 0 or self.value_coeff < 0:
            raise ValueError("entropy_beta, kl_coeff and value_coeff must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.update_batch_size < 1 or self.minibatch_size < 1:
            raise ValueError("batch sizes must be >= 1")
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0):
            raise ValueError("Adam betas must lie in [0, 1)")


def gradient_shaping_preset(config: OptimizeConfig) -> OptimizeConfig:
    """KL removal plus Clip-Higher."""
    return replace(config, kl_coeff=0.0, eps_high=max(config.eps_high, CLIP_HIGHER_EPS))


def clipped_surrogate(ratio, advantage, eps_low: float = 0.2, eps_high: float = 0.2):
    ratio = np.asarray(ratio, dtype=np.float64)
    if not np.all(np.isfinite(ratio)):
        raise NumericError("non-finite importance ratio (diverged policy)")
    advantage = np.asarray(advantage, dtype=np.float64)
    return np.minimum(ratio * advantage, np.clip(ratio, 1.0 - eps_low, 1.0 + eps_high) * advantage)


def surrogate_grad(ratio, advantage, eps_low: float = 0.2, eps_high: float = 0.2):
    """d surrogate / d ratio: the advantage where the unclipped branch is active, else 0."""
    ratio = np.asarray(ratio, dtype=np.float64)
    advantage = np.asarray(advantage, dtype=np.float64)
    active = ratio * advantage <= np.clip(ratio, 1.0 - eps_low, 1.0 + eps_high) * advantage
    return np.where(active, advantage, 0.0)


@dataclass
class LossResult:
    loss: float
    gradient: Gradient
    stats: dict


def _gather(trajectories, advantages, policy, all_tokens):
    if len(advantages.values) != len(trajectories):
        raise ShapeError(f"{len(advantages.values)} advantage rows for {len(trajectories)} trajectories")
    ctxs, targets, old, adv, owner = [], [], [], [], []
    for i, (traj, a) in enumerate(zip(trajectories, advantages.values)):
        mask = traj.loss_mask(all_tokens)
        if len(a) != int(mask.sum()):
            raise ShapeError(f"trajectory {i}: {len(a)} advantages for {int(mask.sum())} loss tokens")
        lp = traj.logprobs[mask]
        if np.any(np.isnan(lp)):
            raise ShapeError(f"trajectory {i}: loss tokens without behavior log-probs")
        ctxs.append(windows(traj.tokens, policy.window, policy.vocab.pad_id)[mask])
        targets.append(traj.tokens[mask])
        old.append(lp)
        adv.append(a)
        owner.append(np.full(len(a), i))
    return (np.concatenate(ctxs), np.concatenate(targets), np.concatenate(old), np.concatenate(adv),
            np.concatenate(owner))


def token_loss(trajectories: list[Trajectory], advantages: AdvantageTensor, policy: Policy,
               config: OptimizeConfig, mode: str = "grpo", *, value_targets: list[np.ndarray] | None = None,
               all_tokens: bool = False, temperature: float = 1.0, batch_size: int | None = None) -> LossResult:
    """Loss and exact gradient on a batch of trajectories.

    ``batch_size`` overrides G so that micro-batches of one update sum to the
    full-batch loss. Old log-probs are the behavior log-probs stored on each
    trajectory at sampling time.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    G = batch_size or len(trajectories)
    ctx, targets, old, adv, owner = _gather(trajectories, advantages, policy, all_tokens)
    lengths = np.bincount(owner, minlength=len(trajectories))
    coef = 1.0 / (G * lengths[owner])

    fw = policy.forward(ctx)
    logp_all = log_softmax(fw.logits / temperature)
    probs = np.exp(logp_all)
    rows = np.arange(len(targets))
    logp = logp_all[rows, targets]
    ratio = np.exp(logp - old)
    surr = clipped_surrogate(ratio, adv, config.eps_low, config.eps_high)
    ent = -(probs * logp_all).sum(axis=1)
    k1 = old - logp

    objective = np.sum(coef * (surr + config.entropy_beta * ent - config.kl_coeff * k1))
    d_logp = -coef * (surrogate_grad(ratio, adv, config.eps_low, config.eps_high) * ratio + config.kl_coeff)
    dz = -probs * d_logp[:, None]
    dz[rows, targets] += d_logp
    dz += (coef * config.entropy_beta)[:, None] * probs * (logp_all + ent[:, None])
    grad = policy.backward(fw, dz / temperature)
    loss = -objective

    clipped = (ratio < 1 - config.eps_low) | (ratio > 1 + config.eps_high)
    stats = {
        "policy_loss": float(-np.sum(coef * surr)),
        "entropy": float(np.sum(coef * ent) * G / len(trajectories)),
        "kl_k1": float(np.sum(coef * k1) * G / len(trajectories)),
        "clip_fraction": float(clipped.mean()),
        "ratio_max": float(ratio.max()),
        "tokens": int(len(targets)),
    }
    if mode == "ppo" and value_targets is not None:
        v_loss, v_grad = value_loss(trajectories, value_targets, policy, config.value_coeff, G)
        loss += v_loss
        grad += v_grad
        stats["value_loss"] = v_loss
    return LossResult(float(loss), grad, stats)


def value_loss(trajectories: list[Trajectory], targets: list[np.ndarray], policy: Policy,
               coeff: float = 0.5, batch_size: int | None = None) -> tuple[float, Gradient]:
    """coeff * mean over trajectories of the per-turn mean squared critic error."""
    G = batch_size or len(trajectories)
    ctxs, ys, w = [], [], []
    for traj, y in zip(trajectories, targets):
        if len(y) != len(traj.turns):
            raise ShapeError("one critic target per turn required")
        ctxs.append(windows(traj.tokens, policy.window, policy.vocab.pad_id)[traj.turn_starts()])
        ys.append(y)
        w.append(np.full(len(y), 1.0 / (G * len(y))))
    ctx, y, w = np.concatenate(ctxs), np.concatenate(ys), np.concatenate(w)
    fw = policy.forward(ctx)
    err = fw.values - y
    loss = coeff * float(np.sum(w * err ** 2))
    return loss, policy.backward(fw, dvalues=2.0 * coeff * w * err)


class Adam:
    def __init__(self, params: dict[str, np.ndarray], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def state_dict(self) -> dict:
        return {"t": self.t, "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}


def apply_update(params: dict[str, np.ndarray], grad: Gradient, adam: Adam, lr: float) -> float:
    """One bias-corrected Adam step in place; returns the pre-update gradient norm.

    A non-finite gradient aborts the step without touching the parameters.
    """
    for k, g in grad.arrays.items():
        if g.shape != params[k].shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {params[k].shape} for {k}")
    norm = grad.norm()
    if not np.isfinite(norm):
        raise NumericError("non-finite gradient; update aborted")
    adam.t += 1
    b1, b2 = adam.beta1, adam.beta2
    c1, c2 = 1.0 - b1 ** adam.t, 1.0 - b2 ** adam.t
    for k, g in grad.arrays.items():
        adam.m[k] = b1 * adam.m[k] + (1.0 - b1) * g
        adam.v[k] = b2 * adam.v[k] + (1.0 - b2) * g * g
        params[k] -= lr * (adam.m[k] / c1) / (np.sqrt(adam.v[k] / c2) + adam.eps)
    return norm


@dataclass(frozen=True)
class UpdateSchedule:
    loops: int
    P: int
    N: int
    E: int

    @property
    def total_steps(self) -> int:
        """S = L * P * N / E (any partial final minibatch is dropped)."""
        return self.loops * steps_per_batch(self.P * self.N, self.E)


def steps_per_batch(num_trajectories: int, E: int) -> int:
    if num_trajectories <= 0:
        return 0
    return max(1, num_trajectories // E)


def minibatches(num_trajectories: int, E: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled trajectory indices in chunks of E.

    A remainder smaller than E is dropped; a batch smaller than E yields one
    step on everything.
    """
    order = rng.permutation(num_trajectories)
    if num_trajectories < E:
        return [order] if num_trajectories else []
    steps = num_trajectories // E
    if num_trajectories % E:
        log.info("dropping %d trajectories that do not fill a minibatch of %d", num_trajectories % E, E)
    return [order[i * E:(i + 1) * E] for i in range(steps)]
