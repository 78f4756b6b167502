"""Finite-difference checks of every analytic gradient on small random batches."""

import numpy as np

from starpo.advantage import AdvantageTensor, broadcast_to_tokens
from starpo.envs import make_vocab
from starpo.optimize import OptimizeConfig, token_loss

from conftest import random_policy, synthetic_trajectory
from oracles import central_difference, max_relative_error

KINK_MARGIN = 1e-3


def _batch(rng, policy, n_traj=3):
    trajs = [synthetic_trajectory(policy, rng, n_turns=int(rng.integers(1, 3)), gen_len=int(rng.integers(2, 5)))
             for _ in range(n_traj)]
    adv = AdvantageTensor([broadcast_to_tokens(rng.normal(), t) for t in trajs], "GRPO")
    return trajs, adv


def _ratios(policy, trajs, temperature):
    out = []
    for t in trajs:
        pos = np.flatnonzero(t.generated)
        out.append(np.exp(policy.sequence_log_probs(t.tokens, pos, temperature) - t.logprobs[pos]))
    return np.concatenate(out)


def check_batch(seed: int) -> dict[str, float]:
    """Max relative errors for the four gradient families on one random batch."""
    rng = np.random.default_rng(seed)
    vocab = make_vocab("bandit", think_size=2)
    policy = random_policy(vocab, rng)
    temperature = float(rng.choice([1.0, 0.7]))
    errors = {}

    # log-prob gradient with arbitrary token weights
    ctx = rng.integers(0, len(vocab), (6, policy.window))
    tgt = rng.integers(0, len(vocab), 6)
    w = rng.normal(size=6)
    f = lambda: float(np.sum(w * policy.log_probs(ctx, tgt, temperature)))
    errors["policy"] = max_relative_error(policy.grad_log_prob(ctx, tgt, w, temperature).arrays,
                                          central_difference(f, policy.params))

    # value gradient
    wv = rng.normal(size=6)
    f = lambda: float(np.sum(wv * policy.forward(ctx).values))
    errors["value"] = max_relative_error(policy.grad_value(ctx, wv).arrays, central_difference(f, policy.params))

    # entropy: token_loss with zero advantage, no KL and beta=1 is minus the mean entropy
    trajs, _ = _batch(rng, policy)
    zero = AdvantageTensor([np.zeros(int(t.generated.sum())) for t in trajs], "GRPO")
    cfg = OptimizeConfig(kl_coeff=0.0, entropy_beta=1.0)
    f = lambda: token_loss(trajs, zero, policy, cfg, temperature=temperature).loss
    errors["entropy"] = max_relative_error(token_loss(trajs, zero, policy, cfg, temperature=temperature).gradient.arrays,
                                           central_difference(f, policy.params))

    # full loss: surrogate + entropy + KL + critic, away from clip kinks
    cfg = OptimizeConfig(eps_high=0.28, kl_coeff=0.05, entropy_beta=0.01)
    for _ in range(20):
        trajs, adv = _batch(rng, policy)
        r = _ratios(policy, trajs, temperature)
        if np.min(np.abs(np.concatenate([r - (1 - cfg.eps_low), r - (1 + cfg.eps_high)]))) > KINK_MARGIN:
            break
    targets = [rng.normal(size=len(t.turns)) for t in trajs]
    mode = str(rng.choice(["ppo", "grpo"]))
    loss = lambda: token_loss(trajs, adv, policy, cfg, mode, value_targets=targets, temperature=temperature).loss
    analytic = token_loss(trajs, adv, policy, cfg, mode, value_targets=targets, temperature=temperature).gradient
    errors["token_loss"] = max_relative_error(analytic.arrays, central_difference(loss, policy.params))
    return errors


def check_batches(n: int = 20) -> dict[str, float]:
    worst: dict[str, float] = {}
    for seed in range(n):
        for k, v in check_batch(seed).items():
            worst[k] = max(worst.get(k, 0.0), v)
    return worst
