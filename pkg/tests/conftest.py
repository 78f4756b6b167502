import numpy as np
import pytest

from starpo.envs import make_vocab
from starpo.rollout import Trajectory, Turn
from starpo.protocol import FORMAT_PENALTY, ParseOutcome
from starpo.policy import Policy


class ScriptedPolicy:
    """Stand-in policy that emits fixed token scripts, one per turn, cycling per episode slot."""

    def __init__(self, vocab, scripts, window=16):
        self.vocab = vocab
        self.scripts = [list(s) for s in scripts]
        self.window = window
        self.calls = 0

    def sample_batch(self, prefixes, rngs, temperature, max_tokens, stop_ids=()):
        out = []
        for _ in prefixes:
            toks = self.scripts[min(self.calls, len(self.scripts) - 1)][:max_tokens]
            out.append((toks, [-1.0] * len(toks), [0.5] * len(toks)))
        self.calls += 1
        return out


def make_text_policy(vocab, texts, window=16):
    return ScriptedPolicy(vocab, [vocab.encode(t) for t in texts], window)


def random_policy(vocab, rng, *, embed_dim=3, hidden=5, window=4, scale=0.5):
    """Small policy with every parameter nonzero, for gradient checks."""
    pol = Policy(vocab, embed_dim=embed_dim, hidden=hidden, window=window, seed=int(rng.integers(1 << 30)))
    for k, v in pol.params.items():
        pol.params[k] = rng.normal(0.0, scale, v.shape)
    return pol


def synthetic_trajectory(policy, rng, n_turns=2, obs_len=3, gen_len=4, group=0, rewards=None, perturb=0.3):
    """A trajectory with random tokens; behavior log-probs are the current ones plus noise."""
    V = len(policy.vocab)
    tokens, generated, turn_of, turns = [], [], [], []
    for t in range(n_turns):
        obs = rng.integers(0, V, obs_len).tolist()
        gen = rng.integers(0, V, gen_len).tolist()
        start = len(tokens) + obs_len
        tokens += obs + gen
        generated += [False] * obs_len + [True] * gen_len
        turn_of += [t] * (obs_len + gen_len)
        r = float(rewards[t]) if rewards is not None else float(rng.normal())
        turns.append(Turn(tuple(obs), (), tuple(gen), ParseOutcome(None, False, FORMAT_PENALTY), (), r, start))
    tokens = np.array(tokens, dtype=np.int64)
    generated = np.array(generated)
    logprobs = np.full(len(tokens), np.nan)
    pos = np.flatnonzero(generated)
    logprobs[pos] = policy.sequence_log_probs(tokens, pos) + rng.uniform(-perturb, perturb, len(pos))
    return Trajectory(0, group, turns, tokens, logprobs, generated, np.array(turn_of), np.zeros(len(pos)), False)


@pytest.fixture
def bandit_vocab():
    return make_vocab("bandit")


@pytest.fixture
def sokoban_vocab():
    return make_vocab("sokoban")


@pytest.fixture
def lake_vocab():
    return make_vocab("frozenlake")
