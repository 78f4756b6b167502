import math

import numpy as np
import pytest

from starpo.diagnostics import (CollapseConfig, CollapseState, MetricsRecord, evaluate, mean_in_group_std,
                                read_metrics_csv, replay, repetition_score, update_collapse_state, write_metrics_csv)
from starpo.envs import make_env
from starpo.errors import SequencingError
from starpo.policy import Policy
from starpo.protocol import parse

from conftest import make_text_policy


def collapse_stream(std_drop=40, spike=90, steps=120, seed=0):
    """Synthetic run: in-group std collapses at ``std_drop``, gradient norm spikes at ``spike``."""
    rng = np.random.default_rng(seed)
    recs = []
    for s in range(steps):
        std = 0.3 + 0.05 * rng.random() if s < std_drop else 0.01 * rng.random()
        grad = 1.0 + 0.2 * rng.random()
        if s >= spike:
            grad *= 50.0
        recs.append(MetricsRecord(step=s, mean_in_group_reward_std=std, gradient_norm=grad,
                                  mean_token_entropy=2.0 - 0.01 * s, success_rate=0.5))
    return recs


def healthy_stream(steps=200, seed=0):
    rng = np.random.default_rng(seed)
    return [MetricsRecord(step=s, mean_in_group_reward_std=0.2 + 0.2 * rng.random(),
                          gradient_norm=float(np.exp(rng.normal(0, 0.3))),
                          mean_token_entropy=float(3 * np.exp(-s / 100) + 0.01 * rng.normal()))
            for s in range(steps)]


def test_collapse_narrative():
    state = replay(collapse_stream())
    assert state.early_warning and 40 <= state.warning_step <= 45
    assert state.warning_metric == "mean_in_group_reward_std"
    assert state.irreversible and state.irreversible_step == 90
    assert state.warning_step < state.irreversible_step


def test_healthy_streams_have_no_flags():
    for seed in range(10):
        state = replay(healthy_stream(seed=seed))
        assert not state.early_warning and not state.irreversible


def test_spike_without_warning_sets_both():
    recs = [MetricsRecord(step=s, mean_in_group_reward_std=0.3, gradient_norm=1.0 if s < 20 else 100.0)
            for s in range(25)]
    state = replay(recs)
    assert state.irreversible_step == 20 and state.warning_step == 20 and state.warning_metric == "gradient_norm"


def test_spike_needs_history():
    recs = [MetricsRecord(step=s, gradient_norm=1.0 if s < 3 else 100.0) for s in range(5)]
    assert not replay(recs).irreversible


def test_erraticity_rule_opt_in():
    recs = [MetricsRecord(step=s, mean_token_entropy=1.0 + (0.5 if s % 2 else 0.0)) for s in range(20)]
    assert not replay(recs).early_warning
    state = replay(recs, CollapseConfig(erratic_flips=5))
    assert state.early_warning and state.warning_metric == "mean_token_entropy"


def test_out_of_order_steps_rejected():
    s = update_collapse_state(CollapseState(), MetricsRecord(step=3))
    with pytest.raises(SequencingError):
        update_collapse_state(s, MetricsRecord(step=3))


def test_update_does_not_mutate_input():
    s0 = CollapseState()
    s1 = update_collapse_state(s0, MetricsRecord(step=0, gradient_norm=1.0))
    assert len(s0.grad_history) == 0 and len(s1.grad_history) == 1


def test_metrics_record_validation():
    with pytest.raises(ValueError):
        MetricsRecord(step=0, success_rate=1.5)
    with pytest.raises(ValueError):
        MetricsRecord(step=0, mean_think_length=-1.0)


def test_metrics_csv_round_trip(tmp_path):
    recs = collapse_stream(steps=10)
    recs[3].kl_to_initial = 0.123456789012345
    path = tmp_path / "m.csv"
    write_metrics_csv(path, recs)
    back = read_metrics_csv(path)
    for a, b in zip(recs, back):
        for k, v in vars(a).items():
            w = getattr(b, k)
            assert (math.isnan(v) and math.isnan(w)) or v == w


def test_metrics_csv_errors_carry_line_numbers(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("step,success_rate\n0,0.5\n1,abc\n")
    with pytest.raises(ValueError, match=":3:"):
        read_metrics_csv(path)
    path.write_text("foo\n1\n")
    with pytest.raises(ValueError, match="header"):
        read_metrics_csv(path)


def test_mean_in_group_std():
    assert mean_in_group_std([np.array([1, 0, 1, 0]), np.array([2, 2])]) == 0.25


def test_repetition_score():
    assert repetition_score([(1, 2), (1, 2), (3,), (4,)]) == 0.5
    assert repetition_score([(1,), (2,)]) == 0.0
    with pytest.raises(ValueError):
        repetition_score([(1,)])


class UniformArmPolicy:
    """Answers with a uniformly chosen arm each turn, always well formed."""

    def __init__(self, vocab):
        self.vocab = vocab

    def sample_batch(self, prefixes, rngs, temperature, max_tokens, stop_ids=()):
        out = []
        for rng in rngs:
            arm = self.vocab.actions[int(rng.integers(2))]
            toks = self.vocab.encode(f"</think><answer>{arm}</answer>")
            out.append((toks, [np.log(0.5)] * len(toks), [np.log(2)] * len(toks)))
        return out


def test_uniform_arm_policy_success_half(bandit_vocab):
    env = make_env("bandit", vocab=bandit_vocab)
    res = evaluate(UniformArmPolicy(bandit_vocab), env, range(2000), seed=2)
    assert abs(res.success_rate - 0.5) < 3 * math.sqrt(0.25 / 2000)
    assert res.format_rate == 1.0


def test_evaluate_deterministic_and_kl_zero_at_init(lake_vocab):
    pol = Policy(lake_vocab, window=8)
    env = make_env("frozenlake", vocab=lake_vocab, num_instances=16, instance_seed=2)
    a = evaluate(pol, env, range(16), seed=2, initial=pol.copy())
    b = evaluate(pol, env, range(16), seed=2, initial=pol.copy())
    assert a.as_dict() == b.as_dict()
    assert a.kl_to_initial == pytest.approx(0.0, abs=1e-12)
    # uniform over V tokens at any temperature
    assert a.mean_token_entropy == pytest.approx(math.log(len(lake_vocab)))


def test_fresh_policy_on_lake_matches_token_process_oracle(lake_vocab):
    """A zero-output-weight policy emits uniform tokens; compare to an independent Monte Carlo."""
    pol = Policy(lake_vocab, window=8)
    env = make_env("frozenlake", vocab=lake_vocab, num_instances=256, instance_seed=2)
    res = evaluate(pol, env, range(256), seed=2)

    rng = np.random.default_rng(12345)
    V = len(lake_vocab)
    stops = {lake_vocab.id("</answer>"), lake_vocab.eot_id}
    prefill = (lake_vocab.id("<think>"),)
    n, ok = 200_000, 0
    for _ in range(n):
        toks = []
        for _ in range(16):
            t = int(rng.integers(V))
            toks.append(t)
            if t in stops:
                break
        ok += parse(prefill + tuple(toks), lake_vocab).format_ok
    p = ok / n
    turns = sum(len(t.turns) for t in res.trajectories)
    sigma = math.sqrt(max(p * (1 - p), 1.0 / n) / turns)
    assert abs(res.format_rate - p) <= 4 * sigma + 1.0 / turns
    # success needs at least one well-formed turn
    assert res.success_rate <= 1 - (1 - p) ** 5 + 4 * math.sqrt(max(p, 1.0 / n) * 5 / 256)


def test_eval_success_is_env_predicate(sokoban_vocab):
    layout = ["######", "#PXO_#", "#____#", "#____#", "#____#", "######"]
    env = make_env("sokoban", vocab=sokoban_vocab, instances=[layout])
    pol = make_text_policy(sokoban_vocab, ["</think><answer>Right</answer>"])
    res = evaluate(pol, env, [0], seed=0)
    assert res.success_rate == 1.0 and res.mean_reward == pytest.approx(10.9)
