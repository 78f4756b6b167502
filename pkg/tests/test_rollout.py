import numpy as np
import pytest

from starpo.envs import make_env
from starpo.protocol import FORMAT_PENALTY
from starpo.rollout import (InstanceSampler, RolloutSchedule, RolloutSettings, collect, episode_seeds,
                            read_trajectories, run_episodes, write_trajectories)
from starpo.policy import Policy

from conftest import make_text_policy, random_policy

SOKO = ["######", "#P__O#", "#_X__#", "#____#", "#____#", "######"]


def _one(policy, env, settings=RolloutSettings(), iid=0):
    return run_episodes(policy, env, [(0, iid, *episode_seeds(0, 0, 0, 0))], settings, 0)[0]


def test_malformed_turn_penalty_and_no_transition(sokoban_vocab):
    env = make_env("sokoban", instances=[SOKO], vocab=sokoban_vocab)
    pol = make_text_policy(sokoban_vocab, ["Down</answer>", "</think><answer>Down</answer>", "#_#<eot>"])
    traj = _one(pol, env)
    t0, t1, t2 = traj.turns[:3]
    assert t0.reward == FORMAT_PENALTY and not t0.parse.format_ok and t0.executed == ()
    assert t1.observation == t0.observation  # no transition after the malformed turn
    assert t1.parse.format_ok and t1.executed == ("Down",) and t1.reward == pytest.approx(-0.1)
    assert t2.observation != t1.observation
    assert t2.reward == FORMAT_PENALTY
    assert len(traj.turns) == 5
    assert traj.total_reward == pytest.approx(4 * FORMAT_PENALTY - 0.1)


def test_prefill_and_generation_mask(sokoban_vocab):
    env = make_env("sokoban", instances=[SOKO], vocab=sokoban_vocab)
    pol = make_text_policy(sokoban_vocab, ["</think><answer>Left</answer>"])
    traj = _one(pol, env)
    t = traj.turns[0]
    assert t.prompt == (sokoban_vocab.id("<think>"),)
    gen_ids = traj.tokens[traj.generated]
    assert sokoban_vocab.decode(gen_ids[:len(t.generated)]).startswith("</think><answer>Left")
    # observation and prefill tokens are never generated, so have no behavior log-prob
    assert np.all(np.isnan(traj.logprobs[~traj.generated]))
    assert traj.turn_starts()[0] == len(t.observation) + 1


def test_no_think_mode_has_empty_think(sokoban_vocab):
    env = make_env("sokoban", instances=[SOKO], vocab=sokoban_vocab)
    pol = make_text_policy(sokoban_vocab, ["<answer>Left</answer>"])
    traj = _one(pol, env, RolloutSettings(think_required=False))
    assert traj.turns[0].prompt == ()
    assert all(t.parse.format_ok for t in traj.turns)
    assert traj.think_length == 0


def test_action_budget_across_turns(sokoban_vocab):
    env = make_env("sokoban", instances=[SOKO], vocab=sokoban_vocab)
    four = " || ".join(["Left", "Right"] * 2)
    pol = make_text_policy(sokoban_vocab, [f"</think><answer>{four}</answer>"])
    traj = _one(pol, env)
    assert [len(t.executed) for t in traj.turns] == [4, 4, 2]
    assert traj.num_actions == 10


def test_random_policy_budgets(lake_vocab):
    rng = np.random.default_rng(0)
    pol = random_policy(lake_vocab, rng, window=8, scale=1.0)
    env = make_env("frozenlake", vocab=lake_vocab, num_instances=50)
    batch = collect(pol, env, list(range(8)), 8, seed=1)
    for t in batch.trajectories:
        assert len(t.turns) <= 5 and t.num_actions <= 10
        assert len(t.tokens) == len(t.logprobs) == len(t.generated) == len(t.turn_of)
        assert len(t.entropies) == t.num_generated


def test_collect_shapes_and_worker_independence(lake_vocab):
    rng = np.random.default_rng(1)
    pol = random_policy(lake_vocab, rng, window=8, scale=1.0)
    env = make_env("frozenlake", vocab=lake_vocab, num_instances=20)
    a = collect(pol, env, [3, 4, 5, 6], 4, seed=9, policy_version=2)
    assert (a.P, a.N, len(a.trajectories)) == (4, 4, 16)
    assert all(t.instance_id == iid for g, iid in zip(a.groups, [3, 4, 5, 6]) for t in g)
    b = collect(pol, env, [3, 4, 5, 6], 4, seed=9, policy_version=2, workers=2)
    for x, y in zip(a.trajectories, b.trajectories):
        np.testing.assert_array_equal(x.tokens, y.tokens)
        # lockstep batch shapes differ across workers; BLAS may round the last bit differently
        np.testing.assert_allclose(x.logprobs, y.logprobs, rtol=1e-12, atol=0)
        assert x.total_reward == y.total_reward


def test_group_shares_initial_state(sokoban_vocab):
    pol = Policy(sokoban_vocab, window=8)
    env = make_env("sokoban", vocab=sokoban_vocab, num_instances=10)
    batch = collect(pol, env, [2, 7], 3, RolloutSettings(max_response_tokens=4))
    for g in batch.groups:
        assert len({t.turns[0].observation for t in g}) == 1
    assert batch.groups[0][0].turns[0].observation != batch.groups[1][0].turns[0].observation


def test_score_all_tokens(lake_vocab):
    pol = Policy(lake_vocab, window=8)
    env = make_env("frozenlake", vocab=lake_vocab, num_instances=5)
    t = collect(pol, env, [0], 2, RolloutSettings(score_all_tokens=True)).trajectories[0]
    assert not np.any(np.isnan(t.logprobs))
    assert t.loss_mask(True).all()


def test_online_k_schedule():
    calls = []

    def fake(step):
        calls.append(step)
        from starpo.rollout import RolloutBatch
        return RolloutBatch([], step)

    s1 = RolloutSchedule(fake, 1)
    assert [s1.next_training_batch(i).policy_version for i in range(4)] == [0, 1, 2, 3]
    calls.clear()
    s5 = RolloutSchedule(fake, 5)
    versions = [s5.next_training_batch(i).policy_version for i in range(12)]
    assert versions == [0] * 5 + [5] * 5 + [10] * 2
    assert calls == [0, 5, 10] and s5.fresh_batches == 3
    with pytest.raises(ValueError):
        RolloutSchedule(fake, 0)


def test_instance_sampler():
    s = InstanceSampler(100, seed=3)
    a = s.sample(8, 0)
    assert len(set(a)) == 8 and a == s.sample(8, 0) and a != s.sample(8, 1)


def test_trajectory_jsonl(tmp_path, lake_vocab):
    pol = Policy(lake_vocab, window=8)
    env = make_env("frozenlake", vocab=lake_vocab, num_instances=5)
    batch = collect(pol, env, [0, 1], 2, RolloutSettings(max_response_tokens=5))
    path = tmp_path / "t.jsonl"
    write_trajectories(path, batch, lake_vocab)
    recs = read_trajectories(path)
    assert len(recs) == 4
    assert recs[0]["total_reward"] == batch.trajectories[0].total_reward
    assert "response_text" in recs[0]["turns"][0]
