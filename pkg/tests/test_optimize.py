import math

import numpy as np
import pytest

from starpo.advantage import AdvantageTensor, broadcast_to_tokens
from starpo.envs import make_vocab
from starpo.errors import NumericError, ShapeError
from starpo.optimize import (Adam, OptimizeConfig, UpdateSchedule, apply_update, clipped_surrogate, gradient_shaping_preset,
                             minibatches, steps_per_batch, surrogate_grad, token_loss)
from starpo.policy import Gradient

from conftest import random_policy, synthetic_trajectory
from gradcheck import check_batch


def test_clipped_surrogate_examples():
    assert clipped_surrogate(1.5, 1.0) == pytest.approx(1.2)
    assert clipped_surrogate(0.5, -1.0) == pytest.approx(-0.8)
    assert clipped_surrogate(0.5, 1.0) == pytest.approx(0.5)
    assert clipped_surrogate(1.25, 1.0, 0.2, 0.28) == pytest.approx(1.25)
    assert clipped_surrogate(1.4, 1.0, 0.2, 0.28) == pytest.approx(1.28)


def test_clip_dead_zone_is_flat():
    lo, hi = 0.2, 0.28
    for rho in np.linspace(1 + hi + 1e-3, 3.0, 50):
        d = clipped_surrogate(rho + 1e-3, 1.0, lo, hi) - clipped_surrogate(rho, 1.0, lo, hi)
        assert abs(d) < 1e-12
        assert surrogate_grad(rho, 1.0, lo, hi) == 0.0
    for rho in np.linspace(0.01, 1 - lo - 1e-3, 50):
        d = clipped_surrogate(rho - 1e-3, -1.0, lo, hi) - clipped_surrogate(rho, -1.0, lo, hi)
        assert abs(d) < 1e-12
        assert surrogate_grad(rho, -1.0, lo, hi) == 0.0


def test_surrogate_grad_matches_finite_difference_off_kinks():
    rng = np.random.default_rng(0)
    for _ in range(500):
        rho, a = rng.uniform(0.3, 2.0), rng.normal()
        if min(abs(rho - 0.8), abs(rho - 1.28)) < 1e-3:
            continue
        h = 1e-7
        fd = (clipped_surrogate(rho + h, a, 0.2, 0.28) - clipped_surrogate(rho - h, a, 0.2, 0.28)) / (2 * h)
        assert surrogate_grad(rho, a, 0.2, 0.28) == pytest.approx(fd, abs=1e-6)


def test_nonfinite_ratio_aborts():
    with pytest.raises(NumericError):
        clipped_surrogate(np.inf, 1.0)


def test_config_validation_and_preset():
    with pytest.raises(ValueError):
        OptimizeConfig(eps_low=0.3, eps_high=0.2)
    with pytest.raises(ValueError):
        OptimizeConfig(lr=0)
    p = gradient_shaping_preset(OptimizeConfig())
    assert p.kl_coeff == 0.0 and p.eps_high == 0.28 and p.eps_low == 0.2


@pytest.mark.parametrize("seed", range(3))
def test_all_gradients_match_finite_differences(seed):
    errors = check_batch(seed)
    assert max(errors.values()) < 1e-4, errors


def test_token_loss_value_on_hand_batch():
    rng = np.random.default_rng(4)
    pol = random_policy(make_vocab("bandit"), rng)
    t = synthetic_trajectory(pol, rng, n_turns=1, gen_len=3, perturb=0.0)
    adv = AdvantageTensor([np.full(3, 2.0)], "GRPO")
    cfg = OptimizeConfig(kl_coeff=0.0, entropy_beta=0.0)
    # on-policy: ratio = 1 everywhere, surrogate = A, loss = -A
    res = token_loss([t], adv, pol, cfg)
    assert res.loss == pytest.approx(-2.0)
    assert res.stats["clip_fraction"] == 0.0


def test_microbatches_sum_to_full_batch():
    rng = np.random.default_rng(5)
    pol = random_policy(make_vocab("bandit"), rng)
    trajs = [synthetic_trajectory(pol, rng) for _ in range(6)]
    adv = AdvantageTensor([broadcast_to_tokens(rng.normal(), t) for t in trajs], "GRPO")
    cfg = OptimizeConfig()
    full = token_loss(trajs, adv, pol, cfg)
    parts = Gradient.zeros_like(pol.params)
    loss = 0.0
    for lo in (0, 2, 4):
        sub = AdvantageTensor(adv.values[lo:lo + 2], "GRPO")
        r = token_loss(trajs[lo:lo + 2], sub, pol, cfg, batch_size=6)
        parts += r.gradient
        loss += r.loss
    assert loss == pytest.approx(full.loss, abs=1e-12)
    np.testing.assert_allclose(parts.flat(), full.gradient.flat(), atol=1e-12)


def test_token_loss_shape_checks():
    rng = np.random.default_rng(6)
    pol = random_policy(make_vocab("bandit"), rng)
    t = synthetic_trajectory(pol, rng)
    with pytest.raises(ShapeError):
        token_loss([t], AdvantageTensor([np.zeros(1)], "GRPO"), pol, OptimizeConfig())
    with pytest.raises(ValueError):
        token_loss([t], AdvantageTensor([np.zeros(int(t.generated.sum()))], "GRPO"), pol, OptimizeConfig(), "a2c")


def test_adam_matches_reference_step():
    params = {"w": np.array([1.0, -2.0])}
    adam = Adam(params)
    g = Gradient({"w": np.array([0.5, -0.1])})
    norm = apply_update(params, g, adam, lr=0.1)
    assert norm == pytest.approx(math.hypot(0.5, 0.1))
    # first bias-corrected Adam step moves every coordinate by lr * sign(g)
    np.testing.assert_allclose(params["w"], [0.9, -1.9], atol=1e-7)
    g2 = Gradient({"w": np.array([0.2, 0.3])})
    m = 0.9 * 0.1 * np.array([0.5, -0.1]) + 0.1 * np.array([0.2, 0.3])
    v = 0.999 * 0.001 * np.array([0.25, 0.01]) + 0.001 * np.array([0.04, 0.09])
    expected = params["w"] - 0.1 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    apply_update(params, g2, adam, lr=0.1)
    np.testing.assert_allclose(params["w"], expected, rtol=1e-12)


def test_apply_update_rejects_nonfinite_without_touching_params():
    params = {"w": np.array([1.0])}
    adam = Adam(params)
    with pytest.raises(NumericError):
        apply_update(params, Gradient({"w": np.array([np.nan])}), adam, 0.1)
    assert params["w"][0] == 1.0 and adam.t == 0


def test_schedule_arithmetic():
    assert UpdateSchedule(2, 8, 16, 32).total_steps == 8
    assert steps_per_batch(128, 32) == 4
    assert steps_per_batch(40, 32) == 1
    assert steps_per_batch(8, 32) == 1


def test_minibatches_partition_and_drop():
    rng = np.random.default_rng(0)
    mb = minibatches(128, 32, rng)
    assert len(mb) == 4 and sorted(np.concatenate(mb).tolist()) == list(range(128))
    mb = minibatches(70, 32, rng)
    assert len(mb) == 2 and all(len(m) == 32 for m in mb)
    assert len(np.unique(np.concatenate(mb))) == 64
    mb = minibatches(32 // 4, 32, rng)
    assert len(mb) == 1 and len(mb[0]) == 8
